"""
Pretrain - desk-scale MLM pretraining and toy finetuning.

Corpus ingestion (whitespace tokenizer, frequency-ranked vocabulary, token
cache), BERT-style masking, Adam with decoupled weight decay, the
warmup/linear-decay schedule, metrics CSV and a resumable training loop.
Every random draw derives from (seed, step) so a resumed run continues
bit-identically.
"""

import csv
import hashlib
import io
import logging
import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ClassificationStrategy, MaskingConfig, ModelConfig, OptimizerConfig, RunConfig, ScheduleConfig,
)
from .encoder import (
    CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, SPECIAL_TOKENS, EncoderParams, classify, mlm_loss,
)
from .errors import DataError, NumericError
from .numerics import IGNORE_INDEX, Tensor, backward, cross_entropy
from .storage import PathLike, atomic_write_text, read_container, write_container

logger = logging.getLogger(__name__)

METRICS_HEADER = ["step", "train_loss", "valid_loss", "lr", "ms_per_step"]
CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"
CACHE_KIND = "shatter-token-cache"
PACKING_POLICY = "greedy: documents concatenated and cut into l-2 token chunks, each wrapped as [CLS] chunk [SEP]"


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def tokenize(text: str) -> List[str]:
    return text.lower().split()


class Vocabulary:
    """Token string <-> id; ids 0..4 are the special tokens, the rest ranked by frequency."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int) -> "Vocabulary":
        if max_size <= NUM_SPECIAL:
            raise DataError(f"vocabulary size must exceed {NUM_SPECIAL}")
        counts = Counter(token for text in texts for token in tokenize(text))
        for special in SPECIAL_TOKENS:
            counts.pop(special.lower(), None)
        ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        return cls(SPECIAL_TOKENS + [token for token, _ in ranked[:max_size - NUM_SPECIAL]])

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> np.ndarray:
        unk = self.index["[UNK]"]
        return np.asarray([self.index.get(token, unk) for token in tokenize(text)], dtype=np.int32)

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class Corpus:
    documents: List[np.ndarray]
    vocab: Vocabulary
    source_hash: str = ""
    cache_path: Optional[Path] = None
    _packed: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @classmethod
    def from_text(cls, path: PathLike, vocab_size: int, cache_dir: Optional[PathLike] = None,
                  vocab: Optional[Vocabulary] = None) -> "Corpus":
        """One document per non-empty line; the token cache is reused when the source hash matches."""
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Corpus not found: {path}")
        raw = path.read_bytes()
        digest = hashlib.sha256(raw).hexdigest()

        cache_path = Path(cache_dir) / f"{path.stem}.{vocab_size}.tokens" if cache_dir else None
        if cache_path is not None and cache_path.exists() and vocab is None:
            manifest, blobs = read_container(cache_path)
            if manifest.get("kind") == CACHE_KIND and manifest.get("source_hash") == digest:
                logger.info("Loaded token cache %s", cache_path)
                documents = np.split(blobs["ids"], blobs["offsets"][1:-1])
                return cls(documents=list(documents), vocab=Vocabulary(manifest["vocab"]),
                           source_hash=digest, cache_path=cache_path)

        try:
            lines = [line for line in raw.decode("utf-8").splitlines() if line.strip()]
        except UnicodeDecodeError as e:
            raise DataError(f"{path} is not UTF-8 text") from e
        if not lines:
            raise DataError(f"Corpus {path} is empty")
        vocab = vocab or Vocabulary.build(lines, vocab_size)
        corpus = cls(documents=[vocab.encode(line) for line in lines], vocab=vocab,
                     source_hash=digest, cache_path=cache_path)
        if cache_path is not None:
            corpus.write_cache(cache_path)
        return corpus

    def write_cache(self, path: PathLike) -> Path:
        lengths = [len(doc) for doc in self.documents]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int32)
        ids = np.concatenate(self.documents).astype(np.int32) if self.documents else np.zeros(0, np.int32)
        manifest = {"kind": CACHE_KIND, "source_hash": self.source_hash, "vocab": self.vocab.tokens}
        return write_container(path, manifest, {"ids": ids, "offsets": offsets})

    @property
    def num_tokens(self) -> int:
        return int(sum(len(doc) for doc in self.documents))

    def data_hash(self) -> str:
        if self.source_hash:
            return self.source_hash
        digest = hashlib.sha256()
        for doc in self.documents:
            digest.update(np.asarray(doc, dtype="<i4").tobytes())
        return digest.hexdigest()

    def split(self, valid_fraction: float) -> Tuple["Corpus", "Corpus"]:
        """Hold out the trailing documents (or the tail of a single document) for validation."""
        docs = self.documents
        if len(docs) >= 2:
            held = min(max(int(round(valid_fraction * len(docs))), 1), len(docs) - 1)
            train_docs, valid_docs = docs[:-held], docs[-held:]
        elif docs:
            cut = max(int(round(len(docs[0]) * (1.0 - valid_fraction))), 1)
            train_docs, valid_docs = [docs[0][:cut]], [docs[0][cut:]]
        else:
            raise DataError("cannot split an empty corpus")
        return (Corpus(train_docs, self.vocab, source_hash=f"{self.data_hash()}:train"),
                Corpus(valid_docs, self.vocab, source_hash=f"{self.data_hash()}:valid"))

    def pack(self, length: int) -> Tuple[np.ndarray, np.ndarray]:
        """(sequences, lengths): greedy packing into [CLS] chunk [SEP] rows padded to `length`."""
        if length < 4:
            raise DataError(f"sequence length {length} leaves no room for content")
        cached = self._packed.get(length)
        if cached is not None:
            return cached
        stream = np.concatenate(self.documents) if self.documents else np.zeros(0, np.int32)
        chunk = length - 2
        rows = []
        for start in range(0, len(stream), chunk):
            piece = stream[start:start + chunk]
            rows.append(np.concatenate([[CLS_ID], piece, [SEP_ID]]))
        sequences = np.full((len(rows), length), PAD_ID, dtype=np.int32)
        lengths = np.zeros(len(rows), dtype=np.int32)
        for i, row in enumerate(rows):
            sequences[i, :len(row)] = row
            lengths[i] = len(row)
        self._packed[length] = (sequences, lengths)
        return sequences, lengths


@dataclass
class MlmBatch:
    inputs: np.ndarray
    labels: np.ndarray
    pad: np.ndarray


def sample_mlm_batch(corpus: Corpus, masking: MaskingConfig, batch: int, length: int, seed: int) -> MlmBatch:
    """
    Draw `batch` packed sequences and mask round(fraction * count) of their
    non-special positions: mask/random/keep by the configured split. Labels
    hold the original ids at selected positions and IGNORE_INDEX elsewhere.
    Sequences with fewer than two content tokens are never drawn.
    """
    sequences, lengths = corpus.pack(length)
    eligible = np.nonzero(lengths - 2 >= 2)[0]
    if eligible.size == 0:
        raise DataError("corpus has no sequence with at least 2 content tokens")
    rng = np.random.default_rng(seed)
    rows = eligible[rng.integers(0, eligible.size, size=batch)]

    inputs = sequences[rows].copy()
    labels = np.full(inputs.shape, IGNORE_INDEX, dtype=np.int64)
    vocab_size = len(corpus.vocab)
    for b in range(batch):
        candidates = np.nonzero(~np.isin(inputs[b], (CLS_ID, SEP_ID, PAD_ID, MASK_ID)))[0]
        count = int(round(masking.fraction * candidates.size))
        if count == 0:
            continue
        chosen = np.sort(rng.choice(candidates, size=count, replace=False))
        labels[b, chosen] = inputs[b, chosen]
        roll = rng.random(count)
        to_mask = chosen[roll < masking.mask_prob]
        to_random = chosen[(roll >= masking.mask_prob) & (roll < masking.mask_prob + masking.random_prob)]
        inputs[b, to_mask] = MASK_ID
        if to_random.size:
            if vocab_size > NUM_SPECIAL:
                inputs[b, to_random] = rng.integers(NUM_SPECIAL, vocab_size, size=to_random.size)
            else:
                inputs[b, to_random] = MASK_ID
    pad = np.arange(length)[None, :] < lengths[rows][:, None]
    return MlmBatch(inputs=inputs, labels=labels, pad=pad)


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Linear 0 -> peak over warmup, then linear peak -> 0 at total_steps."""
    if step <= 0 and schedule.warmup_steps > 0:
        return 0.0
    if step >= schedule.total_steps:
        return 0.0
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    return schedule.peak_lr * (schedule.total_steps - step) / span


def update_lr(step: int, schedule: ScheduleConfig) -> float:
    """
    Rate for the update that produces step `step` (1-based).

    Warmup updates take lr_at(step) so the first one is already nonzero;
    decay updates take lr_at(step - 1) so the last one is too.
    """
    return lr_at(step if step <= schedule.warmup_steps else step - 1, schedule)


def decays(name: str) -> bool:
    """Token/position embeddings, layer norms and biases are excluded from weight decay."""
    return not (name.startswith("embeddings.") or "norm" in name or name.endswith("bias"))


@dataclass
class TrainState:
    params: Dict[str, Tensor]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: Dict[str, Tensor]) -> "TrainState":
        return cls(params=params,
                   m={name: np.zeros_like(t.data) for name, t in params.items()},
                   v={name: np.zeros_like(t.data) for name, t in params.items()})


def adam_step(state: TrainState, grads: Dict[str, np.ndarray], opt: OptimizerConfig, lr: float) -> TrainState:
    """Bias-corrected Adam with decoupled weight decay; updates parameters in place."""
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        logger.error("Aborting optimizer step %d: non-finite gradient in %s", state.step + 1, ", ".join(bad))
        raise NumericError(f"non-finite gradient in {', '.join(bad)}")

    t = state.step + 1
    correction1 = 1.0 - opt.beta1 ** t
    correction2 = 1.0 - opt.beta2 ** t
    for name, param in state.params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        dtype = param.data.dtype
        m = state.m[name] = (opt.beta1 * state.m[name] + (1.0 - opt.beta1) * grad).astype(dtype, copy=False)
        v = state.v[name] = (opt.beta2 * state.v[name] + (1.0 - opt.beta2) * grad * grad).astype(dtype, copy=False)
        update = (m / correction1) / (np.sqrt(v / correction2) + opt.eps)
        if opt.weight_decay and decays(name):
            update = update + opt.weight_decay * param.data
        param.data -= (lr * update).astype(param.data.dtype, copy=False)
    state.step = t
    return state


@dataclass
class MetricsRow:
    step: int
    train_loss: float
    valid_loss: Optional[float]
    lr: float
    ms_per_step: float

    def cells(self) -> List[str]:
        return [str(self.step), f"{self.train_loss:.6f}",
                "" if self.valid_loss is None else f"{self.valid_loss:.6f}",
                f"{self.lr:.6e}", f"{self.ms_per_step:.3f}"]


class MetricsLog:
    """Append-only rows with strictly increasing steps."""

    def __init__(self, rows: Optional[Iterable[MetricsRow]] = None):
        self.rows: List[MetricsRow] = []
        for row in rows or ():
            self.append(row)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"metrics step {row.step} does not follow {self.rows[-1].step}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def valid_losses(self) -> List[Tuple[int, float]]:
        return [(r.step, r.valid_loss) for r in self.rows if r.valid_loss is not None]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in self.rows:
            writer.writerow(row.cells())
        return buffer.getvalue()

    def write(self, path: PathLike) -> Path:
        return atomic_write_text(path, self.to_csv())

    def to_records(self) -> List[Dict]:
        return [row.__dict__.copy() for row in self.rows]

    @classmethod
    def from_records(cls, records: Iterable[Dict]) -> "MetricsLog":
        return cls(MetricsRow(**record) for record in records)

    @classmethod
    def read(cls, path: PathLike) -> "MetricsLog":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            return cls(MetricsRow(step=int(r["step"]), train_loss=float(r["train_loss"]),
                                  valid_loss=float(r["valid_loss"]) if r["valid_loss"] else None,
                                  lr=float(r["lr"]), ms_per_step=float(r["ms_per_step"]))
                       for r in reader)


def pretraining_parameters(params: EncoderParams) -> Dict[str, Tensor]:
    """Parameters the MLM objective reaches (the classification readout is left out)."""
    return {name: t for name, t in params.named().items()
            if not name.startswith(("pooler.", "classifier."))}


def _batch_stream(corpus: Corpus, run: RunConfig, first: int, last: int) -> Iterator[Tuple[int, MlmBatch]]:
    for step in range(first, last + 1):
        yield step, sample_mlm_batch(corpus, run.training.masking, run.training.batch_size, run.seq_len,
                                     derive_seed(run.training.seed, 0, step))


def _prefetched(stream: Iterator, size: int, poll: float = 0.1) -> Iterator:
    """Run `stream` on a worker thread behind a bounded queue; closing the generator stops the worker."""
    buffer: "queue.Queue" = queue.Queue(maxsize=size)
    stop = threading.Event()
    done = object()
    failure: List[BaseException] = []

    def offer(item) -> bool:
        while not stop.is_set():
            try:
                buffer.put(item, timeout=poll)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in stream:
                if not offer(item):
                    return
        except BaseException as e:
            failure.append(e)
        finally:
            offer(done)

    thread = threading.Thread(target=worker, name="batch-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                break
            yield item
    finally:
        stop.set()
        thread.join()
    if failure:
        raise failure[0]


def evaluate_mlm(params: EncoderParams, config: ModelConfig, batches: Sequence[MlmBatch]) -> float:
    losses = [mlm_loss(params, config, b.inputs, b.labels, b.pad).item() for b in batches]
    value = float(np.mean(losses)) if losses else float("nan")
    if not np.isfinite(value):
        raise NumericError(f"validation loss is not finite ({value})")
    return value


def validation_batches(corpus: Corpus, run: RunConfig) -> List[MlmBatch]:
    return [sample_mlm_batch(corpus, run.training.masking, run.training.batch_size, run.seq_len,
                             derive_seed(run.training.seed, 1, i))
            for i in range(run.training.valid_batches)]


def train(run: RunConfig, corpus: Corpus, valid: Corpus, out_dir: PathLike, *, steps: Optional[int] = None,
          resume: bool = False, progress: bool = True) -> MetricsLog:
    """
    MLM pretraining into `out_dir` (checkpoint.bin + metrics.csv).

    The update at step s uses update_lr(s). Validation runs every eval_every
    steps and at the last step; the checkpoint, which also carries the
    metrics rows, is refreshed every checkpoint_every steps and at the end.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    training = run.training
    steps = training.schedule.total_steps if steps is None else steps
    checkpoint_path = out_dir / CHECKPOINT_NAME

    if resume and checkpoint_path.exists():
        checkpoint = load_checkpoint(checkpoint_path)
        params = checkpoint.params
        state = TrainState(params=pretraining_parameters(params), m={}, v={}, step=checkpoint.step)
        if checkpoint.moments is None:
            state = TrainState.fresh(state.params)
            state.step = checkpoint.step
        else:
            state.m, state.v = checkpoint.moments
        log = MetricsLog.from_records(checkpoint.extra.get("metrics", []))
        logger.info("Resuming from step %d in %s", state.step, out_dir)
    else:
        params = EncoderParams.init(run.model, training.seed)
        state = TrainState.fresh(pretraining_parameters(params))
        log = MetricsLog()
        _save(checkpoint_path, params, run, state, log)

    valid_batches = validation_batches(valid, run)
    stream = _batch_stream(corpus, run, state.step + 1, steps)
    if not training.deterministic and training.prefetch > 0:
        stream = _prefetched(stream, training.prefetch)

    bar = tqdm(stream, total=max(steps - state.step, 0), desc="pretrain", disable=not progress, leave=False)
    try:
        for step, batch in bar:
            started = time.perf_counter()
            loss = mlm_loss(params, run.model, batch.inputs, batch.labels, batch.pad,
                            rng=np.random.default_rng(derive_seed(training.seed, 2, step)))
            train_loss = loss.item()
            if not np.isfinite(train_loss):
                raise NumericError(f"training loss is not finite at step {step}")
            gradients = backward(loss)
            grads = {name: gradients.get(t, np.zeros_like(t.data)) for name, t in state.params.items()}
            lr = update_lr(step, training.schedule)
            adam_step(state, grads, training.optimizer, lr)
            elapsed_ms = (time.perf_counter() - started) * 1000.0

            valid_loss = None
            if step % training.eval_every == 0 or step == steps:
                valid_loss = evaluate_mlm(params, run.model, valid_batches)
                logger.info("step %d train_loss %.4f valid_loss %.4f lr %.3e", step, train_loss, valid_loss, lr)
            log.append(MetricsRow(step=step, train_loss=train_loss, valid_loss=valid_loss, lr=lr,
                                  ms_per_step=0.0 if training.deterministic else elapsed_ms))
            bar.set_postfix({"loss": f"{train_loss:.3f}"})
            if step % training.checkpoint_every == 0 or step == steps:
                _save(checkpoint_path, params, run, state, log)
    finally:
        bar.close()
        stream.close()

    log.write(out_dir / METRICS_NAME)
    return log


def _save(path: Path, params: EncoderParams, run: RunConfig, state: TrainState, log: MetricsLog) -> None:
    save_checkpoint(path, params, run.model, state.step, run.training.seed, moments=(state.m, state.v),
                    extra={"metrics": log.to_records()})
    log.write(path.parent / METRICS_NAME)


@dataclass
class FinetuneResult:
    strategy: ClassificationStrategy
    steps: int
    train_loss: float
    dev_accuracy: float


def classification_accuracy(params: EncoderParams, config: ModelConfig, tokens: np.ndarray, pad: np.ndarray,
                            labels: np.ndarray, strategy: ClassificationStrategy, batch_size: int = 64) -> float:
    correct = 0
    for start in range(0, len(labels), batch_size):
        scores = classify(tokens[start:start + batch_size], pad[start:start + batch_size], config, params, strategy)
        correct += int((scores.data.argmax(axis=-1) == labels[start:start + batch_size]).sum())
    return correct / max(len(labels), 1)


def finetune(params: EncoderParams, config: ModelConfig, train_set, dev_set, strategy: ClassificationStrategy,
             *, steps: int = 300, batch_size: int = 32, peak_lr: float = 1e-3, seed: int = 0,
             optimizer: Optional[OptimizerConfig] = None, progress: bool = False) -> FinetuneResult:
    """Train encoder and classifier on a labelled dataset, then report dev accuracy."""
    strategy = ClassificationStrategy(strategy)
    if train_set.labels is None or dev_set.labels is None:
        raise DataError(f"task {train_set.kind} has no labels to finetune on")
    if train_set.num_classes > config.num_labels:
        raise DataError(f"task has {train_set.num_classes} classes but the model has {config.num_labels} labels")
    optimizer = optimizer or OptimizerConfig()
    schedule = ScheduleConfig(peak_lr=peak_lr, warmup_steps=max(steps // 10, 0), total_steps=max(steps, 1))
    state = TrainState.fresh(params.named())

    train_loss = float("nan")
    for step in tqdm(range(1, steps + 1), desc=f"finetune[{strategy.value}]", disable=not progress, leave=False):
        rng = np.random.default_rng(derive_seed(seed, 3, step))
        rows = rng.integers(0, len(train_set.labels), size=batch_size)
        scores = classify(train_set.tokens[rows], train_set.pad[rows], config, params, strategy, rng=rng)
        loss = cross_entropy(scores, train_set.labels[rows])
        train_loss = loss.item()
        gradients = backward(loss)
        grads = {name: gradients.get(t, np.zeros_like(t.data)) for name, t in state.params.items()}
        adam_step(state, grads, optimizer, update_lr(step, schedule))

    accuracy = classification_accuracy(params, config, dev_set.tokens, dev_set.pad, dev_set.labels, strategy)
    logger.info("finetune %s: %d steps, dev accuracy %.3f", strategy.value, steps, accuracy)
    return FinetuneResult(strategy=strategy, steps=steps, train_loss=train_loss, dev_accuracy=accuracy)
