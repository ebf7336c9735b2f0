"""
Tasks - synthetic order-sensitivity datasets and a bag-of-words baseline.

position_probe: every class token appears exactly once per sequence among
distractors; the label is the class of the token at a fixed position, so
token counts carry no signal. order_pair: two marker tokens appear once each;
the label says whether the first marker precedes the second. copy_mlm: a
random segment of fixed period repeated across the sequence, so a masked
token is recoverable from the token one period away.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .config import OptimizerConfig
from .encoder import CLS_ID, NUM_SPECIAL, PAD_ID, SEP_ID, SPECIAL_TOKENS
from .errors import ConfigError
from .numerics import Tensor, backward, cross_entropy, matmul
from .pretrain import Corpus, TrainState, Vocabulary, adam_step

logger = logging.getLogger(__name__)


class TaskKind(str, Enum):
    POSITION_PROBE = "position_probe"
    ORDER_PAIR = "order_pair"
    COPY_MLM = "copy_mlm"


@dataclass
class SyntheticDataset:
    kind: TaskKind
    tokens: np.ndarray
    pad: np.ndarray
    labels: Optional[np.ndarray]
    num_classes: int
    vocab_size: int

    def __len__(self) -> int:
        return len(self.tokens)

    def split(self, dev_fraction: float = 0.2) -> Tuple["SyntheticDataset", "SyntheticDataset"]:
        cut = len(self) - max(int(round(dev_fraction * len(self))), 1)

        def part(rows: slice) -> "SyntheticDataset":
            labels = None if self.labels is None else self.labels[rows]
            return SyntheticDataset(self.kind, self.tokens[rows], self.pad[rows], labels,
                                    self.num_classes, self.vocab_size)

        return part(slice(0, cut)), part(slice(cut, None))

    def to_corpus(self) -> Corpus:
        """Content tokens of each sequence as one document; packs back to the same rows."""
        vocab = Vocabulary(SPECIAL_TOKENS + [f"t{i}" for i in range(NUM_SPECIAL, self.vocab_size)])
        documents = [row[(row != CLS_ID) & (row != SEP_ID) & (row != PAD_ID)].astype(np.int32)
                     for row in self.tokens]
        return Corpus(documents=documents, vocab=vocab)


def _frame(content: np.ndarray) -> np.ndarray:
    size = content.shape[0]
    return np.concatenate([np.full((size, 1), CLS_ID), content, np.full((size, 1), SEP_ID)], axis=1)


def synthetic_task_generator(kind, seed: int, *, size: int = 1024, seq_len: int = 32, vocab_size: int = 64,
                             num_classes: int = 4, period: int = 8,
                             probe_offset: Optional[int] = None) -> SyntheticDataset:
    """Deterministic per (kind, seed, shape arguments)."""
    kind = TaskKind(kind)
    content_len = seq_len - 2
    rng = np.random.default_rng(seed)
    distractors = np.arange(NUM_SPECIAL + max(num_classes, 2), vocab_size)
    if content_len < max(num_classes, 2) + 1 or distractors.size == 0:
        raise ConfigError(f"seq_len {seq_len} / vocab_size {vocab_size} too small for {kind.value}")

    labels = None
    classes = num_classes
    if kind == TaskKind.POSITION_PROBE:
        offset = content_len // 2 if probe_offset is None else probe_offset
        if not 0 <= offset < content_len:
            raise ConfigError(f"probe offset {offset} outside the content window")
        labels = rng.permutation(np.arange(size) % num_classes)
        content = rng.choice(distractors, size=(size, content_len))
        for i, label in enumerate(labels):
            others = np.delete(np.arange(content_len), offset)
            slots = rng.choice(others, size=num_classes - 1, replace=False)
            rest = [c for c in range(num_classes) if c != label]
            content[i, offset] = NUM_SPECIAL + label
            content[i, slots] = NUM_SPECIAL + np.asarray(rest)
    elif kind == TaskKind.ORDER_PAIR:
        classes = 2
        labels = rng.permutation(np.arange(size) % 2)
        content = rng.choice(distractors, size=(size, content_len))
        first, second = NUM_SPECIAL, NUM_SPECIAL + 1
        for i, label in enumerate(labels):
            a, b = np.sort(rng.choice(content_len, size=2, replace=False))
            if not label:
                a, b = b, a
            content[i, a], content[i, b] = first, second
    else:
        if period < 1 or period > content_len:
            raise ConfigError(f"period {period} must lie in [1, {content_len}]")
        classes = 0
        segments = rng.choice(distractors, size=(size, period))
        reps = -(-content_len // period)
        content = np.tile(segments, (1, reps))[:, :content_len]

    tokens = _frame(content).astype(np.int32)
    pad = np.ones(tokens.shape, dtype=bool)
    return SyntheticDataset(kind=kind, tokens=tokens, pad=pad,
                            labels=None if labels is None else labels.astype(np.int64),
                            num_classes=classes, vocab_size=vocab_size)


def token_counts(dataset: SyntheticDataset) -> np.ndarray:
    counts = np.zeros((len(dataset), dataset.vocab_size))
    rows = np.repeat(np.arange(len(dataset)), dataset.tokens.shape[1])
    np.add.at(counts, (rows, dataset.tokens.reshape(-1)), dataset.pad.reshape(-1).astype(float))
    return counts


def bag_of_words_accuracy(train: SyntheticDataset, dev: SyntheticDataset, seed: int = 0, *,
                          steps: int = 300, lr: float = 0.05) -> float:
    """Softmax regression on token counts, full-batch Adam; returns dev accuracy."""
    if train.labels is None:
        raise ConfigError(f"task {train.kind.value} has no labels")
    rng = np.random.default_rng(seed)
    features = token_counts(train)
    scale = features.std(axis=0) + 1e-6
    center = features.mean(axis=0)
    x_train = Tensor((features - center) / scale)
    x_dev = (token_counts(dev) - center) / scale

    weight = Tensor(rng.normal(0.0, 0.01, size=(train.vocab_size, train.num_classes)), requires_grad=True)
    bias = Tensor(np.zeros(train.num_classes), requires_grad=True)
    state = TrainState.fresh({"bow.weight": weight, "bow.bias": bias})
    opt = OptimizerConfig(weight_decay=0.0)
    for _ in range(steps):
        loss = cross_entropy(matmul(x_train, weight) + bias, train.labels)
        gradients = backward(loss)
        adam_step(state, {name: gradients[t] for name, t in state.params.items()}, opt, lr)

    predictions = (x_dev @ weight.data + bias.data).argmax(axis=-1)
    accuracy = float((predictions == dev.labels).mean())
    logger.info("bag-of-words baseline on %s: dev accuracy %.3f", train.kind.value, accuracy)
    return accuracy
