"""
Command-line entry point: python -m src.cli <command> [options].

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import os
import sys

if "--deterministic" in sys.argv:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Dict, List, Optional, Tuple  # noqa: E402

import yaml  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from . import __version__, settings  # noqa: E402
from .services.benchkit import (  # noqa: E402
    CONVENTION, build_cost_report, count_allocated_params, time_steps,
)
from .services.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .services.config import (  # noqa: E402
    ABLATION_LADDER, PRESETS, PartitionSpec, RunConfig, RunManifest, config_to_dict,
    format_validation_error, load_run_config,
)
from .services.encoder import EncoderParams, extend_max_length, resolve_strategies  # noqa: E402
from .services.errors import ConfigError, ShatterError  # noqa: E402
from .services.partition import partition_curve_rows  # noqa: E402
from .services.pretrain import (  # noqa: E402
    PACKING_POLICY, Corpus, evaluate_mlm, finetune, train, validation_batches,
)
from .services.storage import atomic_write_text  # noqa: E402
from .services.tasks import TaskKind, bag_of_words_accuracy, synthetic_task_generator  # noqa: E402

logger = logging.getLogger(__name__)

SYNTHETIC_CORPUS_SIZE = 512


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else settings.RUNS_DIR / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run(args) -> RunConfig:
    run = load_run_config(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "deterministic", False):
        updates["deterministic"] = True
    if updates:
        run = run.model_copy(update={"training": run.training.model_copy(update=updates)})
    return run


def _write_manifest(out: Path, run: RunConfig, argv: List[str], seeds: Dict[str, int],
                    data_hashes: Optional[Dict[str, str]] = None, notes: Optional[Dict] = None) -> Path:
    partition = run.model.partition
    manifest = RunManifest(
        command=argv,
        config=config_to_dict(run),
        seeds=seeds,
        partition=config_to_dict(partition) if partition is not None else None,
        data_hashes=data_hashes or {},
        code_version=__version__,
        deterministic=run.training.deterministic,
        notes=notes or {},
    )
    return atomic_write_text(out / "manifest.yaml", yaml.safe_dump(manifest.model_dump(), sort_keys=True))


def _load_corpora(args, run: RunConfig, out: Path) -> Tuple[Corpus, Corpus]:
    if getattr(args, "corpus", None):
        corpus = Corpus.from_text(args.corpus, run.model.vocab_size, cache_dir=out / "cache")
    else:
        logger.info("No --corpus given; using the synthetic copy_mlm corpus")
        dataset = synthetic_task_generator(
            TaskKind.COPY_MLM, run.training.seed, size=SYNTHETIC_CORPUS_SIZE, seq_len=run.seq_len,
            vocab_size=min(run.model.vocab_size, 64), period=getattr(args, "period", 8))
        corpus = dataset.to_corpus()
    return corpus.split(run.training.valid_fraction)


def _data_hashes(train_corpus: Corpus, valid_corpus: Corpus) -> Dict[str, str]:
    return {"train": train_corpus.data_hash(), "valid": valid_corpus.data_hash()}


def cmd_pretrain(args) -> int:
    run = _load_run(args)
    out = _out_dir(args, "pretrain")
    train_corpus, valid_corpus = _load_corpora(args, run, out)
    _write_manifest(out, run, args.argv, {"seed": run.training.seed},
                    _data_hashes(train_corpus, valid_corpus), {"packing": PACKING_POLICY})
    log = train(run, train_corpus, valid_corpus, out, steps=args.steps, resume=args.resume,
                progress=not args.quiet)
    valid = log.valid_losses()
    if valid:
        print(f"final valid loss {valid[-1][1]:.4f} at step {valid[-1][0]}")
    print(f"run directory: {out}")
    return 0


def _ablate_one(job) -> Tuple[str, List[Tuple[int, float]]]:
    name, run, train_corpus, valid_corpus, out, steps = job
    log = train(run, train_corpus, valid_corpus, out, steps=steps, progress=False)
    return name, log.valid_losses()


def cmd_ablate(args) -> int:
    base = _load_run(args)
    out = _out_dir(args, "ablate")
    names = args.variants or ABLATION_LADDER
    unknown = [name for name in names if name not in PRESETS]
    if unknown:
        raise ConfigError(f"Unknown variants {unknown}; choose from {sorted(PRESETS)}")
    train_corpus, valid_corpus = _load_corpora(args, base, out)
    _write_manifest(out, base, args.argv, {"seed": base.training.seed},
                    _data_hashes(train_corpus, valid_corpus), {"variants": ",".join(names)})

    jobs = []
    for name in names:
        run = base.model_copy(update={"model": base.model.with_preset(name)})
        jobs.append((name, run, train_corpus, valid_corpus, out / name, args.steps))
    if args.workers > 1 and not base.training.deterministic:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = dict(pool.map(_ablate_one, jobs))
    else:
        results = {}
        for job in jobs:
            logger.info("Ablation run %s", job[0])
            name, losses = _ablate_one(job)
            results[name] = losses

    steps = sorted({step for losses in results.values() for step, _ in losses})
    table = {name: dict(losses) for name, losses in results.items()}
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["step"] + names)
    for step in steps:
        writer.writerow([step] + [f"{table[name][step]:.6f}" if step in table[name] else "" for name in names])
    atomic_write_text(out / "ablation.csv", buffer.getvalue())
    for name in names:
        final = results[name][-1][1] if results[name] else float("nan")
        print(f"{name:12s} final valid loss {final:.4f}")
    return 0


def cmd_finetune_toy(args) -> int:
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        config, seed = checkpoint.config, checkpoint.seed
        params_source = lambda: load_checkpoint(args.checkpoint).params  # noqa: E731
        run = RunConfig(model=config)
    else:
        if not args.config:
            raise ConfigError("finetune-toy needs --checkpoint or --config")
        run = _load_run(args)
        config, seed = run.model, run.training.seed
        params_source = lambda: EncoderParams.init(config, seed)  # noqa: E731
    if args.seed is not None:
        seed = args.seed

    strategies = resolve_strategies(args.strategy)
    task = TaskKind(args.task)
    if task == TaskKind.COPY_MLM:
        raise ConfigError("copy_mlm is a masked-LM task, not a classification task")
    seq_len = min(args.seq_len or config.max_len, config.max_len)
    dataset = synthetic_task_generator(task, seed, size=args.size, seq_len=seq_len,
                                       vocab_size=min(config.vocab_size, 64),
                                       num_classes=min(config.num_labels, args.classes))
    train_set, dev_set = dataset.split(0.2)

    out = _out_dir(args, "finetune")
    _write_manifest(out, run, args.argv, {"seed": seed},
                    notes={"task": task.value, "strategy": args.strategy, "checkpoint": args.checkpoint})
    report = {"task": task.value, "seed": seed, "results": {},
              "bag_of_words_accuracy": bag_of_words_accuracy(train_set, dev_set, seed)}
    for strategy in strategies:
        result = finetune(params_source(), config, train_set, dev_set, strategy, steps=args.steps,
                          batch_size=args.batch_size, peak_lr=args.lr, seed=seed, progress=not args.quiet)
        report["results"][strategy.value] = {"dev_accuracy": result.dev_accuracy, "train_loss": result.train_loss,
                                             "steps": result.steps}
        print(f"{strategy.value:10s} dev accuracy {result.dev_accuracy:.3f}")
    print(f"{'bag-of-words':10s} dev accuracy {report['bag_of_words_accuracy']:.3f}")
    atomic_write_text(out / "finetune.json", json.dumps(report, indent=2, sort_keys=True))
    return 0


def _print_summary(report) -> None:
    print(f"variant: {report.variant}")
    print(f"parameters ({report.convention}):")
    for name, value in report.per_layer.items():
        print(f"  {name:24s} {value:>14,d} per layer")
    print(f"  total over {report.totals['layers']} layers: {report.totals['params']:,d} ({report.totals['human']})")
    print(f"attention FLOPs per layer at l={report.flops['seq_len']}: {report.flops['per_layer']:,d}")
    print(f"activation memory: {report.memory_bytes:,d} bytes")
    if report.ms_per_step is not None and report.ms_per_step.median_ms is not None:
        print(f"median step: {report.ms_per_step.median_ms:.2f} ms over {report.ms_per_step.steps} steps")
    for flag in report.flags:
        print(f"note: {flag}")


def cmd_bench(args) -> int:
    run = _load_run(args)
    length = args.seq_len or run.seq_len
    timing = None
    if args.steps:
        timing = time_steps(run.model, args.batch, length, args.steps, warmup=args.warmup,
                            seed=run.training.seed)
    report = build_cost_report(run.model, args.batch, length, timing)
    _print_summary(report)
    if args.out:
        atomic_write_text(args.out, report.model_dump_json(indent=2))
    return 0


def cmd_params(args) -> int:
    run = _load_run(args)
    model = run.model.with_preset(args.preset) if args.preset else run.model
    report = build_cost_report(model, 1, model.max_len)
    print(f"{report.totals['params']:,d} ({report.totals['human']}) - {CONVENTION}")
    for flag in report.flags:
        print(f"note: {flag}")
    if args.out:
        atomic_write_text(args.out, report.model_dump_json(indent=2))
    return 0


def cmd_partition_plot(args) -> int:
    if args.config:
        spec = _load_run(args).model.partition
        if spec is None:
            raise ConfigError("config has no partition spec (not a partition variant)")
    else:
        spec = PartitionSpec(n=args.n, num_layers=args.layers)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["layer", "part", "x", "weight"])
    count = 0
    for layer, part, x, weight in partition_curve_rows(spec, args.x_min, args.x_max):
        writer.writerow([layer, part, x, repr(weight)])
        count += 1
    out = Path(args.out) if args.out else settings.RUNS_DIR / "partition.csv"
    atomic_write_text(out, buffer.getvalue())
    print(f"wrote {count} rows to {out}")
    return 0


def cmd_extend(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.config
    out = _out_dir(args, "extend")
    before = count_allocated_params(checkpoint.params)
    params, new_config = extend_max_length(checkpoint.params, config, args.new_length,
                                           seed=args.seed if args.seed is not None else checkpoint.seed)
    after = count_allocated_params(params)
    report = {
        "old_length": config.max_len,
        "new_length": new_config.max_len,
        "params_before": before,
        "params_after": after,
        "param_delta": after - before,
        "position_rows_added": (new_config.max_len - config.max_len) if params.position is not None else 0,
    }

    if args.corpus or args.task:
        run = RunConfig(model=config)
        run = run.model_copy(update={"training": run.training.model_copy(update={"seed": checkpoint.seed})})
        native = _extension_corpus(args, run, config.max_len, checkpoint.seed)
        extended = _extension_corpus(args, run, new_config.max_len, checkpoint.seed)
        native_run = run.model_copy(update={"training": run.training.model_copy(update={"seq_len": config.max_len})})
        extended_run = RunConfig(model=new_config,
                                 training=run.training.model_copy(update={"seq_len": new_config.max_len}))
        report["loss_native"] = evaluate_mlm(checkpoint.params, config, validation_batches(native, native_run))
        report["loss_extended"] = evaluate_mlm(params, new_config, validation_batches(extended, extended_run))
        report["loss_increase"] = report["loss_extended"] - report["loss_native"]

    save_checkpoint(out / "checkpoint.bin", params, new_config, checkpoint.step, checkpoint.seed,
                    extra={"extended_from": config.max_len})
    atomic_write_text(out / "extend.json", json.dumps(report, indent=2, sort_keys=True))
    for key, value in report.items():
        print(f"{key:20s} {value}")
    return 0


def _extension_corpus(args, run: RunConfig, length: int, seed: int) -> Corpus:
    if args.corpus:
        return Corpus.from_text(args.corpus, run.model.vocab_size)
    dataset = synthetic_task_generator(TaskKind.COPY_MLM, seed + 1, size=64, seq_len=length,
                                       vocab_size=min(run.model.vocab_size, 64), period=args.period)
    return dataset.to_corpus()


def cmd_serve(args) -> int:
    import uvicorn
    uvicorn.run("src.api.main:app", host=args.host, port=args.port)
    return 0


def _common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="Config name, file or run manifest")
    parser.add_argument("--seed", type=int, default=None, help="Override the training seed")
    parser.add_argument("--deterministic", action="store_true", help="Synchronous sampling, single-threaded BLAS")
    parser.add_argument("--out", default=None, help="Output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shatter", description="Self-attention lab: pretrain, ablate, bench")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="MLM pretraining")
    _common(p)
    p.add_argument("--corpus", help="UTF-8 text, one document per line (default: synthetic copy_mlm)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--period", type=int, default=8)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("ablate", help="Run the ablation ladder on one corpus")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--variants", nargs="+", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--period", type=int, default=8)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("finetune-toy", help="Classify a synthetic task with [CLS] or pooled readout")
    _common(p, config_required=False)
    p.add_argument("--checkpoint")
    p.add_argument("--task", default=TaskKind.POSITION_PROBE.value, choices=[k.value for k in TaskKind])
    p.add_argument("--strategy", default="both", help="cls_token, pooled or both")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(handler=cmd_finetune_toy)

    p = sub.add_parser("bench", help="Parameter/FLOP/memory report, optional timing")
    _common(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--steps", type=int, default=0, help="Timed steps after warmup")
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("params", help="Parameter count under the weights-only convention")
    _common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.set_defaults(handler=cmd_params)

    p = sub.add_parser("partition-plot", help="Emit (layer, part, x, weight) rows")
    _common(p, config_required=False)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--x-min", type=int, default=-64)
    p.add_argument("--x-max", type=int, default=64)
    p.set_defaults(handler=cmd_partition_plot)

    p = sub.add_parser("extend", help="Extend a checkpoint to a longer max length")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--new-length", type=int, required=True)
    p.add_argument("--corpus")
    p.add_argument("--task", choices=[TaskKind.COPY_MLM.value], default=None)
    p.add_argument("--period", type=int, default=8)
    p.set_defaults(handler=cmd_extend)

    p = sub.add_parser("serve", help="Run the inspection API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format=settings.LOG_FORMAT)
    try:
        return args.handler(args)
    except ValidationError as e:
        logger.error("Invalid configuration: %s", format_validation_error(e))
        return ConfigError.exit_code
    except ShatterError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
