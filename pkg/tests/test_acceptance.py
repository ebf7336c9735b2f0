"""Desk-scale training checks; minutes each, run with SHATTER_RUN_SLOW=1."""

import pytest

from src.services.checkpoint import load_checkpoint
from src.services.config import ClassificationStrategy, ModelConfig, RunConfig, ScheduleConfig, load_run_config
from src.services.encoder import EncoderParams, extend_max_length
from src.services.pretrain import evaluate_mlm, finetune, train, validation_batches
from src.services.tasks import TaskKind, bag_of_words_accuracy, synthetic_task_generator

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def _probe_config(preset: str) -> ModelConfig:
    base = ModelConfig(variant="shatter", num_layers=2, hidden_size=64, num_heads=4, intermediate_size=256,
                       vocab_size=64, max_len=32, num_labels=4)
    return base.with_preset(preset)


def test_position_probe_separates_order_aware_variants():
    wins = 0
    for seed in SEEDS:
        data = synthetic_task_generator(TaskKind.POSITION_PROBE, seed, size=4096, seq_len=32, vocab_size=64)
        train_set, dev_set = data.split(0.25)
        baseline = bag_of_words_accuracy(train_set, dev_set, seed)
        accuracy = {}
        for preset in ("No_Position", "Part_Mask", "Shatter"):
            config = _probe_config(preset)
            result = finetune(EncoderParams.init(config, seed), config, train_set, dev_set,
                              ClassificationStrategy.POOLED, steps=600, batch_size=32, peak_lr=1e-3, seed=seed)
            accuracy[preset] = result.dev_accuracy
        if (abs(accuracy["No_Position"] - baseline) <= 0.05
                and accuracy["Part_Mask"] >= baseline + 0.20 and accuracy["Shatter"] >= baseline + 0.20):
            wins += 1
    assert wins >= 2


def _copy_run(preset: str, seed: int) -> RunConfig:
    base = load_run_config("copy_mlm_toy")
    training = base.training.model_copy(update={
        "seed": seed, "deterministic": True, "eval_every": 1000,
        "schedule": ScheduleConfig(peak_lr=1e-3, warmup_steps=30, total_steps=300),
    })
    return RunConfig(model=base.model.with_preset(preset), training=training)


def _copy_corpus(seed: int, length: int):
    return synthetic_task_generator(TaskKind.COPY_MLM, seed, size=512, seq_len=length, vocab_size=64,
                                    period=8).to_corpus()


def _loss_increase(preset: str, seed: int, tmp_path) -> float:
    run = _copy_run(preset, seed)
    corpus = _copy_corpus(seed, 64)
    train_part, valid_part = corpus.split(0.1)
    train(run, train_part, valid_part, tmp_path / f"{preset}-{seed}", progress=False)
    checkpoint = load_checkpoint(tmp_path / f"{preset}-{seed}" / "checkpoint.bin")

    native = evaluate_mlm(checkpoint.params, run.model, validation_batches(_copy_corpus(seed + 100, 64), run))
    params, config = extend_max_length(checkpoint.params, run.model, 128, seed=seed)
    long_run = RunConfig(model=config, training=run.training.model_copy(update={"seq_len": 128}))
    extended = evaluate_mlm(params, config, validation_batches(_copy_corpus(seed + 100, 128), long_run))
    return extended - native


def test_shatter_extends_to_longer_sequences_better_than_bert(tmp_path):
    wins = 0
    for seed in SEEDS:
        if _loss_increase("Shatter", seed, tmp_path) < _loss_increase("BERT", seed, tmp_path):
            wins += 1
    assert wins >= 2


def test_ablation_ordering_majority(tmp_path):
    ladder = ("No_Position", "Part_Mask", "1H_Sigmoid", "Shatter")
    votes = 0
    for seed in SEEDS:
        finals = {}
        for preset in ladder:
            run = _copy_run(preset, seed)
            run = run.model_copy(update={"training": run.training.model_copy(update={"eval_every": 100})})
            train_part, valid_part = _copy_corpus(seed, 64).split(0.1)
            log = train(run, train_part, valid_part, tmp_path / f"{preset}-{seed}", progress=False)
            finals[preset] = log.valid_losses()[-1][1]
        ordered = (finals["No_Position"] > finals["Part_Mask"] >= finals["1H_Sigmoid"] * 0.98
                   and finals["1H_Sigmoid"] >= finals["Shatter"] * 0.98)
        votes += int(ordered)
    assert votes >= 2
