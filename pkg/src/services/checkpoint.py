"""Checkpoint save/load on top of the binary container."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .config import ModelConfig, config_to_dict
from .encoder import EncoderParams
from .errors import ConfigError, DataError
from .numerics import Tensor, get_default_dtype
from .storage import PathLike, read_container, write_container

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "shatter-checkpoint"
MOMENT_PREFIXES = ("optim.m.", "optim.v.")

Moments = Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]


@dataclass
class Checkpoint:
    config: ModelConfig
    params: EncoderParams
    step: int
    seed: int
    moments: Optional[Moments] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: PathLike, params: EncoderParams, config: ModelConfig, step: int, seed: int,
                    moments: Optional[Moments] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    manifest = {
        "kind": CHECKPOINT_KIND,
        "config": config_to_dict(config),
        "step": int(step),
        "seed": int(seed),
        "extra": extra or {},
    }
    blobs: Dict[str, np.ndarray] = {name: t.data for name, t in params.named().items()}
    if moments is not None:
        first, second = moments
        for name in first:
            blobs[f"{MOMENT_PREFIXES[0]}{name}"] = first[name]
            blobs[f"{MOMENT_PREFIXES[1]}{name}"] = second[name]
    written = write_container(path, manifest, blobs)
    logger.info("Saved checkpoint at step %d to %s", step, written)
    return written


def load_checkpoint(path: PathLike) -> Checkpoint:
    manifest, blobs = read_container(path)
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise DataError(f"{path} is not a checkpoint")
    try:
        config = ModelConfig(**manifest["config"])
    except Exception as e:
        raise ConfigError(f"{path}: stored config is invalid ({e})") from e

    dtype = get_default_dtype()
    tensors: Dict[str, Tensor] = {}
    first: Dict[str, np.ndarray] = {}
    second: Dict[str, np.ndarray] = {}
    for name, array in blobs.items():
        if name.startswith(MOMENT_PREFIXES[0]):
            first[name[len(MOMENT_PREFIXES[0]):]] = array.astype(dtype)
        elif name.startswith(MOMENT_PREFIXES[1]):
            second[name[len(MOMENT_PREFIXES[1]):]] = array.astype(dtype)
        else:
            tensors[name] = Tensor(array.astype(dtype), requires_grad=True)

    params = EncoderParams.from_named(tensors, config)
    return Checkpoint(
        config=config,
        params=params,
        step=int(manifest["step"]),
        seed=int(manifest["seed"]),
        moments=(first, second) if first else None,
        extra=manifest.get("extra", {}),
    )
