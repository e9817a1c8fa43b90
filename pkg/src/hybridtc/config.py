"""TOML run configuration shared by the command-line subcommands.

Example ``exp.toml`` (every key is optional)::

    seed = 0

    [synthetic]
    n_frames = 2000
    image_size = 64

    [synthetic.noise]
    block = 0.1
    strip = 0.1

    [train]
    batch_size = 32
    lr = 2e-4
    lr_schedule = "constant"
    width = 1.0

    [train.qc]
    mean = [0.1, 0.7]
    std = [0.1, 0.31]
    hours = [7, 16]

    [epochs]
    five_stage = [70, 500, 100, 200, 300]
    three_stage = [70, 500, 300]

    [estimate]
    blend = true
    reducer = "mean"
    smooth_window = 5

``seed`` feeds both the synthetic generator and every training RNG.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import NoiseConfig, SyntheticConfig
from .qc import QCThresholds
from .training import FIVE_STAGE_EPOCHS, THREE_STAGE_EPOCHS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EstimateConfig:
    blend: bool = True
    reducer: str = "mean"
    smooth_window: int = 5

    def __post_init__(self):
        if self.reducer not in ("mean", "median"):
            raise ValueError(f"reducer must be mean or median, not {self.reducer!r}")
        if self.smooth_window < 0 or (self.smooth_window and self.smooth_window % 2 == 0):
            raise ValueError("smooth_window must be 0 (off) or a positive odd number")


@dataclass
class RunConfig:
    seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    five_stage_epochs: tuple[int, ...] = FIVE_STAGE_EPOCHS
    three_stage_epochs: tuple[int, ...] = THREE_STAGE_EPOCHS
    estimate: EstimateConfig = field(default_factory=EstimateConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, synthetic=replace(self.synthetic, rng_seed=seed),
                       train=replace(self.train, seed=seed))


def _build(cls, table: dict, where: str, tuples=()):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kw = {k: tuple(v) if k in tuples or isinstance(v, list) else v for k, v in table.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def _epochs(v, n, name):
    if not isinstance(v, list) or len(v) != n or not all(isinstance(e, int) and e >= 0 for e in v):
        raise ConfigError(f"epochs.{name} must be a list of {n} nonnegative integers")
    return tuple(v)


def parse_config(doc: dict) -> RunConfig:
    doc = dict(doc)
    unknown = set(doc) - {"seed", "synthetic", "train", "epochs", "estimate"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    syn = dict(doc.get("synthetic", {}))
    noise = _build(NoiseConfig, syn.pop("noise", {}), "synthetic.noise")
    synthetic = _build(SyntheticConfig, syn, "synthetic")
    synthetic = replace(synthetic, noise=noise)
    tr = dict(doc.get("train", {}))
    qc = _build(QCThresholds, tr.pop("qc", {}), "train.qc")
    train = replace(_build(TrainConfig, tr, "train"), qc=qc)
    ep = dict(doc.get("epochs", {}))
    if set(ep) - {"five_stage", "three_stage"}:
        raise ConfigError("[epochs] accepts only five_stage and three_stage")
    cfg = RunConfig(
        synthetic=synthetic,
        train=train,
        five_stage_epochs=_epochs(ep["five_stage"], 5, "five_stage") if "five_stage" in ep else FIVE_STAGE_EPOCHS,
        three_stage_epochs=_epochs(ep["three_stage"], 3, "three_stage") if "three_stage" in ep else THREE_STAGE_EPOCHS,
        estimate=_build(EstimateConfig, doc.get("estimate", {}), "estimate"),
    )
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return cfg.with_seed(seed)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(Path(path), "rb") as fh:
            return parse_config(tomllib.load(fh))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
