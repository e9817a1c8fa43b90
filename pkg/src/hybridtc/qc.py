"""VIS quality control and channel normalization."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import CHANNELS, Dataset, TCFrame, local_time

VERDICTS = ("good", "bad_mean", "bad_std", "bad_hour", "missing")


@dataclass(frozen=True)
class QCThresholds:
    mean: tuple[float, float] = (0.1, 0.7)
    std: tuple[float, float] = (0.1, 0.31)
    hours: tuple[int, int] = (7, 16)  # inclusive, i.e. 07:00-16:59 local


@dataclass(frozen=True)
class QCStats:
    mean: float
    std: float
    local_hour: int
    verdict: str

    @property
    def good(self) -> bool:
        return self.verdict == "good"


def vis_qc(frame: TCFrame, thresholds: QCThresholds = QCThresholds()) -> QCStats:
    hour = local_time(frame.meta).hour
    vis = np.asarray(frame.vis, dtype=np.float64)
    mean = float(vis.mean()) if vis.size else 0.0
    std = float(vis.std()) if vis.size else 0.0
    if not frame.vis_present:
        verdict = "missing"
    elif not thresholds.mean[0] <= mean <= thresholds.mean[1]:
        verdict = "bad_mean"
    elif not thresholds.std[0] <= std <= thresholds.std[1]:
        verdict = "bad_std"
    elif not thresholds.hours[0] <= hour <= thresholds.hours[1]:
        verdict = "bad_hour"
    else:
        verdict = "good"
    return QCStats(mean=mean, std=std, local_hour=hour, verdict=verdict)


def qc_mask(ds: Dataset, thresholds: QCThresholds = QCThresholds()) -> np.ndarray:
    return np.array([vis_qc(fr, thresholds).good for fr in ds.frames], dtype=bool)


def filter_good_vis(ds: Dataset, thresholds: QCThresholds = QCThresholds()) -> Dataset:
    keep = np.flatnonzero(qc_mask(ds, thresholds))
    return ds.subset(keep)


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel affine scaling ``(x - mean) / std`` in IR1, WV, VIS, PMW order."""

    mean: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    std: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.mean) != 4 or len(self.std) != 4:
            raise ValueError("ChannelStats needs four means and four stds")
        if not all(np.isfinite(self.mean)) or not all(np.isfinite(self.std)):
            raise ValueError("ChannelStats must be finite")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"channel std must be positive, got {self.std}")

    @classmethod
    def identity(cls) -> "ChannelStats":
        return cls()

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(mean=tuple(float(x) for x in d["mean"]), std=tuple(float(x) for x in d["std"]))


def fit_channel_stats(ds: Dataset) -> ChannelStats:
    """Dataset-level scaling: z-score for IR1/WV, scale-only for VIS/PMW.

    VIS stays a reflectance and PMW stays nonnegative, which keeps the
    generators' final relu consistent with their targets.
    """
    if not len(ds):
        return ChannelStats.identity()
    x = ds.stack().astype(np.float64)
    means, stds = [], []
    for c, name in enumerate(CHANNELS):
        v = x[:, c]
        if name in ("ir1", "wv"):
            means.append(float(v.mean()))
            stds.append(float(v.std()) or 1.0)
        elif name == "vis":
            means.append(0.0)
            stds.append(1.0)
        else:
            means.append(0.0)
            stds.append(float(v.std()) or 1.0)
    return ChannelStats(mean=tuple(means), std=tuple(stds))


def normalize_frame(frame: TCFrame, stats: ChannelStats) -> TCFrame:
    out = {}
    for c, name in enumerate(CHANNELS):
        a = (np.asarray(getattr(frame, name), dtype=np.float64) - stats.mean[c]) / stats.std[c]
        if name == "vis":
            a = np.clip(a, 0.0, 1.0)
        out[name] = a.astype(np.float32)
    return replace(frame, **out)


def denormalize_frame(frame: TCFrame, stats: ChannelStats) -> TCFrame:
    out = {}
    for c, name in enumerate(CHANNELS):
        a = np.asarray(getattr(frame, name), dtype=np.float64) * stats.std[c] + stats.mean[c]
        out[name] = a.astype(np.float32)
    return replace(frame, **out)


def normalize_dataset(ds: Dataset, stats: ChannelStats) -> Dataset:
    return Dataset(
        frames=tuple(normalize_frame(fr, stats) for fr in ds.frames),
        split_tag=ds.split_tag,
        truth=ds.truth,
        recipe=ds.recipe,
    )
