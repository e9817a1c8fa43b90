"""Operational estimation: IR1 + WV in, generated VIS/PMW, intensity out.

Nothing on this path reads a frame's real VIS or PMW channel; the two
generators stand in for them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import nets as N
from .augment import BLEND_ANGLES, rotate_batch
from .dataset import Dataset, FrameMeta
from .qc import ChannelStats

BUNDLE_FILES = {"gen_vis": "gen_vis.pt", "gen_pmw": "gen_pmw.pt", "regressor": "regressor.pt"}


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class EstimateRecord:
    tc_id: str
    utc_time: datetime
    vmax_raw: float
    vmax_blend: float | None = None
    vmax_smooth: float | None = None
    angles_used: tuple[float, ...] = (0.0,)


@dataclass
class ModelBundle:
    gen_vis: torch.nn.Module
    gen_pmw: torch.nn.Module
    regressor: torch.nn.Module
    stats: ChannelStats

    @classmethod
    def from_nets(cls, nets: dict, stats: ChannelStats) -> "ModelBundle":
        missing = [n for n in BUNDLE_FILES if nets.get(n) is None]
        if missing:
            raise MissingCheckpointError(f"missing trained networks: {missing}")
        return cls(nets["gen_vis"], nets["gen_pmw"], nets["regressor"], stats)

    @property
    def image_size(self) -> int:
        return self.regressor.image_size

    def save(self, directory, stage: str = "final"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, fname in BUNDLE_FILES.items():
            N.save_network(d / fname, getattr(self, name), stage)
        (d / "bundle.json").write_text(json.dumps({"stats": self.stats.to_dict(), "files": BUNDLE_FILES}, indent=2))

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        d = Path(directory)
        for fname in ["bundle.json", *BUNDLE_FILES.values()]:
            if not (d / fname).exists():
                raise MissingCheckpointError(f"{d / fname} not found")
        meta = json.loads((d / "bundle.json").read_text())
        nets = {name: N.load_network(d / fname) for name, fname in BUNDLE_FILES.items()}
        return cls.from_nets(nets, ChannelStats.from_dict(meta["stats"]))

    def eval(self) -> "ModelBundle":
        for net in (self.gen_vis, self.gen_pmw, self.regressor):
            net.eval()
        return self


def _normalize(bundle: ModelBundle, ir1, wv) -> torch.Tensor:
    st = bundle.stats
    ir1 = (torch.as_tensor(np.asarray(ir1), dtype=torch.float64) - st.mean[0]) / st.std[0]
    wv = (torch.as_tensor(np.asarray(wv), dtype=torch.float64) - st.mean[1]) / st.std[1]
    if ir1.shape != wv.shape:
        raise ValueError(f"ir1 {tuple(ir1.shape)} and wv {tuple(wv.shape)} differ in shape")
    if ir1.dim() == 2:
        ir1, wv = ir1[None], wv[None]
    size = bundle.image_size
    if ir1.shape[-2:] != (size, size):
        raise ValueError(f"model expects {size}x{size} frames, got {tuple(ir1.shape[-2:])}")
    return torch.stack([ir1, wv], dim=1).float()


@torch.no_grad()
def predict_angles(bundle: ModelBundle, ir1, wv, aux, angles: Sequence[float]) -> torch.Tensor:
    """Intensity for each frame at each rotation angle, shape ``[B, len(angles)]``."""
    bundle.eval()
    x = _normalize(bundle, ir1, wv)
    aux = torch.as_tensor(np.asarray(aux), dtype=torch.float32)
    if aux.dim() == 1:
        aux = aux[None]
    b = x.shape[0]
    zeros = torch.zeros(b)
    cols = []
    for a in angles:
        xr = rotate_batch(x, float(a))
        ir1_r, wv_r = xr[:, 0], xr[:, 1]
        vis = N.generator_forward(bundle.gen_vis, ir1_r, wv_r, zeros)
        pmw = N.generator_forward(bundle.gen_pmw, ir1_r, wv_r)
        cols.append(N.regressor_forward(bundle.regressor, ir1_r, wv_r, vis, pmw, aux))
    return torch.stack(cols, dim=1)


def _reduce(values: torch.Tensor, reducer: str) -> torch.Tensor:
    if reducer == "mean":
        return values.double().mean(dim=1)
    if reducer == "median":
        return values.double().median(dim=1).values
    raise ValueError(f"unknown blend reducer {reducer!r}")


def estimate(bundle: ModelBundle, ir1, wv, meta: FrameMeta) -> EstimateRecord:
    v = predict_angles(bundle, ir1, wv, N.build_aux(meta), (0.0,))
    return EstimateRecord(meta.tc_id, meta.utc_time, float(v[0, 0]))


def estimate_blended(bundle: ModelBundle, ir1, wv, meta: FrameMeta, angles=BLEND_ANGLES,
                     reducer: str = "mean") -> EstimateRecord:
    angles = tuple(float(a) for a in angles)
    v = predict_angles(bundle, ir1, wv, N.build_aux(meta), angles)
    raw = float(v[0, angles.index(0.0)]) if 0.0 in angles else float(predict_angles(
        bundle, ir1, wv, N.build_aux(meta), (0.0,))[0, 0])
    return EstimateRecord(meta.tc_id, meta.utc_time, raw, float(_reduce(v, reducer)[0]), angles_used=angles)


def estimate_dataset(bundle: ModelBundle, ds: Dataset, blend: bool = True, smooth_window: int | None = 5,
                     reducer: str = "mean", batch_size: int = 64) -> list[EstimateRecord]:
    """Batched estimates for every frame of ``ds`` (reads only IR1, WV and metadata)."""
    angles = BLEND_ANGLES if blend else (0.0,)
    records = []
    for start in range(0, len(ds), batch_size):
        chunk = ds.frames[start:start + batch_size]
        ir1 = np.stack([fr.ir1 for fr in chunk])
        wv = np.stack([fr.wv for fr in chunk])
        aux = np.stack([N.build_aux(fr.meta) for fr in chunk])
        v = predict_angles(bundle, ir1, wv, aux, angles)
        blended = _reduce(v, reducer) if blend else None
        for k, fr in enumerate(chunk):
            records.append(EstimateRecord(
                fr.meta.tc_id, fr.meta.utc_time, float(v[k, 0]),
                float(blended[k]) if blend else None, angles_used=tuple(angles)))
    if smooth_window:
        records = smooth_series(records, smooth_window)
    return records


def smooth_series(records: Sequence[EstimateRecord], window: int = 5) -> list[EstimateRecord]:
    """Centered rolling mean per storm; the window shrinks at the series ends."""
    if window < 1 or window % 2 == 0:
        raise ValueError("smoothing window must be a positive odd number")
    groups: dict[str, list[int]] = {}
    for k, r in enumerate(records):
        groups.setdefault(r.tc_id, []).append(k)
    out = list(records)
    half = window // 2
    for tc_id, idx in groups.items():
        times = [records[k].utc_time for k in idx]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError(f"records of {tc_id} are not sorted by time")
        vals = np.array([records[k].vmax_blend if records[k].vmax_blend is not None else records[k].vmax_raw
                         for k in idx], dtype=np.float64)
        for j, k in enumerate(idx):
            lo, hi = max(0, j - half), min(len(idx), j + half + 1)
            out[k] = replace(records[k], vmax_smooth=float(vals[lo:hi].mean()))
    return out
