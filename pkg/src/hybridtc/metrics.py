"""RMSE, per-intensity-bin reports, and the estimate CSV format."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import FrameMeta, format_time, parse_time
from .inference import EstimateRecord

# Lower edges in knots; the last bin is open-ended.
INTENSITY_BINS = (0.0, 35.0, 64.0, 96.0)
ESTIMATE_HEADER = ["tc_id", "time", "vmax_raw", "vmax_blend", "vmax_smooth"]
ESTIMATE_CSV_VERSION = "# hybridtc estimates v1"


def rmse(estimates: Sequence[float], truths: Sequence[float]) -> float:
    est = np.asarray(estimates, dtype=np.float64).ravel()
    tru = np.asarray(truths, dtype=np.float64).ravel()
    if est.size != tru.size:
        raise ValueError(f"length mismatch: {est.size} estimates vs {tru.size} truths")
    if est.size == 0:
        raise ValueError("rmse of an empty list")
    return float(math.sqrt(np.mean((est - tru) ** 2)))


def bin_label(k: int) -> str:
    lo = INTENSITY_BINS[k]
    hi = INTENSITY_BINS[k + 1] if k + 1 < len(INTENSITY_BINS) else None
    return f"[{lo:g},{hi:g})" if hi is not None else f"[{lo:g},inf)"


def bin_index(vmax: float) -> int:
    return int(np.searchsorted(INTENSITY_BINS, vmax, side="right") - 1)


@dataclass
class EvalReport:
    split: str
    n_samples: int
    rmse_raw: float
    rmse_blend: float | None
    rmse_smooth: float | None
    per_bin: dict  # bin label -> {"n": int, "rmse": float | None}, on the best available estimate

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(records: Sequence[EstimateRecord], truths: Sequence[float], split: str = "unsplit") -> EvalReport:
    if len(records) != len(truths):
        raise ValueError(f"{len(records)} estimates but {len(truths)} truths")
    if not records:
        raise ValueError("nothing to evaluate")
    truths = np.asarray(truths, dtype=np.float64)

    def column(name):
        vals = [getattr(r, name) for r in records]
        return None if any(v is None for v in vals) else np.asarray(vals, dtype=np.float64)

    raw, blend, smooth = column("vmax_raw"), column("vmax_blend"), column("vmax_smooth")
    best = next(c for c in (smooth, blend, raw) if c is not None)
    bins = np.array([bin_index(v) for v in truths])
    per_bin = {}
    for k in range(len(INTENSITY_BINS)):
        sel = bins == k
        per_bin[bin_label(k)] = {"n": int(sel.sum()), "rmse": rmse(best[sel], truths[sel]) if sel.any() else None}
    return EvalReport(
        split=split,
        n_samples=len(records),
        rmse_raw=rmse(raw, truths),
        rmse_blend=rmse(blend, truths) if blend is not None else None,
        rmse_smooth=rmse(smooth, truths) if smooth is not None else None,
        per_bin=per_bin,
    )


def match_truths(records: Sequence[EstimateRecord], metas: Sequence[FrameMeta]) -> list[float]:
    """Best-track intensity for each record, joined on ``(tc_id, time)``."""
    lookup = {(m.tc_id, m.utc_time): m.vmax for m in metas}
    out = []
    for r in records:
        key = (r.tc_id, r.utc_time)
        if key not in lookup:
            raise KeyError(f"no truth for {r.tc_id} at {format_time(r.utc_time)}")
        out.append(lookup[key])
    return out


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_estimates_csv(path, records: Sequence[EstimateRecord]):
    with open(path, "w", newline="") as fh:
        fh.write(ESTIMATE_CSV_VERSION + "\n")
        w = csv.writer(fh)
        w.writerow(ESTIMATE_HEADER)
        for r in records:
            w.writerow([r.tc_id, format_time(r.utc_time), _fmt(r.vmax_raw), _fmt(r.vmax_blend), _fmt(r.vmax_smooth)])


def read_estimates_csv(path) -> list[EstimateRecord]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    if not lines or list(csv.reader(lines[:1]))[0] != ESTIMATE_HEADER:
        raise ValueError(f"{path}: expected header {','.join(ESTIMATE_HEADER)}")

    def opt(s):
        return float(s) if s != "" else None

    return [EstimateRecord(r["tc_id"], parse_time(r["time"]), float(r["vmax_raw"]),
                           opt(r["vmax_blend"]), opt(r["vmax_smooth"])) for r in rows]
