"""Learning-curve and generation-grid figures.

Every figure is written as a PNG together with a CSV sidecar holding the
plotted numbers, so figures can be regenerated and diffed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CURVE_CSV_VERSION = "# hybridtc learning-curves v1"
GRID_CSV_VERSION = "# hybridtc generation-grid v1"


class MalformedLogError(ValueError):
    pass


@dataclass
class PlotOutput:
    png: Path
    sidecar: Path
    labels: list[str] = field(default_factory=list)


def read_curve(log) -> list[float]:
    """Validation MSE per epoch from an ``epochs.csv`` log (or a plain sequence).

    The operational column is preferred where a row carries it, so a staged
    run is traced along the path actually used at inference.
    """
    if not isinstance(log, (str, Path)):
        vals = [float(v) for v in log]
        if not vals or not all(math.isfinite(v) for v in vals):
            raise MalformedLogError("curve must be a nonempty sequence of finite numbers")
        return vals
    lines = [ln for ln in Path(log).read_text().splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    if not rows or "val_mse" not in rows[0]:
        raise MalformedLogError(f"{log}: not an epoch log (no val_mse column)")
    out = []
    for r in rows:
        v = r.get("val_mse_op") or r.get("val_mse")
        if v:
            try:
                out.append(float(v))
            except ValueError as exc:
                raise MalformedLogError(f"{log}: bad value {v!r}") from exc
    if not out:
        raise MalformedLogError(f"{log}: no validation values")
    return out


def _sidecar(png: Path) -> Path:
    return png.with_suffix(".csv")


def learning_curve_plot(logs: Mapping[str, object], out_path, epochs: int | None = None) -> PlotOutput:
    """Validation MSE against epoch for each labelled log, on one axis."""
    if not logs:
        raise MalformedLogError("need at least one training log")
    curves = {label: read_curve(log)[:epochs] if epochs else read_curve(log) for label, log in logs.items()}
    png = Path(out_path)
    png.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in curves.items():
        ax.plot(range(1, len(ys) + 1), ys, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation MSE (kt$^2$)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    with open(_sidecar(png), "w", newline="") as fh:
        fh.write(CURVE_CSV_VERSION + "\n")
        w = csv.writer(fh)
        w.writerow(["label", "epoch", "val_mse"])
        for label, ys in curves.items():
            for k, y in enumerate(ys, 1):
                w.writerow([label, k, repr(float(y))])
    return PlotOutput(png, _sidecar(png), list(curves))


def grid_mosaic(real: np.ndarray, generated: np.ndarray, ncols: int | None = None, pad: int = 2) -> np.ndarray:
    """Tile ``[N, 2, H, W]`` (VIS, PMW) pairs into 2x2 blocks, row-major.

    Inside a block: real VIS upper left, generated VIS upper right, real PMW
    lower left, generated PMW lower right. Padding is NaN.
    """
    real, generated = np.asarray(real, dtype=np.float64), np.asarray(generated, dtype=np.float64)
    if real.ndim != 4 or real.shape[1] != 2:
        raise ValueError("expected frames shaped [N, 2, H, W] (VIS, PMW)")
    if real.shape != generated.shape:
        raise ValueError(f"pairing mismatch: {real.shape} real vs {generated.shape} generated")
    n, _, h, w = real.shape
    if n == 0:
        raise ValueError("no frames to plot")
    ncols = ncols or math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    bh, bw = 2 * h + pad, 2 * w + pad
    out = np.full((nrows * bh - pad, ncols * bw - pad), np.nan)
    for k in range(n):
        r0, c0 = (k // ncols) * bh, (k % ncols) * bw
        out[r0:r0 + h, c0:c0 + w] = real[k, 0]
        out[r0:r0 + h, c0 + w:c0 + 2 * w] = generated[k, 0]
        out[r0 + h:r0 + 2 * h, c0:c0 + w] = real[k, 1]
        out[r0 + h:r0 + 2 * h, c0 + w:c0 + 2 * w] = generated[k, 1]
    return out


def generation_grid_plot(real: np.ndarray, generated: np.ndarray, out_path, names: Sequence[str] | None = None,
                         ncols: int | None = None) -> PlotOutput:
    mosaic = grid_mosaic(real, generated, ncols)
    n = len(real)
    names = list(names) if names is not None else [str(k) for k in range(n)]
    if len(names) != n:
        raise ValueError("one name per frame required")
    ncols = ncols or math.ceil(math.sqrt(n))
    png = Path(out_path)
    png.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(2 * ncols + 1, 2 * math.ceil(n / ncols) + 1))
    # VIS and PMW live on different scales; stretch each half-row of blocks separately
    h = np.asarray(real).shape[-2]
    shown = mosaic.copy()
    for r0 in range(0, mosaic.shape[0], 2 * h + 2):
        for part in (slice(r0, r0 + h), slice(r0 + h, r0 + 2 * h)):
            band = shown[part]
            lo, hi = np.nanmin(band), np.nanmax(band)
            shown[part] = (band - lo) / (hi - lo) if hi > lo else band * 0
    ax.imshow(np.ma.masked_invalid(shown), cmap="gray", vmin=0, vmax=1)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    real, generated = np.asarray(real, dtype=np.float64), np.asarray(generated, dtype=np.float64)
    with open(_sidecar(png), "w", newline="") as fh:
        fh.write(GRID_CSV_VERSION + "\n")
        w = csv.writer(fh)
        w.writerow(["block", "name", "row", "col", "vis_mean", "vis_gen_mean", "pmw_mean", "pmw_gen_mean"])
        for k in range(n):
            means = (real[k, 0].mean(), generated[k, 0].mean(), real[k, 1].mean(), generated[k, 1].mean())
            w.writerow([k, names[k], k // ncols, k % ncols, *(repr(float(m)) for m in means)])
    return PlotOutput(png, _sidecar(png), names)
