"""TCIR-format ingestion, synthetic cyclone scenes, and year-based splits.

A TCIR container is an HDF5 file holding one float32 dataset ``matrix`` of
shape ``[N, H, W, 4]`` (channels IR1, WV, VIS, PMW) plus a CSV sidecar with
header ``ID,time,lon,lat,vmax,region``. Synthetic datasets are written in the
same format, with their generating parameters stored in an extra ``synthetic``
group so oracle tests can read them back.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import h5py
import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

REGIONS = ("WPAC", "EPAC", "CPAC", "ATLN", "IO", "SH")
CHANNELS = ("ir1", "wv", "vis", "pmw")
SPLIT_TAGS = ("train", "valid", "test", "unsplit")

TRAIN_YEARS = range(2000, 2015)
VALID_YEARS = range(2015, 2017)
TEST_YEARS = range(2017, 2018)

META_HEADER = ["ID", "time", "lon", "lat", "vmax", "region"]


class DataFormatError(ValueError):
    """Raised when a container or its metadata sidecar is malformed."""


@dataclass(frozen=True)
class FrameMeta:
    tc_id: str
    utc_time: datetime
    lon: float
    lat: float
    region: str
    vmax: float

    def __post_init__(self):
        if self.region not in REGIONS:
            raise DataFormatError(f"unknown region code {self.region!r}")
        if not (math.isfinite(self.vmax) and self.vmax > 0):
            raise DataFormatError(f"vmax must be finite and positive, got {self.vmax}")


@dataclass(frozen=True, eq=False)
class TCFrame:
    meta: FrameMeta
    ir1: np.ndarray
    wv: np.ndarray
    vis: np.ndarray
    pmw: np.ndarray
    vis_present: bool = True
    pmw_present: bool = True

    def __post_init__(self):
        shape = self.ir1.shape
        for name in CHANNELS[1:]:
            if getattr(self, name).shape != shape:
                raise DataFormatError(f"channel {name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ir1.shape

    def stack(self) -> np.ndarray:
        """Channels as a ``[4, H, W]`` float32 array in IR1, WV, VIS, PMW order."""
        return np.stack([self.ir1, self.wv, self.vis, self.pmw]).astype(np.float32)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered, immutable collection of frames.

    ``truth`` carries per-frame arrays aligned with ``frames`` when the data
    was synthesized (vortex parameters, injected corruption, ...), and
    ``recipe`` the closed forms used to build them.
    """

    frames: tuple[TCFrame, ...]
    split_tag: str = "unsplit"
    truth: dict[str, np.ndarray] | None = None
    recipe: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")
        last: dict[str, datetime] = {}
        for fr in self.frames:
            prev = last.get(fr.meta.tc_id)
            if prev is not None and fr.meta.utc_time < prev:
                raise DataFormatError(f"frames of {fr.meta.tc_id} are not sorted by time")
            last[fr.meta.tc_id] = fr.meta.utc_time
        if self.truth is not None:
            for k, v in self.truth.items():
                if len(v) != len(self.frames):
                    raise ValueError(f"truth array {k!r} has length {len(v)}, expected {len(self.frames)}")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def subset(self, indices: Iterable[int], split_tag: str | None = None) -> "Dataset":
        idx = list(indices)
        truth = None
        if self.truth is not None:
            truth = {k: np.asarray(v)[idx] for k, v in self.truth.items()}
        return Dataset(
            frames=tuple(self.frames[i] for i in idx),
            split_tag=self.split_tag if split_tag is None else split_tag,
            truth=truth,
            recipe=self.recipe,
        )

    def stack(self) -> np.ndarray:
        if not self.frames:
            return np.zeros((0, 4, 0, 0), np.float32)
        return np.stack([fr.stack() for fr in self.frames])


# --------------------------------------------------------------------------
# time helpers


def parse_time(text: str) -> datetime:
    """Parse ``yyyymmddHHMM`` or hour-resolution ``yyyymmddHH``."""
    s = str(text).strip()
    try:
        if len(s) == 12:
            return datetime.strptime(s, "%Y%m%d%H%M")
        if len(s) == 10:
            return datetime.strptime(s, "%Y%m%d%H")
    except ValueError as exc:
        raise DataFormatError(f"unparseable time {text!r}") from exc
    raise DataFormatError(f"unparseable time {text!r}")


def format_time(t: datetime) -> str:
    return t.strftime("%Y%m%d%H%M")


def local_time(meta: FrameMeta) -> datetime:
    """Mean solar time at the frame longitude, rounded to the nearest minute."""
    minutes = round(meta.lon / 15.0 * 60.0)
    return meta.utc_time + timedelta(minutes=minutes)


def compute_m2n(local: datetime) -> float:
    """Minutes to local noon."""
    return float(abs(60 * local.hour + local.minute - 720))


def frame_m2n(meta: FrameMeta) -> float:
    return compute_m2n(local_time(meta))


# --------------------------------------------------------------------------
# TCIR container I/O


def _channel_present(a: np.ndarray) -> bool:
    if a.size == 0:
        return False
    finite = np.isfinite(a)
    if not finite.any():
        return False
    return bool(np.any(a[finite] != 0))


def _fill_nan(a: np.ndarray) -> np.ndarray:
    # median is affine-equivariant, so filling here matches filling after normalization
    a = np.array(a, dtype=np.float32, copy=True)
    bad = ~np.isfinite(a)
    if bad.all():
        return np.zeros_like(a)
    if bad.any():
        a[bad] = np.median(a[~bad])
    return a


def _read_meta(meta_path: Path) -> list[dict]:
    with open(meta_path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    missing = set(META_HEADER) - set(reader.fieldnames or [])
    if missing:
        raise DataFormatError(f"metadata table missing columns {sorted(missing)}")
    return list(reader)


def _meta_from_row(row: dict) -> FrameMeta:
    return FrameMeta(
        tc_id=row["ID"],
        utc_time=parse_time(row["time"]),
        lon=float(row["lon"]),
        lat=float(row["lat"]),
        region=row["region"].strip(),
        vmax=float(row["vmax"]),
    )


def read_meta_csv(path) -> list[FrameMeta]:
    return [_meta_from_row(r) for r in _read_meta(Path(path))]


def load_tcir(container_path, meta_path) -> Dataset:
    container_path, meta_path = Path(container_path), Path(meta_path)
    rows = _read_meta(meta_path)
    with h5py.File(container_path, "r") as fh:
        if "matrix" not in fh:
            raise DataFormatError(f"{container_path} has no 'matrix' dataset")
        matrix = fh["matrix"][...]
        truth, recipe = None, None
        if "synthetic" in fh:
            grp = fh["synthetic"]
            truth = {k: grp[k][...] for k in grp.keys()}
            recipe = json.loads(grp.attrs["recipe"])
    if matrix.ndim != 4 or matrix.shape[-1] != 4:
        raise DataFormatError(f"matrix must be [N, H, W, 4], got {matrix.shape}")
    if matrix.shape[0] != len(rows):
        raise DataFormatError(f"array has {matrix.shape[0]} frames but metadata has {len(rows)} rows")

    frames = []
    for k, row in enumerate(rows):
        meta = _meta_from_row(row)
        chans = [matrix[k, :, :, c] for c in range(4)]
        frames.append(
            TCFrame(
                meta=meta,
                ir1=_fill_nan(chans[0]),
                wv=_fill_nan(chans[1]),
                vis=_fill_nan(chans[2]),
                pmw=_fill_nan(chans[3]),
                vis_present=_channel_present(chans[2]),
                pmw_present=_channel_present(chans[3]),
            )
        )

    # group by storm (first appearance order), then time
    first_seen: dict[str, int] = {}
    for k, fr in enumerate(frames):
        first_seen.setdefault(fr.meta.tc_id, k)
    order = sorted(range(len(frames)), key=lambda k: (first_seen[frames[k].meta.tc_id], frames[k].meta.utc_time, k))
    if truth is not None:
        truth = {name: arr[order] for name, arr in truth.items()}
    return Dataset(frames=tuple(frames[k] for k in order), truth=truth, recipe=recipe)


def write_meta_csv(path, metas: Sequence[FrameMeta]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(META_HEADER)
        for m in metas:
            writer.writerow([m.tc_id, format_time(m.utc_time), repr(float(m.lon)), repr(float(m.lat)), repr(float(m.vmax)), m.region])


def write_tcir(ds: Dataset, container_path, meta_path):
    """Write ``ds`` as a TCIR container plus metadata sidecar.

    Absent channels are written as all-NaN so they load back as absent.
    """
    if len(ds):
        h, w = ds.frames[0].shape
        matrix = np.empty((len(ds), h, w, 4), np.float32)
        for k, fr in enumerate(ds.frames):
            matrix[k] = np.moveaxis(fr.stack(), 0, -1)
            if not fr.vis_present:
                matrix[k, :, :, 2] = np.nan
            if not fr.pmw_present:
                matrix[k, :, :, 3] = np.nan
    else:
        matrix = np.zeros((0, 0, 0, 4), np.float32)
    with h5py.File(container_path, "w") as fh:
        fh.create_dataset("matrix", data=matrix)
        if ds.truth is not None:
            grp = fh.create_group("synthetic")
            for k, v in ds.truth.items():
                grp.create_dataset(k, data=np.asarray(v))
            grp.attrs["recipe"] = json.dumps(ds.recipe or {}, sort_keys=True)
    write_meta_csv(meta_path, [fr.meta for fr in ds.frames])


def center_crop(ds: Dataset, size: int) -> Dataset:
    """Central ``size x size`` window of every frame.

    Full TCIR frames are 201 px across while the networks run at 64 px; the
    crop keeps the native pixel scale around the storm center. Frames that are
    already ``size`` wide pass through untouched.
    """
    frames = []
    for fr in ds.frames:
        h, w = fr.shape
        if h < size or w < size:
            raise DataFormatError(f"frame {h}x{w} is smaller than the {size}x{size} model input")
        if (h, w) == (size, size):
            frames.append(fr)
            continue
        r0, c0 = (h - size) // 2, (w - size) // 2
        cut = {c: np.ascontiguousarray(getattr(fr, c)[r0:r0 + size, c0:c0 + size]) for c in CHANNELS}
        frames.append(replace(fr, **cut))
    return Dataset(frames=frames, split_tag=ds.split_tag, truth=ds.truth, recipe=ds.recipe)


def split_by_year(ds: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    buckets: dict[str, list[int]] = {"train": [], "valid": [], "test": []}
    dropped = 0
    for k, fr in enumerate(ds.frames):
        year = fr.meta.utc_time.year
        if year in TRAIN_YEARS:
            buckets["train"].append(k)
        elif year in VALID_YEARS:
            buckets["valid"].append(k)
        elif year in TEST_YEARS:
            buckets["test"].append(k)
        else:
            dropped += 1
    if dropped:
        log.warning("split_by_year dropped %d frames outside 2000-2017", dropped)
    return tuple(ds.subset(buckets[tag], split_tag=tag) for tag in ("train", "valid", "test"))


# --------------------------------------------------------------------------
# synthetic scenes

REFERENCE_SIZE = 64
VMAX_A = 240.0  # kt * px
VMAX_B = 1.5  # kt / px
VIS_GAIN_LO, VIS_GAIN_HI, VIS_GAIN_SLOPE = 0.08, 0.95, 3.0
SUN_NOON_TO_EDGE = 0.3  # fractional dimming from noon to m2n=300
SUN_DUSK_MINUTES = 390.0
PMW_SMOOTH_SIGMA = 1.5  # px at reference size

REGION_BOXES = {
    "WPAC": ((120.0, 175.0), (8.0, 30.0)),
    "EPAC": ((-140.0, -95.0), (8.0, 25.0)),
    "CPAC": ((-178.0, -142.0), (8.0, 25.0)),
    "ATLN": ((-85.0, -25.0), (10.0, 35.0)),
    "IO": ((55.0, 95.0), (5.0, 22.0)),
    "SH": ((45.0, 175.0), (-30.0, -8.0)),
}


@dataclass
class NoiseConfig:
    gaussian: float = 0.02
    block: float = 0.1
    strip: float = 0.1


@dataclass
class SyntheticConfig:
    n_frames: int = 2000
    image_size: int = 64
    frames_per_storm: tuple[int, int] = (12, 28)
    eye_radius: tuple[float, float] = (3.0, 12.0)
    cloud_extent: tuple[float, float] = (12.0, 30.0)
    asymmetry: tuple[float, float] = (0.0, 0.4)
    texture: float = 0.08
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    pmw_rotation_offset: float = 20.0
    vis_missing: float = 0.0
    sun_noon_to_edge: float = SUN_NOON_TO_EDGE
    sun_dusk_minutes: float = SUN_DUSK_MINUTES
    years: tuple[int, int] = (2000, 2017)
    rng_seed: int = 0

    def validate(self):
        if self.image_size <= 0 or self.image_size % 64:
            raise ValueError(f"image_size must be a positive multiple of 64, got {self.image_size}")
        if self.n_frames < 0:
            raise ValueError("n_frames must be nonnegative")
        for name in ("gaussian", "block", "strip"):
            if getattr(self.noise, name) < 0:
                raise ValueError(f"noise.{name} must be nonnegative")
        if self.noise.block + self.noise.strip > 1:
            raise ValueError("noise.block + noise.strip must not exceed 1")


def sunlight(m2n, noon_to_edge: float = SUN_NOON_TO_EDGE, dusk: float = SUN_DUSK_MINUTES):
    """Relative solar illumination: linear dimming over the QC window, fading to 0 at ``dusk``."""
    m = np.asarray(m2n, dtype=np.float64)
    edge = 1.0 - noon_to_edge
    day = 1.0 - noon_to_edge * m / 300.0
    dusk_part = edge * np.clip((dusk - m) / (dusk - 300.0), 0.0, 1.0)
    return np.where(m <= 300.0, day, dusk_part)


def vis_gain(ir1):
    """Fixed monotone (decreasing) map from IR1 to cloud reflectance."""
    return VIS_GAIN_LO + (VIS_GAIN_HI - VIS_GAIN_LO) / (1.0 + np.exp(VIS_GAIN_SLOPE * np.asarray(ir1)))


def synthetic_vmax(eye_radius, cloud_extent):
    return VMAX_A / np.asarray(eye_radius) + VMAX_B * np.asarray(cloud_extent)


def pmw_from_channels(ir1, wv, offset_deg: float, sigma: float):
    rain = ndimage.gaussian_filter(np.maximum(wv - ir1, 0.0), sigma=sigma, mode="constant")
    if offset_deg:
        rain = ndimage.rotate(rain, offset_deg, reshape=False, order=1, mode="constant", cval=0.0)
        rain = np.maximum(rain, 0.0)
    return rain


def _texture(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=1.0 * scale, mode="wrap")
    return t / (t.std() + 1e-12)


def _cloud_field(n, eye_r, extent, asym, asym_phase, spiral_phase, rng, scale, background=1.0):
    c0 = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    dx, dy = xx - c0, yy - c0
    r = np.hypot(dx, dy) / scale
    theta = np.arctan2(dy, dx)
    envelope = 1.0 / (1.0 + np.exp((r - extent) / 2.0))
    eye = 1.0 - np.exp(-((r / eye_r) ** 4))
    eyewall = np.exp(-(((r - 1.6 * eye_r) / (0.8 * eye_r + 1.0)) ** 2))
    spiral = 0.5 + 0.5 * np.cos(2.0 * (theta - 0.9 * np.log1p(r)) + spiral_phase)
    lopsided = 1.0 + asym * np.cos(theta - asym_phase)
    c = envelope * eye * (0.45 + 0.55 * np.maximum(eyewall, 0.6 * spiral)) * lopsided
    cells = np.maximum(ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=3.0 * scale, mode="wrap"), 0.0)
    cells = cells / (cells.max() + 1e-12)
    c = np.maximum(c, background * cells * (1.0 - envelope))
    c = c + 0.06 * _texture(rng, n, scale)
    return np.clip(c, 0.0, 1.2)


def _corrupt_vis(vis, kind, rng):
    n = vis.shape[0]
    out = vis.copy()
    if kind == 1:  # black block covering >= 90% of the frame
        keep = int(rng.integers(0, max(1, n // 10)))
        if rng.random() < 0.5:
            out[keep:, :] = 0.0
        else:
            out[:, keep:] = 0.0
    elif kind == 2:  # saturated strips covering 3/4 of rows
        rows = np.arange(n)
        period = int(rng.integers(4, 9))
        phase = int(rng.integers(0, period))
        mask = ((rows + phase) % period) < math.ceil(0.75 * period)
        out[mask, :] = 1.0
    return out


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Build a desk-scale cyclone dataset with known channel relations.

    Per frame: ``pmw = rotate(gaussian_smooth(relu(wv - ir1)), offset)``,
    ``vis = clip(vis_gain(ir1) * sunlight(m2n) + noise, 0, 1)`` and
    ``vmax = A / eye_radius + B * cloud_extent``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    n = cfg.image_size
    scale = n / REFERENCE_SIZE
    sigma = PMW_SMOOTH_SIGMA * scale

    frames: list[TCFrame] = []
    truth: dict[str, list] = {k: [] for k in (
        "eye_radius", "cloud_extent", "asymmetry", "asym_phase", "spiral_phase",
        "m2n", "sun", "corruption", "daytime", "qc_expected_good",
    )}
    storm = 0
    lo_year, hi_year = cfg.years
    while len(frames) < cfg.n_frames:
        n_storm = int(rng.integers(cfg.frames_per_storm[0], cfg.frames_per_storm[1] + 1))
        n_storm = min(n_storm, cfg.n_frames - len(frames))
        year = int(rng.integers(lo_year, hi_year + 1))
        region = REGIONS[int(rng.integers(len(REGIONS)))]
        (lon0, lon1), (lat0, lat1) = REGION_BOXES[region]
        lon = float(rng.uniform(lon0, lon1))
        lat = float(rng.uniform(lat0, lat1))
        start = datetime(year, 1, 1) + timedelta(minutes=int(rng.integers(0, 360 * 24 * 60)))
        peak = float(rng.uniform(0.3, 1.0))
        spread = float(rng.uniform(0.0, 1.0))
        tc_id = f"{year}{region}{storm:04d}"
        storm += 1
        t = start
        for k in range(n_storm):
            phase = (k + 0.5) / n_storm
            s = peak * math.sin(math.pi * phase) ** 1.2
            eye_r = float(np.clip(cfg.eye_radius[1] - (cfg.eye_radius[1] - cfg.eye_radius[0]) * s
                                  + rng.normal(0, 0.4), *cfg.eye_radius))
            ext_lo, ext_hi = cfg.cloud_extent
            extent = float(np.clip(ext_lo + (ext_hi - ext_lo) * (0.6 * s + 0.4 * spread)
                                   + rng.normal(0, 1.0), ext_lo, ext_hi))
            asym = float(rng.uniform(*cfg.asymmetry))
            asym_phase = float(rng.uniform(0, 2 * math.pi))
            spiral_phase = float(rng.uniform(0, 2 * math.pi))

            c = _cloud_field(n, eye_r, extent, asym, asym_phase, spiral_phase, rng, scale)
            ir1 = 1.0 - 2.0 * c + cfg.texture * _texture(rng, n, scale)
            wv = 0.3 - 1.0 * c + cfg.texture * _texture(rng, n, scale)
            pmw = pmw_from_channels(ir1, wv, cfg.pmw_rotation_offset, sigma)

            lon_k = float(np.clip(lon + 0.3 * k * (1 if lon < 179 else 0), -180.0, 180.0))
            lat_k = lat + 0.15 * k * np.sign(lat)
            meta = FrameMeta(
                tc_id=tc_id,
                utc_time=t,
                lon=round(lon_k, 4),
                lat=round(float(lat_k), 4),
                region=region,
                vmax=float(synthetic_vmax(eye_r, extent)),
            )
            m2n = frame_m2n(meta)
            sun = float(sunlight(m2n, cfg.sun_noon_to_edge, cfg.sun_dusk_minutes))
            vis = vis_gain(ir1) * sun
            if cfg.noise.gaussian:
                vis = vis + rng.normal(0.0, cfg.noise.gaussian, vis.shape)
            u = rng.random()
            corruption = 1 if u < cfg.noise.block else (2 if u < cfg.noise.block + cfg.noise.strip else 0)
            vis = np.clip(_corrupt_vis(vis, corruption, rng), 0.0, 1.0)
            vis_present = not (rng.random() < cfg.vis_missing)
            if not vis_present:
                vis = np.zeros_like(vis)
            hour = local_time(meta).hour
            daytime = 7 <= hour <= 16

            frames.append(TCFrame(
                meta=meta,
                ir1=ir1.astype(np.float32),
                wv=wv.astype(np.float32),
                vis=vis.astype(np.float32),
                pmw=pmw.astype(np.float32),
                vis_present=vis_present,
                pmw_present=True,
            ))
            for key, val in (("eye_radius", eye_r), ("cloud_extent", extent), ("asymmetry", asym),
                             ("asym_phase", asym_phase), ("spiral_phase", spiral_phase), ("m2n", m2n),
                             ("sun", sun), ("corruption", corruption), ("daytime", daytime),
                             ("qc_expected_good", daytime and corruption == 0 and vis_present)):
                truth[key].append(val)
            t = t + timedelta(hours=3, minutes=int(rng.integers(-20, 21)))

    recipe = {
        "vmax": "A / eye_radius + B * cloud_extent",
        "A": VMAX_A,
        "B": VMAX_B,
        "pmw": "rotate(gaussian_filter(relu(wv - ir1), sigma), pmw_rotation_offset)",
        "pmw_sigma": sigma,
        "pmw_rotation_offset": cfg.pmw_rotation_offset,
        "vis": "clip(vis_gain(ir1) * sunlight(m2n) + noise, 0, 1)",
        "vis_gain": [VIS_GAIN_LO, VIS_GAIN_HI, VIS_GAIN_SLOPE],
        "sunlight": [cfg.sun_noon_to_edge, cfg.sun_dusk_minutes],
        "noise": {"gaussian": cfg.noise.gaussian, "block": cfg.noise.block, "strip": cfg.noise.strip},
        "image_size": n,
        "rng_seed": cfg.rng_seed,
    }
    truth_arr = {k: np.asarray(v) for k, v in truth.items()}
    return Dataset(frames=tuple(frames), truth=truth_arr, recipe=recipe)


def with_channels(frame: TCFrame, **channels) -> TCFrame:
    return replace(frame, **channels)
