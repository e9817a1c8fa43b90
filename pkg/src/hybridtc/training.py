"""Three- and five-stage training of the generators, discriminators and regressor.

A training run is a list of :class:`StageConfig` rows executed in order by a
single :class:`Trainer`. Each stage names the networks it may update; every
other network is put in eval mode and never touched by an optimizer, so its
serialized parameters come out of the stage bit-identical.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import nets as N
from .augment import rotate_batch
from .dataset import Dataset, frame_m2n
from .losses import (
    PMW_WEIGHTS,
    VIS_WEIGHTS,
    LossParts,
    LossReport,
    LossWeights,
    loss_disc,
    loss_gen_adv,
    loss_l2,
    loss_m2n_d,
    loss_m2n_g,
    composite_losses,
    loss_regr,
    make_report,
)
from .qc import QCThresholds, qc_mask

log = logging.getLogger(__name__)

STATE_FORMAT = "hybridtc-trainstate"
STATE_VERSION = 1
FIVE_STAGE_EPOCHS = (70, 500, 100, 200, 300)
THREE_STAGE_EPOCHS = (70, 500, 300)
REGRESSOR_INPUTS = ("ir1", "wv", "vis", "pmw")


class TrainingError(RuntimeError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    name: str
    kind: str  # "regressor" | "generator"
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]
    data_filter: str = "all"  # all | good_vis_only
    vis_source_for_lregr: str = "real"
    pmw_source_for_lregr: str = "real"
    targets: tuple[str, ...] = ()
    weights: dict[str, LossWeights] = field(default_factory=dict)
    max_epochs: int = 1
    regressor_inputs: tuple[str, ...] = REGRESSOR_INPUTS

    def __post_init__(self):
        if set(self.trainable) & set(self.frozen):
            raise ValueError(f"stage {self.stage_id}: networks both trainable and frozen")
        if self.kind not in ("regressor", "generator"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.data_filter not in ("all", "good_vis_only"):
            raise ValueError(f"unknown data filter {self.data_filter!r}")
        for src in (self.vis_source_for_lregr, self.pmw_source_for_lregr):
            if src not in ("real", "generated"):
                raise ValueError(f"unknown channel source {src!r}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {k: asdict(v) for k, v in self.weights.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        d["weights"] = {k: LossWeights(**v) for k, v in d.get("weights", {}).items()}
        for key in ("trainable", "frozen", "targets", "regressor_inputs"):
            d[key] = tuple(d[key])
        return cls(**d)


def _frozen(trainable, universe=N.NETWORK_NAMES):
    return tuple(n for n in universe if n not in trainable)


def five_stage_schedule(epochs=FIVE_STAGE_EPOCHS, vis_weights: LossWeights = VIS_WEIGHTS,
                        pmw_weights: LossWeights = PMW_WEIGHTS) -> list[StageConfig]:
    """Loop 1 on good-VIS frames (regressor, VIS GAN), loop 2 on all frames (regressor, PMW GAN), fine-tune."""
    if len(epochs) != 5:
        raise ValueError("five-stage schedule needs five epoch counts")
    e1, e2, e3, e4, e5 = (int(e) for e in epochs)
    return [
        StageConfig(1, "pretrain_R", "regressor", ("regressor",), _frozen(("regressor",)),
                    "good_vis_only", "real", "real", max_epochs=e1),
        StageConfig(2, "gen_vis", "generator", ("gen_vis", "disc_vis"), _frozen(("gen_vis", "disc_vis")),
                    "good_vis_only", "generated", "real", ("vis",), {"vis": vis_weights}, e2),
        StageConfig(3, "pretrain_R", "regressor", ("regressor",), _frozen(("regressor",)),
                    "all", "generated", "real", max_epochs=e3),
        StageConfig(4, "gen_pmw", "generator", ("gen_pmw", "disc_pmw"), _frozen(("gen_pmw", "disc_pmw")),
                    "all", "generated", "generated", ("pmw",), {"pmw": pmw_weights}, e4),
        StageConfig(5, "finetune_R", "regressor", ("regressor",), _frozen(("regressor",)),
                    "all", "generated", "generated", max_epochs=e5),
    ]


def three_stage_schedule(epochs=THREE_STAGE_EPOCHS, vis_weights: LossWeights = VIS_WEIGHTS,
                         pmw_weights: LossWeights = PMW_WEIGHTS) -> list[StageConfig]:
    if len(epochs) != 3:
        raise ValueError("three-stage schedule needs three epoch counts")
    e1, e2, e3 = (int(e) for e in epochs)
    gans = ("gen_vis", "gen_pmw", "disc_vis", "disc_pmw")
    return [
        StageConfig(1, "pretrain_R", "regressor", ("regressor",), _frozen(("regressor",)),
                    "all", "real", "real", max_epochs=e1),
        StageConfig(2, "gen_both", "generator", gans, _frozen(gans), "all", "generated", "generated",
                    ("vis", "pmw"), {"vis": vis_weights, "pmw": pmw_weights}, e2),
        StageConfig(3, "finetune_R", "regressor", ("regressor",), _frozen(("regressor",)),
                    "all", "generated", "generated", max_epochs=e3),
    ]


def regressor_only_schedule(epochs: int, inputs=("ir1", "wv")) -> list[StageConfig]:
    """Single-stage direct regressor (no GAN), for channel-combination baselines."""
    return [StageConfig(1, "direct_R", "regressor", ("regressor",), (), "all", "real", "real",
                        max_epochs=int(epochs), regressor_inputs=tuple(inputs))]


def format_schedule(schedule: list[StageConfig]) -> str:
    lines = []
    for s in schedule:
        w = ", ".join(f"{t}: alpha={v.alpha:g} beta={v.beta:g} gamma={v.gamma:g}" for t, v in s.weights.items())
        lines.append(
            f"stage {s.stage_id} {s.name:<11} epochs={s.max_epochs:<4} data={s.data_filter:<13} "
            f"train={'+'.join(s.trainable)} regr_inputs(vis={s.vis_source_for_lregr}, pmw={s.pmw_source_for_lregr})"
            + (f" weights[{w}]" if w else ""))
    return "\n".join(lines)


@dataclass
class TrainConfig:
    image_size: int = 64
    batch_size: int = 32
    lr: float = 2e-4
    lr_regressor: float | None = None
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    rotate: bool = True
    adversarial: str = "standard"
    recon: str = "l2"
    m2n_raw: bool = False
    patience: int | None = None
    restore_best: bool = False
    reinit_discriminators: bool = False
    width: float = 1.0
    # "cosine" anneals each stage's learning rate towards zero over its max epochs
    lr_schedule: str = "constant"
    # weight of each new batch in the batch-norm running averages (torch default 0.1)
    bn_momentum: float = 0.1
    qc: QCThresholds = field(default_factory=QCThresholds)

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, not {self.lr_schedule!r}")
        if not 0 < self.bn_momentum <= 1:
            raise ValueError("bn_momentum must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if isinstance(d.get("qc"), dict):
            d["qc"] = QCThresholds(**{k: tuple(v) for k, v in d["qc"].items()})
        return cls(**d)


def _bn_warmup(momentum: float, bn: nn.Module, _inputs):
    """Running statistics are a plain mean over the first 1/momentum batches, then an exponential average.

    A fresh network's running mean and variance start at 0 and 1; with a small
    momentum they would drag that guess along for hundreds of batches.
    """
    bn.momentum = max(momentum, 1.0 / (int(bn.num_batches_tracked) + 1))


# --------------------------------------------------------------------------
# tensorized data


@dataclass
class TensorData:
    x: torch.Tensor  # [N, 4, H, W]
    vmax: torch.Tensor
    m2n: torch.Tensor
    aux: torch.Tensor
    good: torch.Tensor  # QC verdict good
    vis_ok: torch.Tensor  # VIS channel present

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def from_dataset(cls, ds: Dataset, qc: QCThresholds = QCThresholds()) -> "TensorData":
        n = len(ds)
        if n == 0:
            raise TrainingError("empty dataset")
        return cls(
            x=torch.from_numpy(ds.stack()),
            vmax=torch.tensor([fr.meta.vmax for fr in ds.frames], dtype=torch.float32),
            m2n=torch.tensor([frame_m2n(fr.meta) for fr in ds.frames], dtype=torch.float32),
            aux=torch.from_numpy(np.stack([N.build_aux(fr.meta) for fr in ds.frames])),
            good=torch.from_numpy(qc_mask(ds, qc)),
            vis_ok=torch.tensor([fr.vis_present for fr in ds.frames]),
        )

    def to(self, dtype) -> "TensorData":
        return replace(self, x=self.x.to(dtype), vmax=self.vmax.to(dtype), m2n=self.m2n.to(dtype), aux=self.aux.to(dtype))


def make_batches(indices: torch.Tensor, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    """Shuffle and chunk; a trailing singleton batch is merged (batch norm needs two samples)."""
    if indices.numel() < 2:
        raise TrainingError("a stage needs at least two frames to form a batch")
    perm = indices[torch.randperm(indices.numel(), generator=gen)]
    batches = list(torch.split(perm, batch_size))
    if len(batches) > 1 and batches[-1].numel() < 2:
        tail = batches.pop()
        batches[-1] = torch.cat([batches[-1], tail])
    return batches


# --------------------------------------------------------------------------
# trainer


def default_specs(width: float = 1.0, regressor_inputs=REGRESSOR_INPUTS) -> dict[str, N.NetworkSpec]:
    specs = {name: N.default_spec(name, width) for name in N.NETWORK_NAMES}
    specs["regressor"] = N.regressor_spec(len(regressor_inputs), width)
    return specs


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    config: dict
    schedule: list[dict]
    stage_index: int
    epoch_in_stage: int
    step: int
    nets: dict[str, dict]
    optims: dict[str, dict]
    rng: torch.Tensor
    torch_rng: torch.Tensor
    history: list[dict]
    best: dict

    def to_payload(self) -> dict:
        d = asdict(self)
        d["format"] = STATE_FORMAT
        d["version"] = STATE_VERSION
        return d


def _canonical(obj):
    """Rebuild containers and intern strings so equal payloads pickle to equal bytes."""
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    if isinstance(obj, str):
        return sys.intern(obj)
    return obj


def checkpoint(state: TrainState, path):
    buf = io.BytesIO()
    torch.save(_canonical(state.to_payload()), buf)
    Path(path).write_bytes(buf.getvalue())


def resume(path, specs: dict[str, N.NetworkSpec] | None = None, image_size: int | None = None) -> TrainState:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != STATE_FORMAT or payload.get("version") != STATE_VERSION:
        raise CheckpointMismatchError("unsupported training-state format/version")
    payload.pop("format")
    payload.pop("version")
    state = TrainState(**payload)
    size = image_size or state.config["image_size"]
    for name, net_payload in state.nets.items():
        stored = N.NetworkSpec.from_json(net_payload["spec"])
        want = N.spec_hash(specs[name] if specs and name in specs else stored, size)
        if want != net_payload["spec_hash"]:
            raise CheckpointMismatchError(
                f"spec-hash mismatch for {name}: checkpoint image size {net_payload['image_size']}, run uses {size}")
    return state


class Trainer:
    """Runs a stage schedule over fixed train/valid tensors.

    ``probe``, when given, is called once per batch with a dict describing
    what the step consumed (frame indices, real PMW, the PMW fed to the
    regressor, ...); it is how the routing contracts are checked.
    """

    def __init__(self, train: TensorData, valid: TensorData | None, schedule: list[StageConfig],
                 cfg: TrainConfig, specs: dict[str, N.NetworkSpec] | None = None,
                 log_dir=None, probe: Callable[[dict], None] | None = None):
        self.train, self.valid = train, valid
        self.schedule = list(schedule)
        self.cfg = cfg
        names = sorted({n for s in self.schedule for n in s.trainable + s.frozen}) or ["regressor"]
        reg_inputs = self.schedule[0].regressor_inputs if self.schedule else REGRESSOR_INPUTS
        all_specs = default_specs(cfg.width, reg_inputs)
        if specs:
            all_specs.update(specs)
        self.specs = {n: all_specs[n] for n in names}
        self.probe = probe
        self.log_dir = Path(log_dir) if log_dir else None
        self.gen = torch.Generator().manual_seed(cfg.seed)
        # dropout draws from torch's global stream; keep a private copy of it per trainer
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.torch_rng = torch.get_rng_state()
        self.nets = {n: self._build(n, cfg.seed + k)
                     for k, n in enumerate(N.NETWORK_NAMES) if n in self.specs}
        if "regressor" in self.nets:
            v = train.vmax.double()
            self.nets["regressor"].set_target_stats(float(v.mean()), float(v.std()) if len(v) > 1 else 1.0)
        self.optims = {n: self._make_optim(n) for n in self.nets}
        self.stage_index = 0
        self.epoch_in_stage = 0
        self.step = 0
        self.history: list[dict] = []
        self.best: dict = {}
        self.consumed: dict[int, set[int]] = {}

    def _build(self, name, seed):
        net = N.build_network(self.specs[name], self.cfg.image_size, seed)
        for m in net.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.register_forward_pre_hook(partial(_bn_warmup, self.cfg.bn_momentum))
        return net

    def _base_lr(self, name):
        return self.cfg.lr_regressor if (name == "regressor" and self.cfg.lr_regressor) else self.cfg.lr

    def _make_optim(self, name):
        return torch.optim.Adam(self.nets[name].parameters(), lr=self._base_lr(name), betas=tuple(self.cfg.betas))

    def _set_lr(self, stage: StageConfig):
        """Learning rate for the coming epoch; a function of the epoch counter only, so resume needs no extra state."""
        factor = 1.0
        if self.cfg.lr_schedule == "cosine":
            factor = 0.5 * (1 + math.cos(math.pi * self.epoch_in_stage / stage.max_epochs))
        for n in stage.trainable:
            for group in self.optims[n].param_groups:
                group["lr"] = self._base_lr(n) * factor

    # -- state ------------------------------------------------------------

    def state(self) -> TrainState:
        return TrainState(
            config=self.cfg.to_dict() | {"qc": {k: list(v) for k, v in asdict(self.cfg.qc).items()}},
            schedule=[s.to_dict() for s in self.schedule],
            stage_index=self.stage_index,
            epoch_in_stage=self.epoch_in_stage,
            step=self.step,
            nets={n: N.network_payload(net, stage=self._stage_tag()) for n, net in self.nets.items()},
            optims={n: copy.deepcopy(o.state_dict()) for n, o in self.optims.items()},
            rng=self.gen.get_state(),
            torch_rng=self.torch_rng.clone(),
            history=copy.deepcopy(self.history),
            best=copy.deepcopy(self.best),
        )

    @classmethod
    def from_state(cls, state: TrainState, train: TensorData, valid: TensorData | None,
                   log_dir=None, probe=None) -> "Trainer":
        cfg = TrainConfig.from_dict(state.config)
        schedule = [StageConfig.from_dict(s) for s in state.schedule]
        specs = {n: N.NetworkSpec.from_json(p["spec"]) for n, p in state.nets.items()}
        self = cls(train, valid, schedule, cfg, specs=specs, log_dir=log_dir, probe=probe)
        for n, p in state.nets.items():
            self.nets[n].load_state_dict(p["state"])
        for n, o in state.optims.items():
            self.optims[n].load_state_dict(o)
        self.gen.set_state(state.rng)
        self.torch_rng = state.torch_rng.clone()
        self.stage_index, self.epoch_in_stage, self.step = state.stage_index, state.epoch_in_stage, state.step
        self.history = copy.deepcopy(state.history)
        self.best = copy.deepcopy(state.best)
        return self

    def _stage_tag(self) -> str:
        if self.stage_index < len(self.schedule):
            s = self.schedule[self.stage_index]
            return f"stage{s.stage_id}:{s.name}:epoch{self.epoch_in_stage}"
        return "done"

    # -- helpers ----------------------------------------------------------

    def _indices(self, stage: StageConfig, data: TensorData) -> torch.Tensor:
        if stage.data_filter == "good_vis_only":
            idx = torch.nonzero(data.good).flatten()
            if idx.numel() == 0:
                raise TrainingError("no frame passes VIS quality control; loop 1 cannot run")
            return idx
        return torch.arange(len(data))

    def _set_modes(self, stage: StageConfig):
        for n, net in self.nets.items():
            train = n in stage.trainable
            N.set_trainable(net, train)
            net.train(train)

    def _gen_vis(self, ir1, wv, m2n):
        return N.generator_forward(self.nets["gen_vis"], ir1, wv, m2n)

    def _regressor_input(self, stage, chans, vis_gen, pmw_gen):
        src = {"ir1": chans["ir1"], "wv": chans["wv"],
               "vis": chans["vis"] if stage.vis_source_for_lregr == "real" else vis_gen,
               "pmw": chans["pmw"] if stage.pmw_source_for_lregr == "real" else pmw_gen}
        return [src[c] for c in stage.regressor_inputs]

    def _frozen_generated(self, stage, name, ir1, wv):
        """Output of a generator this stage does not train, or None if not needed."""
        channel = name.split("_")[1]
        if channel not in stage.regressor_inputs:
            return None
        source = stage.vis_source_for_lregr if channel == "vis" else stage.pmw_source_for_lregr
        if source != "generated" or name in stage.trainable:
            return None
        with torch.no_grad():
            if name == "gen_vis":
                return self._gen_vis(ir1, wv, torch.zeros(ir1.shape[0], dtype=ir1.dtype))
            return N.generator_forward(self.nets["gen_pmw"], ir1, wv)

    def _batch(self, data: TensorData, idx: torch.Tensor):
        x = data.x[idx]
        if self.cfg.rotate:
            angles = torch.rand(idx.numel(), generator=self.gen, dtype=torch.float64) * 360.0
            x = rotate_batch(x, angles)
        chans = {"ir1": x[:, 0], "wv": x[:, 1], "vis": x[:, 2], "pmw": x[:, 3]}
        return chans, data.vmax[idx], data.m2n[idx], data.aux[idx], data.vis_ok[idx]

    # -- steps ------------------------------------------------------------

    def regressor_step(self, stage: StageConfig, data: TensorData, idx: torch.Tensor) -> LossReport:
        chans, vmax, _, aux, _ = self._batch(data, idx)
        vis_gen = self._frozen_generated(stage, "gen_vis", chans["ir1"], chans["wv"])
        pmw_gen = self._frozen_generated(stage, "gen_pmw", chans["ir1"], chans["wv"])
        inputs = self._regressor_input(stage, chans, vis_gen, pmw_gen)
        self._probe(stage, idx, chans, inputs, pmw_gen)
        reg = self.nets["regressor"]
        opt = self.optims["regressor"]
        opt.zero_grad(set_to_none=True)
        l_regr = loss_regr(vmax, reg(torch.stack(inputs, dim=1), aux))
        l_regr.backward()
        opt.step()
        v = float(l_regr.detach())
        return LossReport(l_regr=v, composite_R=v)

    def generator_step(self, stage: StageConfig, data: TensorData, idx: torch.Tensor) -> LossReport:
        cfg = self.cfg
        chans, vmax, m2n_true, aux, vis_ok = self._batch(data, idx)
        ir1, wv = chans["ir1"], chans["wv"]
        b = ir1.shape[0]
        fakes, recon, m2n_req = {}, {}, None
        vis_gen = pmw_gen = None

        for t in stage.targets:
            if t == "vis":
                m2n_req = torch.rand(b, generator=self.gen, dtype=torch.float64).to(ir1.dtype) * 300.0
                fakes["vis"] = self._gen_vis(ir1, wv, m2n_req)
                recon["vis"] = self._gen_vis(ir1, wv, m2n_true.clamp(0.0, 300.0))
                vis_gen = self._gen_vis(ir1, wv, torch.zeros(b, dtype=ir1.dtype))
            else:
                fakes["pmw"] = N.generator_forward(self.nets["gen_pmw"], ir1, wv)
                recon["pmw"] = pmw_gen = fakes["pmw"]
        if vis_gen is None:
            vis_gen = self._frozen_generated(stage, "gen_vis", ir1, wv)
        if pmw_gen is None:
            pmw_gen = self._frozen_generated(stage, "gen_pmw", ir1, wv)

        real_rows = {t: (vis_ok if t == "vis" else torch.ones(b, dtype=torch.bool)) for t in stage.targets}

        # discriminator updates
        parts = {t: LossParts() for t in stage.targets}
        for t in stage.targets:
            disc = self.nets[f"disc_{t}"]
            opt = self.optims[f"disc_{t}"]
            opt.zero_grad(set_to_none=True)
            rows = real_rows[t]
            patch_real, m2n_real = N.discriminator_forward(disc, ir1[rows], wv[rows], chans[t][rows])
            patch_fake, _ = N.discriminator_forward(disc, ir1, wv, fakes[t].detach())
            if rows.all():
                l_disc = loss_disc(patch_real, patch_fake, cfg.adversarial)
            else:
                l_disc = _unbalanced_disc(patch_real, patch_fake, cfg.adversarial)
            p = parts[t]
            p.l_disc = l_disc
            if t == "vis" and rows.any():
                p.l_m2n_d = loss_m2n_d(m2n_real, m2n_true[rows], cfg.m2n_raw)
            comp_d, _, _ = composite_losses(p, stage.weights.get(t, LossWeights()), t)
            comp_d.backward()
            opt.step()

        # generator update
        for t in stage.targets:
            self.optims[f"gen_{t}"].zero_grad(set_to_none=True)
        reg = self.nets["regressor"]
        inputs = self._regressor_input(stage, chans, vis_gen, pmw_gen)
        self._probe(stage, idx, chans, inputs, pmw_gen)
        l_regr = loss_regr(vmax, reg(torch.stack(inputs, dim=1), aux))
        total = 0.0
        reports = []
        for t in stage.targets:
            disc = self.nets[f"disc_{t}"]
            patch_fake, m2n_fake = N.discriminator_forward(disc, ir1, wv, fakes[t])
            p = parts[t]
            p.l_gen = loss_gen_adv(patch_fake, cfg.adversarial)
            rows = real_rows[t]
            if rows.any():
                p.l_L2 = loss_l2(chans[t][rows], recon[t][rows], cfg.recon)
            if t == "vis":
                p.l_m2n_g = loss_m2n_g(m2n_fake, m2n_req, cfg.m2n_raw)
            p.l_regr = l_regr
            w = stage.weights.get(t, LossWeights())
            _, comp_g, _ = composite_losses(p, w, t)
            total = total + comp_g
            reports.append(make_report(p, w, t))
        total.backward()
        for t in stage.targets:
            self.optims[f"gen_{t}"].step()
        return _merge_reports(reports)

    def _probe(self, stage, idx, chans, inputs, pmw_gen):
        if self.probe is None:
            return
        reg_pmw = inputs[stage.regressor_inputs.index("pmw")] if "pmw" in stage.regressor_inputs else None
        self.probe({
            "stage_id": stage.stage_id, "stage": stage.name, "indices": idx.clone(),
            "real_pmw": chans["pmw"], "regr_pmw": reg_pmw, "gen_pmw": pmw_gen,
        })

    # -- epochs and stages -------------------------------------------------

    def train_epoch(self, stage: StageConfig, batches) -> LossReport:
        batches = list(batches)
        if not batches:
            raise TrainingError("empty batch stream")
        self._set_modes(stage)
        step_fn = self.regressor_step if stage.kind == "regressor" else self.generator_step
        reports = []
        with torch.random.fork_rng(devices=[]):
            torch.set_rng_state(self.torch_rng)
            for idx in batches:
                self.consumed.setdefault(stage.stage_id, set()).update(int(i) for i in idx)
                rep = step_fn(stage, self.train, idx)
                self.step += 1
                reports.append(rep)
                self._log_step(stage, rep, idx.numel())
            self.torch_rng = torch.get_rng_state()
        return LossReport.mean(reports)

    @torch.no_grad()
    def validate(self, stage: StageConfig | None = None, data: TensorData | None = None) -> float | None:
        """Validation MSE (kt^2); ``stage=None`` means the operational path (generated VIS and PMW)."""
        data = self.valid if data is None else data
        if data is None or "regressor" not in self.nets:
            return None
        if stage is None:
            if not {"gen_vis", "gen_pmw"} & set(self.nets):
                return None
            inputs = self.schedule[-1].regressor_inputs if self.schedule else REGRESSOR_INPUTS
            stage = StageConfig(0, "operational", "regressor", (), (), "all", "generated", "generated",
                                regressor_inputs=inputs)
        idx = self._indices(stage, data) if stage.data_filter == "all" or data.good.any() else None
        if idx is None or idx.numel() == 0:
            return None
        modes = {n: net.training for n, net in self.nets.items()}
        for net in self.nets.values():
            net.eval()
        errs = []
        for chunk in torch.split(idx, 256):
            x = rotate_batch(data.x[chunk], 0.0) if self.cfg.rotate else data.x[chunk]
            chans = {"ir1": x[:, 0], "wv": x[:, 1], "vis": x[:, 2], "pmw": x[:, 3]}
            vis_gen = pmw_gen = None
            if "gen_vis" in self.nets:
                vis_gen = self._gen_vis(chans["ir1"], chans["wv"], torch.zeros(chunk.numel(), dtype=x.dtype))
            if "gen_pmw" in self.nets:
                pmw_gen = N.generator_forward(self.nets["gen_pmw"], chans["ir1"], chans["wv"])
            inputs = self._regressor_input(stage, chans, vis_gen, pmw_gen)
            pred = self.nets["regressor"](torch.stack(inputs, dim=1), data.aux[chunk])
            errs.append((pred.double() - data.vmax[chunk].double()) ** 2)
        for n, net in self.nets.items():
            net.train(modes[n])
        return float(torch.cat(errs).mean())

    def run(self, until_stage: int | None = None, until_epoch: int | None = None,
            checkpoint_path=None) -> "Trainer":
        """Run the remaining schedule; optionally stop after ``until_epoch`` of stage index ``until_stage``."""
        while self.stage_index < len(self.schedule):
            stage = self.schedule[self.stage_index]
            if self.epoch_in_stage == 0:
                self._begin_stage(stage)
            key = str(stage.stage_id)
            while self.epoch_in_stage < stage.max_epochs:
                if until_stage is not None and self.stage_index == until_stage and self.epoch_in_stage >= until_epoch:
                    return self
                idx = self._indices(stage, self.train)
                batches = make_batches(idx, self.cfg.batch_size, self.gen)
                self._set_lr(stage)
                rep = self.train_epoch(stage, batches)
                self.epoch_in_stage += 1
                val = self.validate(stage)
                val_op = self.validate(None) if stage.kind == "generator" or stage.stage_id == len(self.schedule) else None
                row = {"stage": stage.stage_id, "name": stage.name, "epoch": self.epoch_in_stage,
                       "batches": len(batches), **rep.to_dict(), "val_mse": val, "val_mse_op": val_op}
                self.history.append(row)
                self._log_epoch(row)
                if self._early_stop(stage, key, val):
                    break
                if checkpoint_path:
                    checkpoint(self.state(), checkpoint_path)
            self._end_stage(stage, key)
            self.stage_index += 1
            self.epoch_in_stage = 0
            if checkpoint_path:
                checkpoint(self.state(), checkpoint_path)
        return self

    def _begin_stage(self, stage: StageConfig):
        log.info("stage %d (%s): %d epochs", stage.stage_id, stage.name, stage.max_epochs)
        trained_before = any(n.startswith("disc_") for s in self.schedule[:self.stage_index] for n in s.trainable)
        if self.cfg.reinit_discriminators and stage.kind == "generator" and trained_before:
            for k, n in enumerate(N.NETWORK_NAMES):
                if n.startswith("disc_") and n in self.nets:
                    self.nets[n] = self._build(n, self.cfg.seed + 100 + k)
                    self.optims[n] = self._make_optim(n)

    def _early_stop(self, stage, key, val) -> bool:
        if val is None:
            return False
        best = self.best.get(key)
        if best is None or val < best["val"]:
            self.best[key] = {"val": val, "epoch": self.epoch_in_stage}
            if self.cfg.restore_best and stage.kind == "regressor":
                self.best[key]["state"] = copy.deepcopy(self.nets["regressor"].state_dict())
            return False
        patience = self.cfg.patience
        return patience is not None and self.epoch_in_stage - best["epoch"] >= patience

    def _end_stage(self, stage, key):
        best = self.best.get(key)
        if self.cfg.restore_best and best and "state" in best:
            self.nets["regressor"].load_state_dict(best["state"])

    # -- logging ----------------------------------------------------------

    def _log_step(self, stage, rep: LossReport, n):
        if not self.log_dir:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        row = {"stage": stage.stage_id, "name": stage.name, "epoch": self.epoch_in_stage + 1,
               "step": self.step, "batch_size": n, **rep.to_dict()}
        with open(self.log_dir / "steps.jsonl", "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    def _log_epoch(self, row):
        if not self.log_dir:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        path = self.log_dir / "epochs.csv"
        fields_ = EPOCH_FIELDS
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            if new:
                fh.write(f"# {EPOCH_SCHEMA}\n")
            w = csv.DictWriter(fh, fieldnames=fields_, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields_})


EPOCH_SCHEMA = "hybridtc epoch-log v1"
EPOCH_FIELDS = ["stage", "name", "epoch", "batches", *LossReport.field_names(), "val_mse", "val_mse_op"]


def _unbalanced_disc(patch_real, patch_fake, adversarial):
    """Discriminator loss when only some rows carry a real target (missing VIS)."""
    fake_term = F.binary_cross_entropy_with_logits(patch_fake, torch.zeros_like(patch_fake))
    if adversarial == "literal":
        fake_term = 1.0 - F.logsigmoid(patch_fake).mean()
    if patch_real.numel() == 0:
        return fake_term
    if adversarial == "literal":
        return F.logsigmoid(patch_real).mean() + fake_term
    return F.binary_cross_entropy_with_logits(patch_real, torch.ones_like(patch_real)) + fake_term


def _merge_reports(reports: list[LossReport]) -> LossReport:
    if len(reports) == 1:
        return reports[0]
    out = {}
    for name in LossReport.field_names():
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not vals:
            out[name] = None
        elif name in ("l_regr", "composite_R"):
            out[name] = vals[0]
        else:
            out[name] = sum(vals)
    return LossReport(**out)


# --------------------------------------------------------------------------
# protocol entry points


@dataclass
class TrainResult:
    nets: dict[str, torch.nn.Module]
    history: list[dict]
    schedule: list[StageConfig]
    trainer: Trainer


def _require_pmw(ds: Dataset):
    missing = sum(1 for fr in ds.frames if not fr.pmw_present)
    if missing:
        raise TrainingError(f"{missing} training frames lack the PMW channel")


def run_schedule(train_ds: Dataset, valid_ds: Dataset | None, schedule, cfg: TrainConfig, specs=None,
                 log_dir=None, probe=None, checkpoint_path=None) -> TrainResult:
    train = TensorData.from_dataset(train_ds, cfg.qc)
    valid = TensorData.from_dataset(valid_ds, cfg.qc) if valid_ds is not None and len(valid_ds) else None
    trainer = Trainer(train, valid, schedule, cfg, specs=specs, log_dir=log_dir, probe=probe)
    trainer.run(checkpoint_path=checkpoint_path)
    return TrainResult(trainer.nets, trainer.history, trainer.schedule, trainer)


def three_stage_train(train_ds: Dataset, valid_ds: Dataset | None, cfg: TrainConfig = TrainConfig(),
                      epochs=THREE_STAGE_EPOCHS, specs=None, **kw) -> TrainResult:
    _require_pmw(train_ds)
    return run_schedule(train_ds, valid_ds, three_stage_schedule(epochs), cfg, specs, **kw)


def five_stage_train(train_ds: Dataset, valid_ds: Dataset | None, cfg: TrainConfig = TrainConfig(),
                     epochs=FIVE_STAGE_EPOCHS, specs=None, schedule=None, **kw) -> TrainResult:
    _require_pmw(train_ds)
    if not qc_mask(train_ds, cfg.qc).any():
        raise TrainingError("no frame passes VIS quality control; loop 1 cannot run")
    return run_schedule(train_ds, valid_ds, schedule or five_stage_schedule(epochs), cfg, specs, **kw)


def train_direct_regressor(train_ds: Dataset, valid_ds: Dataset | None, epochs: int, inputs=("ir1", "wv"),
                           cfg: TrainConfig = TrainConfig(), **kw) -> TrainResult:
    return run_schedule(train_ds, valid_ds, regressor_only_schedule(epochs, inputs), cfg, **kw)
