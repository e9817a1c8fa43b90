"""Adversarial, reconstruction, m2n and regression losses and their composites.

Adversarial terms default to the Pix2Pix formulation: binary cross-entropy
for the discriminator and the non-saturating ``-log D(fake)`` for the
generator. ``adversarial="literal"`` evaluates the expressions exactly as
printed in the original write-up instead, for comparison runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

M2N_RANGE = 300.0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0  # reconstruction
    beta: float = 0.0  # regressor feedback
    gamma: float = 0.0  # m2n

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


VIS_WEIGHTS = LossWeights(alpha=1000.0, beta=0.0001, gamma=0.002)
PMW_WEIGHTS = LossWeights(alpha=10.0, beta=0.001, gamma=0.0)


@dataclass
class LossReport:
    l_disc: float | None = None
    l_gen: float | None = None
    l_L2: float | None = None
    l_m2n_d: float | None = None
    l_m2n_g: float | None = None
    l_regr: float | None = None
    composite_D: float | None = None
    composite_G: float | None = None
    composite_R: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def mean(cls, reports) -> "LossReport":
        out = {}
        for name in cls.field_names():
            vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
            out[name] = math.fsum(vals) / len(vals) if vals else None
        return cls(**out)


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_disc(patch_real: torch.Tensor, patch_fake: torch.Tensor, adversarial: str = "standard") -> torch.Tensor:
    """Patch-averaged discriminator loss; real patches -> 1, generated -> 0."""
    _check_same(patch_real, patch_fake, "loss_disc")
    if adversarial == "literal":
        return (F.logsigmoid(patch_real) + 1.0 - F.logsigmoid(patch_fake)).mean()
    real = F.binary_cross_entropy_with_logits(patch_real, torch.ones_like(patch_real))
    fake = F.binary_cross_entropy_with_logits(patch_fake, torch.zeros_like(patch_fake))
    return real + fake


def loss_gen_adv(patch_fake: torch.Tensor, adversarial: str = "standard") -> torch.Tensor:
    if adversarial == "literal":
        return F.logsigmoid(patch_fake).mean()
    return -F.logsigmoid(patch_fake).mean()


def loss_l2(target: torch.Tensor, generated: torch.Tensor, recon: str = "l2") -> torch.Tensor:
    _check_same(target, generated, "loss_l2")
    if recon == "l1":
        return (target - generated).abs().mean()
    if recon != "l2":
        raise ValueError(f"unknown reconstruction distance {recon!r}")
    return ((target - generated) ** 2).mean()


def _m2n_err(pred, true, m2n_raw: bool):
    pred = torch.as_tensor(pred)
    true = torch.as_tensor(true, dtype=pred.dtype)
    err = pred - true
    if not m2n_raw:
        err = err / M2N_RANGE
    return (err**2).mean()


def loss_m2n_d(m2n_pred, m2n_true, m2n_raw: bool = False) -> torch.Tensor:
    """Squared error of the discriminator's m2n estimate on real VIS (units of 300 min)."""
    return _m2n_err(m2n_pred, m2n_true, m2n_raw)


def loss_m2n_g(m2n_pred_on_fake, m2n_requested, m2n_raw: bool = False) -> torch.Tensor:
    req = torch.as_tensor(m2n_requested)
    if torch.any(req < 0) or torch.any(req > M2N_RANGE):
        raise ValueError("requested m2n must lie in [0, 300]")
    return _m2n_err(m2n_pred_on_fake, req, m2n_raw)


def loss_regr(vmax_true, vmax_est) -> torch.Tensor:
    """Mean squared intensity error in kt^2."""
    vmax_est = torch.as_tensor(vmax_est)
    vmax_true = torch.as_tensor(vmax_true, dtype=vmax_est.dtype)
    return ((vmax_true - vmax_est) ** 2).mean()


@dataclass
class LossParts:
    """Raw loss terms for one step; ``None`` marks a term that was not computed."""

    l_disc: torch.Tensor | None = None
    l_gen: torch.Tensor | None = None
    l_L2: torch.Tensor | None = None
    l_m2n_d: torch.Tensor | None = None
    l_m2n_g: torch.Tensor | None = None
    l_regr: torch.Tensor | None = None


def _z(x):
    return 0.0 if x is None else x


def composite_losses(parts: LossParts, weights: LossWeights, target_kind: str):
    """Weighted composites ``(D, G, R)``; m2n terms only count for the VIS target."""
    if target_kind not in ("vis", "pmw"):
        raise ValueError(f"target_kind must be 'vis' or 'pmw', got {target_kind!r}")
    is_vis = target_kind == "vis"
    comp_d = _z(parts.l_disc)
    comp_g = _z(parts.l_gen) + weights.alpha * _z(parts.l_L2) + weights.beta * _z(parts.l_regr)
    if is_vis:
        comp_d = comp_d + weights.gamma * _z(parts.l_m2n_d)
        comp_g = comp_g + weights.gamma * _z(parts.l_m2n_g)
    comp_r = _z(parts.l_regr)
    return comp_d, comp_g, comp_r


def _f(x):
    if x is None:
        return None
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def make_report(parts: LossParts, weights: LossWeights, target_kind: str) -> LossReport:
    d, g, r = composite_losses(parts, weights, target_kind)
    return LossReport(
        l_disc=_f(parts.l_disc),
        l_gen=_f(parts.l_gen),
        l_L2=_f(parts.l_L2),
        l_m2n_d=_f(parts.l_m2n_d),
        l_m2n_g=_f(parts.l_m2n_g),
        l_regr=_f(parts.l_regr),
        composite_D=_f(d),
        composite_G=_f(g),
        composite_R=_f(r),
    )
