"""Central finite differences against autograd for the three composite losses.

Everything runs in float64 on narrow networks. Dropout masks are pinned by
reseeding torch before every forward pass, so the loss is a deterministic
function of the parameters even in training mode.

ReLU and LeakyReLU are swapped for softplus versions with the same shape.
With thousands of units, some pre-activation always sits within a step of a
kink, and the difference quotient then measures a secant rather than a
derivative. The swap keeps every graph, loss term, weight and detach point.
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from hybridtc import nets as N
from hybridtc.losses import (
    PMW_WEIGHTS,
    VIS_WEIGHTS,
    LossParts,
    composite_losses,
    loss_disc,
    loss_gen_adv,
    loss_l2,
    loss_m2n_d,
    loss_m2n_g,
    loss_regr,
)

SIZE = 64
GEN_WIDTH = 1 / 32
DISC_WIDTH = 1 / 16
REG_WIDTH = 1 / 8
# candidate steps; large ones lose to curvature, small ones to roundoff
STEPS = (1e-4, 1e-5, 1e-6, 1e-7)
# adjacent steps must agree this closely before their quotient is trusted
STABLE_TOL = 5e-5


SOFTPLUS_BETA = 10.0


class SmoothLeaky(nn.Module):
    """``slope * x + (1 - slope) * softplus(x)``: LeakyReLU with the corner rounded."""

    def __init__(self, slope=0.0):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return self.slope * x + (1 - self.slope) * F.softplus(x, beta=SOFTPLUS_BETA, threshold=1e9)


def smooth_activations(net: nn.Module) -> nn.Module:
    for m in list(net.modules()):
        for name, child in m.named_children():
            if isinstance(child, nn.LeakyReLU):
                setattr(m, name, SmoothLeaky(child.negative_slope))
            elif isinstance(child, nn.ReLU):
                setattr(m, name, SmoothLeaky(0.0))
    return net


def toy_setup(seed=0, batch=3, smooth=True):
    g = torch.Generator().manual_seed(seed)
    nets = {
        "gen_vis": N.build_network(N.default_spec("gen_vis", GEN_WIDTH), SIZE, seed),
        "gen_pmw": N.build_network(N.default_spec("gen_pmw", GEN_WIDTH), SIZE, seed + 1),
        "disc_vis": N.build_network(N.default_spec("disc_vis", DISC_WIDTH), SIZE, seed + 2),
        "disc_pmw": N.build_network(N.default_spec("disc_pmw", DISC_WIDTH), SIZE, seed + 3),
        "regressor": N.build_network(N.default_spec("regressor", REG_WIDTH), SIZE, seed + 4),
    }
    for net in nets.values():
        net.double().train()
        if smooth:
            smooth_activations(net)
        # zero biases leave exact ties at ReLU kinks (dead input windows give a
        # pre-activation of exactly 0); jitter them so the point is generic
        with torch.no_grad():
            for name, p in net.named_parameters():
                if name.endswith("bias"):
                    p.add_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.05)
    nets["regressor"].set_target_stats(60.0, 20.0)
    x = torch.rand(batch, 4, SIZE, SIZE, generator=g, dtype=torch.float64)
    data = {
        "ir1": x[:, 0] * 2 - 1, "wv": x[:, 1] * 2 - 1, "vis": x[:, 2], "pmw": x[:, 3],
        "vmax": torch.rand(batch, generator=g, dtype=torch.float64) * 100 + 30,
        "m2n": torch.rand(batch, generator=g, dtype=torch.float64) * 300,
        "m2n_req": torch.rand(batch, generator=g, dtype=torch.float64) * 300,
        "aux": torch.rand(batch, N.N_AUX, generator=g, dtype=torch.float64),
    }
    return nets, data


def _gen(nets, t, d, m2n=None):
    if t == "vis":
        return N.generator_forward(nets["gen_vis"], d["ir1"], d["wv"], m2n)
    return N.generator_forward(nets["gen_pmw"], d["ir1"], d["wv"])


def composite_G(nets, d, t):
    w = VIS_WEIGHTS if t == "vis" else PMW_WEIGHTS
    p = LossParts()
    if t == "vis":
        fake = _gen(nets, t, d, d["m2n_req"])
        recon = _gen(nets, t, d, d["m2n"])
        vis_r, pmw_r = _gen(nets, t, d, torch.zeros_like(d["m2n"])), d["pmw"]
    else:
        fake = recon = pmw_r = _gen(nets, t, d)
        vis_r = d["vis"]
    patch, m2n_pred = N.discriminator_forward(nets[f"disc_{t}"], d["ir1"], d["wv"], fake)
    p.l_gen = loss_gen_adv(patch)
    p.l_L2 = loss_l2(d[t], recon)
    p.l_regr = loss_regr(d["vmax"], N.regressor_forward(nets["regressor"], d["ir1"], d["wv"], vis_r, pmw_r, d["aux"]))
    if t == "vis":
        p.l_m2n_g = loss_m2n_g(m2n_pred, d["m2n_req"])
    return composite_losses(p, w, t)[1]


def composite_D(nets, d, t):
    w = VIS_WEIGHTS if t == "vis" else PMW_WEIGHTS
    disc = nets[f"disc_{t}"]
    with torch.no_grad():
        fake = _gen(nets, t, d, d["m2n_req"]) if t == "vis" else _gen(nets, t, d)
    p = LossParts()
    patch_real, m2n_real = N.discriminator_forward(disc, d["ir1"], d["wv"], d[t])
    patch_fake, _ = N.discriminator_forward(disc, d["ir1"], d["wv"], fake)
    p.l_disc = loss_disc(patch_real, patch_fake)
    if t == "vis":
        p.l_m2n_d = loss_m2n_d(m2n_real, d["m2n"])
    return composite_losses(p, w, t)[0]


def composite_R(nets, d, t=None):
    reg = nets["regressor"]
    return loss_regr(d["vmax"], N.regressor_forward(reg, d["ir1"], d["wv"], d["vis"], d["pmw"], d["aux"]))


def _pinned(fn, nets, d, t):
    torch.manual_seed(1234)
    return fn(nets, d, t)


def _central(fn, nets, d, t, view, k, eps):
    orig = float(view[k])
    with torch.no_grad():
        view[k] = orig + eps
        up = float(_pinned(fn, nets, d, t))
        view[k] = orig - eps
        down = float(_pinned(fn, nets, d, t))
        view[k] = orig
    return (up - down) / (2 * eps)


def _stable(fn, nets, d, t, view, k):
    """Difference quotient from the adjacent pair of steps that agree best.

    Returns ``(value, disagreement)``; the value comes from the smaller step.
    """
    q = [_central(fn, nets, d, t, view, k, h) for h in STEPS]
    best = None
    for a, b in zip(q, q[1:]):
        gap = abs(a - b) / max(abs(a), abs(b), 1e-300)
        if best is None or gap < best[1]:
            best = (b, gap)
    return best


def check(fn, nets, d, t, net_name, candidates=4):
    """Worst relative error between autograd and central differences for ``net_name``.

    Each parameter tensor contributes its largest-gradient entry. If no pair
    of steps gives a stable quotient for that entry, the next-largest one is
    tried instead.

    A bias feeding a batch norm has an identically zero gradient (the
    normalization subtracts it back out); autograd returns rounding noise
    there, so such tensors are held to an absolute bound instead.

    Returns ``(worst_rel, n_checked, n_unstable)``.
    """
    with torch.random.fork_rng(devices=[]):
        params = [p for p in nets[net_name].parameters() if p.requires_grad]
        for net in nets.values():
            net.zero_grad(set_to_none=True)
        _pinned(fn, nets, d, t).backward()
        params = [p for p in params if p.grad is not None]
        scale = max(float(p.grad.abs().max()) for p in params)
        worst, checked, unstable = 0.0, 0, 0
        for p in params:
            flat = p.grad.detach().reshape(-1)
            view = p.data.reshape(-1)
            top = torch.topk(flat.abs(), min(candidates, flat.numel())).indices.tolist()
            if abs(float(flat[top[0]])) < 1e-9 * scale:
                numeric = _central(fn, nets, d, t, view, top[0], STEPS[1])
                if abs(numeric) > 1e-6 * scale:
                    raise AssertionError(f"{net_name}: zero analytic gradient but numeric {numeric:g}")
                continue
            for k in top:
                analytic = float(flat[k])
                if abs(analytic) < 1e-9 * scale:
                    break
                numeric, gap = _stable(fn, nets, d, t, view, k)
                if gap > STABLE_TOL:
                    unstable += 1
                    continue
                worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
                checked += 1
                break
            else:
                raise AssertionError(f"{net_name}: no stable difference quotient among {candidates} entries")
        if checked == 0 or not math.isfinite(worst):
            raise AssertionError(f"no usable gradient entries for {net_name}")
    return worst, checked, unstable


CASES = [
    ("composite_G[vis]", composite_G, "vis", "gen_vis"),
    ("composite_G[pmw]", composite_G, "pmw", "gen_pmw"),
    ("composite_D[vis]", composite_D, "vis", "disc_vis"),
    ("composite_D[pmw]", composite_D, "pmw", "disc_pmw"),
    ("composite_R", composite_R, None, "regressor"),
]


def run_all(seed=0, smooth=True) -> dict[str, tuple[float, int, int]]:
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        nets, d = toy_setup(seed, smooth=smooth)
        return {name: check(fn, nets, d, t, net) for name, fn, t, net in CASES}
    finally:
        torch.set_default_dtype(prev)
