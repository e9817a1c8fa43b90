"""U-Net generators, PatchGAN discriminator with an m2n head, and the CNN regressor.

Every network is built from a declarative :class:`NetworkSpec` (a list of
:class:`LayerSpec` rows mirroring the published layer tables), so shape and
wiring checks can be made against the table rather than against module code.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import REGIONS, FrameMeta, local_time

M2N_SCALE = 300.0
LEAKY_SLOPE = 0.2
INIT_STD = 0.02
N_AUX = 10
NETWORK_NAMES = ("gen_vis", "gen_pmw", "disc_vis", "disc_pmw", "regressor")
CHECKPOINT_FORMAT = "hybridtc-network"
CHECKPOINT_VERSION = 1


class SpecMismatchError(ValueError):
    """Raised when a spec, image size or checkpoint do not fit together."""


@dataclass(frozen=True)
class LayerSpec:
    op: str  # conv | trans_conv | linear | batch_norm
    out_dim: int = 0
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    batch_norm: bool = False
    dropout: float = 0.0
    activation: str = "none"  # relu | leaky_relu | none
    skip_to: int | None = None
    group: str = ""

    def __post_init__(self):
        if self.op in ("conv", "trans_conv") and (self.kernel is None or self.stride is None):
            raise ValueError(f"{self.op} layer needs kernel and stride")
        if self.op in ("linear", "batch_norm") and (self.kernel is not None or self.stride is not None):
            raise ValueError(f"{self.op} layer takes no kernel/stride")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    in_channels: int
    conditioning: str = "none"  # none | m2n_channel
    aux_features: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        layers = []
        for row in d.pop("layers"):
            for key in ("kernel", "stride"):
                if row[key] is not None:
                    row[key] = tuple(row[key])
            layers.append(LayerSpec(**row))
        return cls(layers=tuple(layers), **d)

    def kind(self) -> str:
        return self.name.split("_")[0] if self.name != "regressor" else "regressor"


def spec_hash(spec: NetworkSpec, image_size: int) -> str:
    payload = json.dumps({"spec": json.loads(spec.to_json()), "image_size": int(image_size)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _w(d: int, width: float) -> int:
    return max(1, int(round(d * width)))


def generator_spec(name: str = "gen_pmw", width: float = 1.0) -> NetworkSpec:
    """The 13-row U-Net table; ``width`` scales channel counts (toy networks)."""
    if name not in ("gen_vis", "gen_pmw"):
        raise ValueError(f"not a generator name: {name}")
    k4, s2, s1 = (4, 4), (2, 2), (1, 1)
    enc = [32, 64, 128, 256, 256, 256]
    dec = [256, 256, 256, 128, 64, 32]
    layers = []
    for i, d in enumerate(enc):
        layers.append(LayerSpec("conv", _w(d, width), k4, s2, batch_norm=i > 0, activation="leaky_relu",
                                skip_to=11 - i if i < 5 else None, group="encoder"))
    for i, d in enumerate(dec):
        row = 6 + i
        layers.append(LayerSpec("trans_conv", _w(d, width), k4, s2, batch_norm=True,
                                dropout=0.5 if row in (6, 7) else 0.0, activation="relu", group="decoder"))
    layers.append(LayerSpec("conv", 1, k4, s1, batch_norm=False, activation="relu", group="output"))
    cond = "m2n_channel" if name == "gen_vis" else "none"
    return NetworkSpec(name=name, layers=tuple(layers), in_channels=3 if cond != "none" else 2, conditioning=cond)


def discriminator_spec(name: str = "disc_pmw", width: float = 1.0) -> NetworkSpec:
    if name not in ("disc_vis", "disc_pmw"):
        raise ValueError(f"not a discriminator name: {name}")
    k4, s2, s1 = (4, 4), (2, 2), (1, 1)
    layers = (
        LayerSpec("conv", _w(32, width), k4, s2, batch_norm=False, activation="leaky_relu", group="shared"),
        LayerSpec("conv", _w(64, width), k4, s2, batch_norm=True, activation="leaky_relu", group="shared"),
        LayerSpec("conv", _w(128, width), k4, s2, batch_norm=True, activation="leaky_relu", group="shared"),
        LayerSpec("conv", _w(128, width), k4, s2, batch_norm=True, activation="leaky_relu", group="m2n"),
        LayerSpec("conv", _w(256, width), k4, s2, batch_norm=True, activation="leaky_relu", group="m2n"),
        LayerSpec("linear", _w(128, width), batch_norm=True, activation="relu", group="m2n"),
        LayerSpec("linear", 1, batch_norm=False, activation="none", group="m2n"),
        LayerSpec("conv", _w(256, width), k4, s1, batch_norm=True, activation="relu", group="patch"),
        LayerSpec("conv", 1, k4, s1, batch_norm=False, activation="none", group="patch"),
    )
    return NetworkSpec(name=name, layers=layers, in_channels=3)


def regressor_spec(in_channels: int = 4, width: float = 1.0) -> NetworkSpec:
    layers = (
        LayerSpec("batch_norm", in_channels, group="features"),
        LayerSpec("conv", _w(16, width), (4, 4), (2, 2), batch_norm=True, activation="relu", group="features"),
        LayerSpec("conv", _w(32, width), (3, 3), (2, 2), batch_norm=True, activation="relu", group="features"),
        LayerSpec("conv", _w(64, width), (3, 3), (2, 2), batch_norm=True, activation="relu", group="features"),
        LayerSpec("conv", _w(128, width), (3, 3), (2, 2), batch_norm=True, activation="relu", group="features"),
        LayerSpec("linear", _w(256, width), batch_norm=True, activation="relu", group="head"),
        LayerSpec("linear", _w(64, width), batch_norm=True, activation="relu", group="head"),
        LayerSpec("linear", 1, batch_norm=False, activation="none", group="head"),
    )
    return NetworkSpec(name="regressor", layers=layers, in_channels=in_channels, aux_features=N_AUX)


def default_spec(name: str, width: float = 1.0) -> NetworkSpec:
    if name.startswith("gen_"):
        return generator_spec(name, width)
    if name.startswith("disc_"):
        return discriminator_spec(name, width)
    if name == "regressor":
        return regressor_spec(4, width)
    raise ValueError(f"unknown network {name!r}")


# --------------------------------------------------------------------------
# building blocks


def _activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(LEAKY_SLOPE)
    if name == "none":
        return nn.Identity()
    raise ValueError(f"unknown activation {name!r}")


def _conv(layer: LayerSpec, in_ch: int) -> nn.Module:
    k, s = layer.kernel, layer.stride
    if layer.op == "trans_conv":
        if s != (2, 2) or k != (4, 4):
            raise SpecMismatchError("transposed convolutions must be 4x4 stride 2")
        return nn.ConvTranspose2d(in_ch, layer.out_dim, k, s, padding=1)
    if s == (1, 1):
        # "same" output size; even kernels pad one extra row/column at the far edge
        lo_h, lo_w = (k[0] - 1) // 2, (k[1] - 1) // 2
        pad = nn.ZeroPad2d((lo_w, k[1] - 1 - lo_w, lo_h, k[0] - 1 - lo_h))
        return nn.Sequential(pad, nn.Conv2d(in_ch, layer.out_dim, k, s))
    return nn.Conv2d(in_ch, layer.out_dim, k, s, padding=(k[0] - 1) // 2)


class Block(nn.Module):
    """One table row: op -> [batch norm] -> [dropout] -> activation."""

    def __init__(self, layer: LayerSpec, in_dim: int):
        super().__init__()
        self.layer = layer
        if layer.op == "linear":
            self.op = nn.Linear(in_dim, layer.out_dim)
            self.bn = nn.BatchNorm1d(layer.out_dim) if layer.batch_norm else None
        else:
            self.op = _conv(layer, in_dim)
            self.bn = nn.BatchNorm2d(layer.out_dim) if layer.batch_norm else None
        self.drop = nn.Dropout(layer.dropout) if layer.dropout > 0 else None
        self.act = _activation(layer.activation)

    def forward(self, x):
        x = self.op(x)
        if self.bn is not None:
            x = self.bn(x)
        if self.drop is not None:
            x = self.drop(x)
        return self.act(x)


def _stride2_count(spec: NetworkSpec) -> int:
    return sum(1 for l in spec.layers if l.op == "conv" and l.stride == (2, 2))


class Generator(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        skips_into: dict[int, int] = {}
        for i, l in enumerate(spec.layers):
            if l.skip_to is not None:
                skips_into[l.skip_to] = i
        self.skips_into = skips_into
        blocks = []
        ch = spec.in_channels
        outs = []
        for i, l in enumerate(spec.layers):
            in_ch = ch + (outs[skips_into[i]] if i in skips_into else 0)
            blocks.append(Block(l, in_ch))
            ch = l.out_dim
            outs.append(ch)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, return_activations: bool = False, drop_skip: int | None = None):
        """Run the U-Net on a ``[B, C, H, W]`` stack.

        ``drop_skip=k`` zeroes only the skip copy of encoder activation ``k``,
        leaving the main path intact.
        """
        acts = []
        for i, block in enumerate(self.blocks):
            if i in self.skips_into:
                src = self.skips_into[i]
                skip = acts[src]
                if drop_skip == src:
                    skip = torch.zeros_like(skip)
                x = torch.cat([x, skip], dim=1)
            x = block(x)
            acts.append(x)
        return (x, acts) if return_activations else x


class Discriminator(nn.Module):
    def __init__(self, spec: NetworkSpec, image_size: int):
        super().__init__()
        self.spec = spec
        groups: dict[str, list[LayerSpec]] = {"shared": [], "m2n": [], "patch": []}
        for l in spec.layers:
            groups[l.group].append(l)
        ch = spec.in_channels
        self.shared = nn.ModuleList()
        for l in groups["shared"]:
            self.shared.append(Block(l, ch))
            ch = l.out_dim
        shared_ch = ch
        self.patch = nn.ModuleList()
        for l in groups["patch"]:
            self.patch.append(Block(l, ch))
            ch = l.out_dim
        ch, size = shared_ch, image_size // 2 ** len(groups["shared"])
        self.m2n = nn.ModuleList()
        flat = False
        for l in groups["m2n"]:
            if l.op == "linear" and not flat:
                ch = ch * size * size
                flat = True
            self.m2n.append(Block(l, ch))
            ch = l.out_dim
            if l.op == "conv":
                size //= l.stride[0]

    def forward(self, x, return_activations: bool = False):
        acts = []
        for b in self.shared:
            x = b(x)
            acts.append(x)
        h = x
        for b in self.patch:
            h = b(h)
            acts.append(h)
        patch = h[:, 0]
        m = x
        for b in self.m2n:
            if b.layer.op == "linear" and m.dim() > 2:
                m = m.flatten(1)
            m = b(m)
            acts.append(m)
        m2n = m[:, 0] * M2N_SCALE
        return (patch, m2n, acts) if return_activations else (patch, m2n)


class Regressor(nn.Module):
    def __init__(self, spec: NetworkSpec, image_size: int, vmax_mean: float = 60.0, vmax_std: float = 25.0):
        super().__init__()
        self.spec = spec
        ch, size = spec.in_channels, image_size
        self.features = nn.ModuleList()
        head_layers = []
        for l in spec.layers:
            if l.op == "batch_norm":
                self.features.append(nn.BatchNorm2d(ch))
            elif l.op == "conv":
                self.features.append(Block(l, ch))
                ch = l.out_dim
                size = (size + l.stride[0] - 1) // l.stride[0]
            else:
                head_layers.append(l)
        dim = ch * size * size + spec.aux_features
        self.head = nn.ModuleList()
        for l in head_layers:
            self.head.append(Block(l, dim))
            dim = l.out_dim
        self.register_buffer("vmax_mean", torch.tensor(float(vmax_mean)))
        self.register_buffer("vmax_std", torch.tensor(float(vmax_std)))

    def set_target_stats(self, mean: float, std: float):
        self.vmax_mean.fill_(float(mean))
        self.vmax_std.fill_(float(std) if std > 0 else 1.0)

    def forward(self, x, aux, return_activations: bool = False):
        acts = []
        for f in self.features:
            x = f(x)
            acts.append(x)
        h = torch.cat([x.flatten(1), aux.to(x.dtype)], dim=1)
        for b in self.head:
            h = b(h)
            acts.append(h)
        out = h[:, 0] * self.vmax_std + self.vmax_mean
        return (out, acts) if return_activations else out


# --------------------------------------------------------------------------
# construction


def _init_params(net: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                nn.init.trunc_normal_(m.weight, 0.0, INIT_STD, -2 * INIT_STD, 2 * INIT_STD, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            m.reset_parameters()
            m.reset_running_stats()


def build_network(spec: NetworkSpec, image_size: int, rng_seed: int = 0) -> nn.Module:
    kind = spec.kind()
    if kind in ("gen", "disc"):
        if image_size <= 0 or image_size % 64:
            raise SpecMismatchError(f"image size {image_size} is not divisible by 64")
        expected = 3 if kind == "disc" or spec.conditioning == "m2n_channel" else 2
        if spec.in_channels != expected:
            raise SpecMismatchError(f"{spec.name} expects {expected} input channels, spec has {spec.in_channels}")
    elif kind == "regressor":
        if image_size <= 0:
            raise SpecMismatchError("image size must be positive")
    else:
        raise SpecMismatchError(f"unknown network kind for {spec.name!r}")

    if kind == "gen":
        net = Generator(spec)
    elif kind == "disc":
        net = Discriminator(spec, image_size)
    else:
        net = Regressor(spec, image_size)
    _init_params(net, rng_seed)
    net.image_size = int(image_size)
    net.trainable = True
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def set_trainable(net: nn.Module, flag: bool):
    net.trainable = bool(flag)
    for p in net.parameters():
        p.requires_grad_(flag)


# --------------------------------------------------------------------------
# forward helpers on separate channels


def _as_batch(a) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(a)
    if t.dim() == 2:
        return t[None], True
    if t.dim() == 3:
        return t, False
    raise ValueError(f"expected [H, W] or [B, H, W], got shape {tuple(t.shape)}")


def generator_input(ir1, wv, m2n_cond=None, conditioning: str = "none") -> torch.Tensor:
    ir1, _ = _as_batch(ir1)
    wv, _ = _as_batch(wv)
    if ir1.shape != wv.shape:
        raise ValueError(f"ir1 {tuple(ir1.shape)} and wv {tuple(wv.shape)} differ in shape")
    chans = [ir1, wv]
    if conditioning == "m2n_channel":
        if m2n_cond is None:
            raise ValueError("VIS generator needs an m2n condition")
        m = torch.as_tensor(m2n_cond, dtype=ir1.dtype).reshape(-1)
        if m.numel() == 1:
            m = m.expand(ir1.shape[0])
        if torch.any(m < 0) or torch.any(m > M2N_SCALE):
            raise ValueError("m2n condition must lie in [0, 300]")
        chans.append((m / M2N_SCALE)[:, None, None].expand_as(ir1))
    elif m2n_cond is not None:
        raise ValueError(f"{conditioning!r} generator takes no m2n condition")
    return torch.stack(chans, dim=1)


def generator_forward(net: Generator, ir1, wv, m2n_cond=None) -> torch.Tensor:
    _, single = _as_batch(ir1)
    x = generator_input(ir1, wv, m2n_cond, net.spec.conditioning)
    out = net(x)[:, 0]
    return out[0] if single else out


def discriminator_forward(net: Discriminator, ir1, wv, target):
    ir1, single = _as_batch(ir1)
    wv, _ = _as_batch(wv)
    target, _ = _as_batch(target)
    if not (ir1.shape == wv.shape == target.shape):
        raise ValueError("discriminator inputs differ in shape")
    patch, m2n = net(torch.stack([ir1, wv, target], dim=1))
    return (patch[0], m2n[0]) if single else (patch, m2n)


def regressor_forward(net: Regressor, ir1, wv, vis, pmw, aux) -> torch.Tensor:
    ir1, single = _as_batch(ir1)
    chans = [ir1] + [_as_batch(c)[0] for c in (wv, vis, pmw)]
    if any(c.shape != ir1.shape for c in chans):
        raise ValueError("regressor channels differ in shape")
    aux = torch.as_tensor(aux)
    if aux.dim() == 1:
        aux = aux[None]
    if aux.shape[-1] != net.spec.aux_features:
        raise ValueError(f"aux must have {net.spec.aux_features} features")
    out = net(torch.stack(chans, dim=1), aux)
    return out[0] if single else out


# --------------------------------------------------------------------------
# auxiliary features


def build_aux(meta: FrameMeta) -> np.ndarray:
    """[sin, cos] day of year, [sin, cos] local hour, one-hot region (WPAC..SH)."""
    local = local_time(meta)
    doy = local.timetuple().tm_yday - 1
    day_angle = 2 * math.pi * doy / 365.25
    hour_angle = 2 * math.pi * (local.hour + local.minute / 60.0) / 24.0
    onehot = [0.0] * len(REGIONS)
    onehot[REGIONS.index(meta.region)] = 1.0
    return np.array(
        [math.sin(day_angle), math.cos(day_angle), math.sin(hour_angle), math.cos(hour_angle), *onehot],
        dtype=np.float32,
    )


# --------------------------------------------------------------------------
# checkpoints


def network_payload(net: nn.Module, stage: str = "") -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "name": net.spec.name,
        "spec": net.spec.to_json(),
        "spec_hash": spec_hash(net.spec, net.image_size),
        "image_size": net.image_size,
        "stage": stage,
        "state": {k: v.detach().clone() for k, v in net.state_dict().items()},
    }


def network_from_payload(payload: dict, spec: NetworkSpec | None = None, image_size: int | None = None) -> nn.Module:
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise SpecMismatchError("unsupported checkpoint format/version")
    stored = NetworkSpec.from_json(payload["spec"])
    if spec_hash(stored, payload["image_size"]) != payload["spec_hash"]:
        raise SpecMismatchError("checkpoint spec hash does not match its stored spec")
    if spec is not None or image_size is not None:
        want = spec_hash(spec or stored, image_size or payload["image_size"])
        if want != payload["spec_hash"]:
            raise SpecMismatchError(
                f"spec-hash mismatch: checkpoint {payload['name']} built for image size "
                f"{payload['image_size']} does not match the requested configuration")
    net = build_network(stored, payload["image_size"])
    net.load_state_dict(payload["state"])
    net.stage = payload.get("stage", "")
    return net


def save_network(path, net: nn.Module, stage: str = ""):
    buf = io.BytesIO()
    torch.save(network_payload(net, stage), buf)
    Path(path).write_bytes(buf.getvalue())


def load_network(path, spec: NetworkSpec | None = None, image_size: int | None = None) -> nn.Module:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    return network_from_payload(payload, spec, image_size)


def receptive_field(layers: Sequence[LayerSpec]) -> int:
    """Nominal receptive field (pixels) of one output unit of a conv stack."""
    r, jump = 1, 1
    for l in layers:
        if l.op != "conv":
            break
        r += (l.kernel[0] - 1) * jump
        jump *= l.stride[0]
    return r
