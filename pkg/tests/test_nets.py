import json
import math
from datetime import datetime
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridtc import nets as N
from hybridtc.dataset import REGIONS, FrameMeta
from oracles.param_oracle import all_counts

GOLDEN = json.loads((Path(__file__).parent / "golden" / "param_counts.json").read_text())


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed))


# -- specs ----------------------------------------------------------------------


def test_generator_table():
    spec = N.generator_spec("gen_pmw")
    rows = spec.layers
    assert len(rows) == 13
    assert [r.out_dim for r in rows] == [32, 64, 128, 256, 256, 256, 256, 256, 256, 128, 64, 32, 1]
    assert [r.op for r in rows] == ["conv"] * 6 + ["trans_conv"] * 6 + ["conv"]
    assert all(r.kernel == (4, 4) for r in rows)
    assert [r.stride for r in rows] == [(2, 2)] * 12 + [(1, 1)]
    assert [r.batch_norm for r in rows] == [False] + [True] * 11 + [False]
    assert [r.activation for r in rows] == ["leaky_relu"] * 6 + ["relu"] * 7
    assert [r.dropout for r in rows] == [0.0] * 6 + [0.5, 0.5] + [0.0] * 5
    assert {i: r.skip_to for i, r in enumerate(rows) if r.skip_to is not None} == {0: 11, 1: 10, 2: 9, 3: 8, 4: 7}
    assert spec.in_channels == 2 and spec.conditioning == "none"
    vis = N.generator_spec("gen_vis")
    assert vis.in_channels == 3 and vis.conditioning == "m2n_channel"


def test_discriminator_table():
    rows = N.discriminator_spec("disc_vis").layers
    groups = {g: [r for r in rows if r.group == g] for g in ("shared", "m2n", "patch")}
    assert [r.out_dim for r in groups["shared"]] == [32, 64, 128]
    assert [r.batch_norm for r in groups["shared"]] == [False, True, True]
    assert all(r.activation == "leaky_relu" and r.stride == (2, 2) for r in groups["shared"])
    assert [(r.op, r.out_dim) for r in groups["m2n"]] == [("conv", 128), ("conv", 256), ("linear", 128), ("linear", 1)]
    assert [(r.op, r.out_dim, r.stride) for r in groups["patch"]] == [("conv", 256, (1, 1)), ("conv", 1, (1, 1))]
    assert groups["patch"][-1].activation == "none" and groups["m2n"][-1].activation == "none"


def test_regressor_table():
    rows = N.regressor_spec().layers
    assert rows[0].op == "batch_norm"
    convs = [r for r in rows if r.op == "conv"]
    assert [r.out_dim for r in convs] == [16, 32, 64, 128]
    assert [r.kernel for r in convs] == [(4, 4), (3, 3), (3, 3), (3, 3)]
    assert [r.out_dim for r in rows if r.op == "linear"] == [256, 64, 1]
    assert N.regressor_spec().aux_features == 10


def test_layer_spec_invariants():
    with pytest.raises(ValueError):
        N.LayerSpec("conv", 8)
    with pytest.raises(ValueError):
        N.LayerSpec("linear", 8, kernel=(3, 3), stride=(1, 1))
    with pytest.raises(ValueError):
        N.LayerSpec("linear", 8, dropout=1.5)


def test_spec_json_round_trip():
    for name in N.NETWORK_NAMES:
        spec = N.default_spec(name)
        assert N.NetworkSpec.from_json(spec.to_json()) == spec


# -- construction ---------------------------------------------------------------


@pytest.mark.parametrize("key", sorted(GOLDEN))
def test_param_counts_golden(key):
    size, width = key.split("/")
    for name, expected in GOLDEN[key].items():
        net = N.build_network(N.default_spec(name, float(width)), int(size))
        assert N.param_count(net) == expected, name


def test_golden_matches_hand_oracle():
    assert all_counts() == GOLDEN


def test_param_count_is_pure():
    a = N.build_network(N.default_spec("gen_pmw"), 64, rng_seed=1)
    b = N.build_network(N.default_spec("gen_pmw"), 64, rng_seed=2)
    assert N.param_count(a) == N.param_count(b)


def test_build_deterministic():
    a = N.build_network(N.default_spec("gen_pmw", 0.25), 64, rng_seed=5)
    b = N.build_network(N.default_spec("gen_pmw", 0.25), 64, rng_seed=5)
    c = N.build_network(N.default_spec("gen_pmw", 0.25), 64, rng_seed=6)
    for (k, va), vb, vc in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(va, vb), k
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


def test_init_truncated_normal():
    net = N.build_network(N.default_spec("gen_pmw"), 64)
    w = torch.cat([m.weight.detach().flatten() for m in net.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))])
    assert w.abs().max() <= 2 * N.INIT_STD
    assert abs(float(w.std()) - 0.0176) < 0.001  # std of N(0, 0.02) truncated at 2 sigma
    biases = [m.bias for m in net.modules() if isinstance(m, torch.nn.Conv2d) and m.bias is not None]
    assert all(not b.any() for b in biases)


@pytest.mark.parametrize("size", [32, 96, 100])
def test_indivisible_size_rejected(size):
    for name in ("gen_pmw", "disc_pmw"):
        with pytest.raises(N.SpecMismatchError):
            N.build_network(N.default_spec(name), size)


def test_spec_size_mismatch_rejected():
    bad = N.NetworkSpec("gen_pmw", N.generator_spec().layers, in_channels=3)
    with pytest.raises(N.SpecMismatchError):
        N.build_network(bad, 64)


# -- generator ------------------------------------------------------------------


@pytest.fixture(scope="module")
def gen_vis():
    return N.build_network(N.default_spec("gen_vis", 0.25), 64, rng_seed=3).eval()


def test_generator_shape_ladder(gen_vis):
    x = N.generator_input(rand(2, 64, 64), rand(2, 64, 64, seed=1), torch.tensor([0.0, 100.0]), "m2n_channel")
    _, acts = gen_vis(x, return_activations=True)
    sizes = [a.shape[-1] for a in acts]
    assert sizes == [32, 16, 8, 4, 2, 1, 2, 4, 8, 16, 32, 64, 64]
    assert acts[5].shape[-2:] == (1, 1)  # bottleneck
    assert acts[-1].shape[1] == 1


def test_generator_output_shape_and_nonnegative(gen_vis):
    out = N.generator_forward(gen_vis, rand(3, 64, 64), rand(3, 64, 64, seed=1), torch.full((3,), 150.0))
    assert out.shape == (3, 64, 64)
    assert out.min() >= 0
    single = N.generator_forward(gen_vis, rand(64, 64), rand(64, 64, seed=1), 0.0)
    assert single.shape == (64, 64)


def test_generator_128():
    net = N.build_network(N.default_spec("gen_pmw", 0.125), 128).eval()
    assert N.generator_forward(net, rand(1, 128, 128), rand(1, 128, 128)).shape == (1, 128, 128)


def test_conditioning_reaches_output(gen_vis):
    ir1, wv = rand(2, 64, 64), rand(2, 64, 64, seed=1)
    a = N.generator_forward(gen_vis, ir1, wv, 0.0)
    b = N.generator_forward(gen_vis, ir1, wv, 300.0)
    assert not torch.allclose(a, b)


def test_conditioning_contract(gen_vis):
    pmw = N.build_network(N.default_spec("gen_pmw", 0.25), 64)
    ir1 = rand(1, 64, 64)
    with pytest.raises(ValueError):
        N.generator_forward(gen_vis, ir1, ir1)
    with pytest.raises(ValueError):
        N.generator_forward(pmw, ir1, ir1, 10.0)
    for bad in (-1.0, 301.0):
        with pytest.raises(ValueError):
            N.generator_forward(gen_vis, ir1, ir1, bad)
    with pytest.raises(ValueError):
        N.generator_forward(pmw, ir1, rand(1, 32, 32))


def test_conditioning_channel_value():
    x = N.generator_input(torch.zeros(2, 4, 4), torch.zeros(2, 4, 4), torch.tensor([0.0, 150.0]), "m2n_channel")
    assert x.shape == (2, 3, 4, 4)
    assert torch.all(x[0, 2] == 0) and torch.all(x[1, 2] == 0.5)


@pytest.mark.parametrize("k", [0, 1, 2, 3, 4])
def test_skip_wiring(gen_vis, k):
    x = N.generator_input(rand(1, 64, 64), rand(1, 64, 64, seed=1), torch.tensor([60.0]), "m2n_channel")
    _, base = gen_vis(x, return_activations=True)
    _, cut = gen_vis(x, return_activations=True, drop_skip=k)
    target = 11 - k
    # everything before the skip target is untouched, the target changes
    for i in range(target):
        assert torch.equal(base[i], cut[i]), i
    assert not torch.allclose(base[target], cut[target])


def test_dropout_only_in_rows_6_and_7():
    net = N.build_network(N.default_spec("gen_pmw"), 64)
    rows = [i for i, b in enumerate(net.blocks) if b.drop is not None]
    assert rows == [6, 7]
    assert all(net.blocks[i].drop.p == 0.5 for i in rows)


def test_final_activations():
    g = N.build_network(N.default_spec("gen_pmw"), 64)
    assert isinstance(g.blocks[-1].act, torch.nn.ReLU)
    assert g.blocks[-1].op[1].stride == (1, 1)
    d = N.build_network(N.default_spec("disc_pmw"), 64)
    assert isinstance(d.patch[-1].act, torch.nn.Identity)
    assert isinstance(d.m2n[-1].act, torch.nn.Identity)
    r = N.build_network(N.default_spec("regressor"), 64)
    assert isinstance(r.head[-1].act, torch.nn.Identity)


# -- discriminator --------------------------------------------------------------


@pytest.fixture(scope="module")
def disc():
    return N.build_network(N.default_spec("disc_vis", 0.25), 64, rng_seed=4).eval()


def test_patch_map_size(disc):
    patch, m2n = N.discriminator_forward(disc, rand(2, 64, 64), rand(2, 64, 64, seed=1), rand(2, 64, 64, seed=2))
    assert patch.shape == (2, 8, 8)
    assert m2n.shape == (2,)
    big = N.build_network(N.default_spec("disc_pmw", 0.25), 128).eval()
    assert N.discriminator_forward(big, rand(1, 128, 128), rand(1, 128, 128), rand(1, 128, 128))[0].shape == (1, 16, 16)


def test_discriminator_pure(disc):
    args = rand(1, 64, 64), rand(1, 64, 64, seed=1), rand(1, 64, 64, seed=2)
    p1, m1 = N.discriminator_forward(disc, *args)
    p2, m2 = N.discriminator_forward(disc, *args)
    assert torch.equal(p1, p2) and torch.equal(m1, m2)


def test_discriminator_input_order(disc):
    a, b, c = rand(1, 64, 64), rand(1, 64, 64, seed=1), rand(1, 64, 64, seed=2)
    patch, _ = N.discriminator_forward(disc, a, b, c)
    direct, _ = disc(torch.stack([a, b, c], dim=1))
    assert torch.equal(patch, direct)


def test_discriminator_shape_mismatch(disc):
    with pytest.raises(ValueError):
        N.discriminator_forward(disc, rand(1, 64, 64), rand(1, 64, 64), rand(1, 32, 32))


def test_m2n_head_uses_shared_features(disc):
    """Both heads see the same shared activations; the m2n head ends in a scalar."""
    x = torch.stack([rand(2, 64, 64), rand(2, 64, 64, seed=1), rand(2, 64, 64, seed=2)], dim=1)
    _, _, acts = disc(x, return_activations=True)
    shared = acts[2]
    assert shared.shape[-1] == 8
    m = shared
    for b in disc.m2n:
        m = b(m.flatten(1) if b.layer.op == "linear" and m.dim() > 2 else m)
    assert torch.allclose(m[:, 0] * 300, disc(x)[1])


def test_patch_receptive_field_smaller_than_image():
    rows = N.discriminator_spec().layers
    path = [r for r in rows if r.group in ("shared", "patch")]
    rf = N.receptive_field(path)
    assert rf == 70
    # at 128 px (and above) each logit sees a strict sub-window of the frame
    assert rf < 128


def test_receptive_field_empirically():
    """Perturbing a pixel far from a logit's window leaves that logit unchanged."""
    d = N.build_network(N.default_spec("disc_pmw", 0.125), 128, rng_seed=1).eval()
    x = rand(1, 3, 128, 128)
    base = d(x)[0][0, 0, 0]
    y = x.clone()
    y[0, :, 127, 127] += 5.0
    assert d(y)[0][0, 0, 0] == base


# -- regressor ------------------------------------------------------------------


def test_regressor_feature_shape():
    r = N.build_network(N.default_spec("regressor"), 64).eval()
    _, acts = r(rand(2, 4, 64, 64), torch.zeros(2, 10), return_activations=True)
    assert acts[4].shape == (2, 128, 4, 4)


def test_regressor_deterministic_in_eval():
    r = N.build_network(N.default_spec("regressor", 0.25), 64).eval()
    args = [rand(2, 64, 64, seed=s) for s in range(4)] + [torch.rand(2, 10)]
    assert torch.equal(N.regressor_forward(r, *args), N.regressor_forward(r, *args))


def test_regressor_errors():
    r = N.build_network(N.default_spec("regressor", 0.25), 64).eval()
    ch = [rand(1, 64, 64)] * 4
    with pytest.raises(ValueError):
        N.regressor_forward(r, *ch[:3], rand(1, 32, 32), torch.zeros(1, 10))
    with pytest.raises(ValueError):
        N.regressor_forward(r, *ch, torch.zeros(1, 9))


def test_regressor_region_permutation_equivalence():
    r = N.build_network(N.default_spec("regressor", 0.25), 64, rng_seed=9).eval()
    ch = [rand(3, 64, 64, seed=s) for s in range(4)]
    aux = torch.zeros(3, 10)
    aux[:, :4] = torch.rand(3, 4)
    aux[0, 4 + 1] = aux[1, 4 + 3] = aux[2, 4 + 5] = 1
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    before = N.regressor_forward(r, *ch, aux)
    aux_p = aux.clone()
    aux_p[:, 4:] = aux[:, 4:][:, perm]
    first = r.head[0].op
    n_img = first.in_features - 10
    with torch.no_grad():
        w = first.weight.clone()
        first.weight[:, n_img + 4:] = w[:, n_img + 4:][:, perm]
    after = N.regressor_forward(r, *ch, aux_p)
    torch.testing.assert_close(before, after, rtol=0, atol=1e-5)


def test_regressor_output_scaling():
    r = N.build_network(N.default_spec("regressor", 0.25), 64).eval()
    x, aux = rand(2, 4, 64, 64), torch.zeros(2, 10)
    r.set_target_stats(0.0, 1.0)
    raw = r(x, aux)
    r.set_target_stats(50.0, 20.0)
    torch.testing.assert_close(r(x, aux), raw * 20 + 50)


# -- freezing -------------------------------------------------------------------


def test_frozen_network_unchanged_by_backward():
    g = N.build_network(N.default_spec("gen_pmw", 0.25), 64)
    r = N.build_network(N.default_spec("regressor", 0.25), 64)
    N.set_trainable(g, False)
    before = {k: v.clone() for k, v in g.state_dict().items() if "running" not in k and "num_batches" not in k}
    out = N.generator_forward(g, rand(2, 64, 64), rand(2, 64, 64, seed=1))
    loss = N.regressor_forward(r, out, out, out, out, torch.zeros(2, 10)).sum()
    loss.backward()
    opt = torch.optim.Adam([p for p in g.parameters() if p.requires_grad] + list(r.parameters()))
    opt.step()
    assert all(p.grad is None for p in g.parameters())
    for k, v in g.state_dict().items():
        if k in before:
            assert torch.equal(v, before[k]), k


# -- aux features ---------------------------------------------------------------


def meta(t, lon=0.0, region="WPAC"):
    return FrameMeta("T", t, lon, 10.0, region, 50.0)


def test_aux_region_onehot():
    for k, reg in enumerate(REGIONS):
        a = N.build_aux(meta(datetime(2010, 1, 1), region=reg))
        assert a.shape == (10,)
        assert a[4 + k] == 1 and a[4:].sum() == 1
    assert REGIONS[0] == "WPAC"


def test_aux_local_noon():
    a = N.build_aux(meta(datetime(2010, 6, 1, 4, 0), lon=120.0))
    assert a[3] == pytest.approx(math.cos(2 * math.pi * 12 / 24))
    assert a[3] == pytest.approx(-1.0)
    assert a[2] == pytest.approx(0.0, abs=1e-6)


def test_aux_year_periodic():
    a = N.build_aux(meta(datetime(2010, 1, 1, 12)))
    b = N.build_aux(meta(datetime(2010, 12, 31, 12)))
    # the two dates sit 1.25 days apart on the annual circle; bound by the two-day chord
    assert np.linalg.norm(a[:2] - b[:2]) < 2 * math.sin(math.pi * 2 / 365.25)


@settings(max_examples=50, deadline=None)
@given(st.datetimes(min_value=datetime(2000, 1, 1), max_value=datetime(2020, 12, 31)),
       st.floats(-180, 180), st.sampled_from(REGIONS))
def test_aux_invariants(t, lon, region):
    a = N.build_aux(meta(t.replace(second=0, microsecond=0), lon, region)).astype(np.float64)
    assert a[0] ** 2 + a[1] ** 2 == pytest.approx(1, abs=1e-6)
    assert a[2] ** 2 + a[3] ** 2 == pytest.approx(1, abs=1e-6)
    assert a[4:].sum() == 1 and set(a[4:]) <= {0.0, 1.0}


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    net = N.build_network(N.default_spec("disc_vis", 0.25), 64, rng_seed=2)
    N.save_network(tmp_path / "a.pt", net, stage="stage2")
    back = N.load_network(tmp_path / "a.pt")
    assert back.stage == "stage2" and back.image_size == 64
    for (k, a), b in zip(net.state_dict().items(), back.state_dict().values()):
        assert torch.equal(a, b), k
    N.save_network(tmp_path / "b.pt", back, stage="stage2")
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()


def test_checkpoint_size_mismatch(tmp_path):
    net = N.build_network(N.default_spec("gen_pmw", 0.25), 64)
    N.save_network(tmp_path / "g.pt", net)
    with pytest.raises(N.SpecMismatchError):
        N.load_network(tmp_path / "g.pt", image_size=128)
    with pytest.raises(N.SpecMismatchError):
        N.load_network(tmp_path / "g.pt", spec=N.default_spec("gen_pmw", 0.5))
