import time

import pytest
import torch
from torch import nn

from oracles import fd

TOL = 1e-4


@pytest.fixture(scope="module")
def fd_report():
    t0 = time.perf_counter()
    report = fd.run_all(seed=0)
    return report, time.perf_counter() - t0


@pytest.mark.parametrize("case", [c[0] for c in fd.CASES])
def test_composite_gradient_matches_finite_differences(fd_report, case):
    report, _ = fd_report
    worst, checked, _ = report[case]
    assert checked > 0
    assert worst < TOL, f"{case}: relative error {worst:.3g}"


def test_gradient_check_runtime(fd_report):
    assert fd_report[1] < 120


def test_surrogate_replaces_every_kinked_activation():
    nets, _ = fd.toy_setup(0)
    for net in nets.values():
        assert not any(isinstance(m, (nn.ReLU, nn.LeakyReLU)) for m in net.modules())
    raw, _ = fd.toy_setup(0, smooth=False)
    assert any(isinstance(m, nn.LeakyReLU) for m in raw["gen_vis"].modules())


class _HalfBackward(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return 0.5 * g


def test_oracle_detects_a_wrong_backward(monkeypatch):
    """Halving the gradient of one loss term must push the error far past tolerance."""
    real_l2 = fd.loss_l2
    monkeypatch.setattr(fd, "loss_l2", lambda a, b: _HalfBackward.apply(real_l2(a, b)))
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        nets, d = fd.toy_setup(1)
        worst, _, _ = fd.check(fd.composite_G, nets, d, "pmw", "gen_pmw", candidates=1)
    finally:
        torch.set_default_dtype(prev)
    assert worst > 1e-2
