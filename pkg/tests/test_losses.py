import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mensa.adaptation import Strategy
from mensa.losses import (
    LossWeights,
    MMDConfig,
    ScheduleConfig,
    adv_loss,
    ce_class,
    ce_class_per_sample,
    domain_confusion_loss,
    eta_schedule,
    median_bandwidths,
    mixup_loss,
    mmd_over_targets,
    rbf_mmd,
    soft_bce_domain,
    soft_ce,
    total_loss,
)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


# --- classification ------------------------------------------------------------


def test_ce_examples():
    assert float(ce_class(t([[1.0, 0, 0]]), [0])) <= 1e-11
    assert abs(float(ce_class(torch.full((4, 10), 0.1, dtype=D), [0, 3, 5, 9])) - math.log(10)) < 1e-6
    p = t([[0.7, 0.3], [0.2, 0.8]])
    a, b = -math.log(0.7), -math.log(0.8)
    assert abs(float(ce_class(p, [0, 1])) - (a + b) / 2) < 1e-12
    with pytest.raises(ValueError):
        ce_class(p, [0, 2])
    assert ce_class_per_sample(p, [0, 1]).shape == (2,)


def test_soft_bce_examples():
    assert abs(float(soft_bce_domain(t([0.5]), 0.5)) - math.log(2)) < 1e-6
    assert float(soft_bce_domain(t([1.0]), 1.0)) <= 1e-11
    grid = np.linspace(0.01, 0.99, 99)
    vals = [float(soft_bce_domain(t([p]), 0.3)) for p in grid]
    assert abs(grid[int(np.argmin(vals))] - 0.3) < 1e-9


def test_soft_ce_distribution_target():
    probs = t([[0.25, 0.25, 0.5]])
    want = -(0.25 * math.log(0.25) * 2 + 0.5 * math.log(0.5))
    assert abs(float(soft_ce(probs, t([0.25, 0.25, 0.5]))) - want) < 1e-12


# --- domain confusion and mixup -----------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 5])
def test_dc_half_scores(n):
    half = torch.full((6,), 0.5, dtype=D)
    assert abs(float(domain_confusion_loss(half, [half] * n)) - 2 * math.log(2)) < 1e-6


def test_dc_examples():
    assert float(domain_confusion_loss(torch.ones(4, dtype=D), [torch.zeros(4, dtype=D)])) < 1e-10
    src, t1, t2 = t([0.8, 0.6]), t([0.3, 0.1]), t([0.45, 0.2])
    c = float(soft_bce_domain(src, 1.0))
    a, b = float(soft_bce_domain(t1, 0.0)), float(soft_bce_domain(t2, 0.0))
    assert abs(float(domain_confusion_loss(src, [t1, t2])) - (c + (a + b) / 2)) < 1e-12
    with pytest.raises(ValueError):
        domain_confusion_loss(src, [])


def test_mixup_loss_examples():
    assert float(mixup_loss([torch.ones(3, dtype=D)], [t(1.0)], Strategy.MENSA)) < 1e-10
    assert float(mixup_loss([t([0.4])], [t(0.4)], Strategy.NONE)) == 0.0
    assert abs(float(mixup_loss([t([0.5, 0.5])], [t(0.7)], Strategy.SEP)) - math.log(2)) < 1e-6
    concat = mixup_loss([t([[0.25, 0.25, 0.5]])], [t([0.25, 0.25, 0.5])], Strategy.CONCAT)
    assert abs(float(concat) - float(soft_ce(t([[0.25, 0.25, 0.5]]), t([0.25, 0.25, 0.5])))) < 1e-12


# --- MMD ----------------------------------------------------------------------------


def _naive(X, Y, sigmas):
    def k(a, b, s):
        return math.exp(-sum((p - q) ** 2 for p, q in zip(a, b)) / (2 * s * s))

    X, Y = X.tolist(), Y.tolist()
    return sum(
        sum(k(a, b, s) for a in X for b in X) / len(X) ** 2
        + sum(k(a, b, s) for a in Y for b in Y) / len(Y) ** 2
        - 2 * sum(k(a, b, s) for a in X for b in Y) / (len(X) * len(Y))
        for s in sigmas)


def test_mmd_naive_oracle_median():
    g = torch.Generator().manual_seed(0)
    X = torch.randn(8, 3, dtype=D, generator=g)
    Y = torch.randn(8, 3, dtype=D, generator=g) + 0.5
    sig = [float(s) for s in median_bandwidths(X, Y)]
    assert abs(float(rbf_mmd(X, Y)) - _naive(X, Y, sig)) < 1e-6


def test_mmd_shifted_copy_analytic():
    # Y is X translated far along one axis: the cross term vanishes and, with
    # sigma = 1 in 4 dimensions, each self term tends to
    # 1/m + (1 - 1/m) * E exp(-|x - x'|^2 / 2) = 1/m + (1 - 1/m) / 9
    m = 256
    X = torch.randn(m, 4, dtype=D, generator=torch.Generator().manual_seed(4))
    Y = X + t([10.0, 0, 0, 0])
    value = float(rbf_mmd(X, Y, MMDConfig(bandwidths=(1.0,))))
    expected = 2 * (1 / m + (1 - 1 / m) / 9)
    assert abs(value - expected) < 0.03


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(2, 12))
def test_mmd_properties(seed, m, k):
    g = torch.Generator().manual_seed(seed)
    X = torch.randn(m, 5, dtype=D, generator=g)
    Y = torch.randn(k, 5, dtype=D, generator=g) * 1.5 + 0.3
    for cfg in (None, MMDConfig(bandwidths=(0.5, 1.0, 2.0))):
        assert float(rbf_mmd(X, Y, cfg)) >= 0
        assert abs(float(rbf_mmd(X, Y, cfg)) - float(rbf_mmd(Y, X, cfg))) <= 1e-9
        assert float(rbf_mmd(X, X, cfg)) <= 1e-9


def test_mmd_errors_and_targets():
    X = torch.randn(5, 3, dtype=D)
    with pytest.raises(ValueError):
        rbf_mmd(X[:1], X)
    bad = X.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(ValueError):
        rbf_mmd(bad, X)
    Y1, Y2 = X + 1, X - 2
    avg = (rbf_mmd(X, Y1) + rbf_mmd(X, Y2)) / 2
    assert abs(float(mmd_over_targets(X, [Y1, Y2])) - float(avg)) < 1e-12
    with pytest.raises(ValueError):
        MMDConfig(bandwidths=(1.0, -1.0))


def test_mmd_scale_invariant_with_median():
    g = torch.Generator().manual_seed(3)
    X, Y = torch.randn(10, 4, dtype=D, generator=g), torch.randn(10, 4, dtype=D, generator=g) + 1
    assert abs(float(rbf_mmd(X, Y)) - float(rbf_mmd(7 * X, 7 * Y))) < 1e-9


# --- composition --------------------------------------------------------------------------


def test_adv_examples():
    w = LossWeights()
    assert adv_loss(0, 0, 0, w) == 0
    assert abs(adv_loss(1, 1, 1, w) - 11.2) < 1e-12
    assert abs(adv_loss(0.2, 0.1, 0.5, w) - 2.1) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5))
def test_adv_linear_in_weights(mmd, dc, mix, c):
    w = LossWeights()
    scaled = LossWeights(lambda1=5 * c, lambda2=5 * c, lambda3=1.2 * c)
    assert math.isclose(adv_loss(mmd, dc, mix, scaled), c * adv_loss(mmd, dc, mix, w), rel_tol=1e-12, abs_tol=1e-12)


def test_total_examples():
    w = LossWeights()
    v = t([1.7])
    assert float(total_loss(v, 0.0, 0.0, w, eta=0.0)) == 1.7
    assert abs(float(total_loss(torch.full((64,), 0.3, dtype=D), 0.0, 0.0, w, eta=0.0)) - (0.3 + math.log(64))) < 1e-9
    with pytest.raises(ValueError):
        total_loss(t([1.0, float("inf")]), 0.0, 0.0, w)
    # dc and adv are broadcast onto every sample
    cls = t([0.1, 0.4])
    out = float(total_loss(cls, 2.0, 3.0, LossWeights(zeta=0.5), eta=0.25))
    want = math.log(math.exp(0.1 + 0.5 + 1.5) + math.exp(0.4 + 0.5 + 1.5))
    assert abs(out - want) < 1e-12
    mean = float(total_loss(cls, 2.0, 3.0, LossWeights(zeta=0.5, aggregator="sum"), eta=0.25))
    assert abs(mean - (0.25 + 2.0)) < 1e-12


def test_total_no_overflow():
    assert math.isfinite(float(total_loss(t([1000.0, 999.0]), 0.0, 0.0, LossWeights(), eta=0.0)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=40), st.floats(0.1, 100))
def test_lse_bounds(vals, gamma):
    v = t(vals)
    out = float(total_loss(v, 0.0, 0.0, LossWeights(gamma=gamma), eta=0.0))
    assert out >= max(vals) - 1e-12
    assert out - max(vals) <= math.log(len(vals)) / gamma + 1e-12


def test_lse_sharp_gamma():
    v = torch.rand(50, dtype=D, generator=torch.Generator().manual_seed(0)) * 4
    assert abs(float(total_loss(v, 0.0, 0.0, LossWeights(gamma=100), eta=0.0)) - float(v.max())) < 1e-2


def test_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(gamma=0)
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1)
    with pytest.raises(ValueError):
        LossWeights(aggregator="max")


# --- schedule --------------------------------------------------------------------------


def test_eta_examples():
    assert eta_schedule(ScheduleConfig(N_e=30, e=0)) == 0.1
    assert abs(eta_schedule(ScheduleConfig(N_e=30, e=30)) - 0.9) < 1e-12
    assert abs(eta_schedule(ScheduleConfig(N_e=100, e=50)) - 0.3) < 1e-9
    with pytest.raises(ValueError):
        ScheduleConfig(s=0.9, f=0.1)
    with pytest.raises(ValueError):
        ScheduleConfig(N_e=10, e=11)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1), st.floats(1, 5), st.integers(1, 200))
def test_eta_monotone(s, ratio, n):
    vals = [eta_schedule(ScheduleConfig(s=s, f=s * ratio, N_e=n, e=e)) for e in range(n + 1)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))


# --- gradients against finite differences (B=4, d=8, K=3) --------------------------------


def test_loss_gradients_gradcheck():
    g = torch.Generator().manual_seed(11)
    B, d, K = 4, 8, 3
    logits = torch.randn(B, K, dtype=D, generator=g, requires_grad=True)
    labels = torch.tensor([0, 2, 1, 2])
    X = torch.randn(B, d, dtype=D, generator=g, requires_grad=True)
    Y = (torch.randn(B, d, dtype=D, generator=g) + 0.5).requires_grad_(True)
    s = torch.rand(B, dtype=D, generator=g).mul(0.8).add(0.1).requires_grad_(True)
    v = torch.randn(B, dtype=D, generator=g, requires_grad=True)
    w = LossWeights(gamma=2.0)
    checks = [
        (lambda z: ce_class(torch.softmax(z, -1), labels), (logits,)),
        (lambda p: soft_bce_domain(p, 0.3), (s,)),
        (lambda p: domain_confusion_loss(p, [1 - p]), (s,)),
        (lambda a, b: rbf_mmd(a, b), (X, Y)),
        (lambda a, b: rbf_mmd(a, b, MMDConfig(bandwidths=(0.5, 2.0))), (X, Y)),
        (lambda z: total_loss(z, 0.3, 0.7, w), (v,)),
    ]
    for fn, inputs in checks:
        assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)
