"""Loss contracts: direct-summation oracles, the margin profile's exact
values, margin-free degeneracy, and finite-difference gradients."""

import numpy as np
import pytest

from spkver.autodiff import Tensor, grad_check
from spkver.objectives import (LambdaSchedule, MarginConfig, asoftmax_loss,
                               psi_of_cos, softmax_ce)


def unit_columns(w):
    return w / np.linalg.norm(w, axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# softmax cross-entropy


def test_softmax_uniform_logits():
    k = 6
    loss = softmax_ce(Tensor(np.zeros((3, k))), [0, 3, 5])
    assert loss.data == pytest.approx(np.log(k), abs=1e-12)


def test_softmax_saturated():
    logits = np.zeros((1, 4))
    logits[0, 2] = 80.0
    assert float(softmax_ce(Tensor(logits), [2]).data) < 1e-12


def test_softmax_matches_direct_oracle():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((4, 6)) * 3
    labels = rng.integers(0, 6, size=4)
    loss = float(softmax_ce(Tensor(z), labels).data)
    direct = 0.0
    for i in range(4):
        p = np.exp(z[i]) / np.exp(z[i]).sum()
        direct -= np.log(p[labels[i]])
    assert loss == pytest.approx(direct / 4, abs=1e-12)


def test_softmax_label_out_of_range():
    with pytest.raises(ValueError, match="invalid label"):
        softmax_ce(Tensor(np.zeros((2, 3))), [0, 3])


def test_softmax_gradient():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=5)
    assert grad_check(lambda: softmax_ce(logits, labels), {"z": logits}) < 1e-4


# ---------------------------------------------------------------------------
# margin profile


def test_psi_m2_quarter_pi():
    assert psi_of_cos(np.cos(np.pi / 4), 2) == pytest.approx(0.0, abs=1e-12)
    assert psi_of_cos(1.0, 2) == pytest.approx(1.0)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_psi_matches_piecewise_formula_on_grid(m):
    theta = np.linspace(0, np.pi, 10_000)
    k = np.minimum(np.floor(theta * m / np.pi), m - 1)
    direct = (-1.0) ** k * np.cos(m * theta) - 2.0 * k
    ours = psi_of_cos(np.cos(theta), m)
    assert np.allclose(ours, direct, atol=1e-9)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_psi_continuous_and_nonincreasing(m):
    theta = np.linspace(0, np.pi, 10_000)
    values = psi_of_cos(np.cos(theta), m)
    diffs = np.diff(values)
    assert np.all(diffs <= 1e-12)                       # non-increasing in theta
    assert np.max(np.abs(diffs)) < 5e-3                 # no jumps on a fine grid


# ---------------------------------------------------------------------------
# angular-margin loss


def test_margin_free_equals_cosine_softmax():
    rng = np.random.default_rng(2)
    for _ in range(20):
        b, d, n = 5, 8, 4
        x = rng.standard_normal((b, d)) * 2
        w = rng.standard_normal((d, n))
        labels = rng.integers(0, n, size=b)
        ours = float(asoftmax_loss(Tensor(x), Tensor(w), labels,
                                   MarginConfig(m=1, anneal_lambda=0.0)).data)
        ref = float(softmax_ce(Tensor(x @ unit_columns(w)), labels).data)
        assert abs(ours - ref) < 1e-10


def test_asoftmax_matches_arccos_oracle():
    """Brute force: angles via arccos, margin profile on the target class,
    plain cosine terms elsewhere, summed straight from the definition."""
    rng = np.random.default_rng(3)
    b, d, n = 3, 6, 2
    x = rng.standard_normal((b, d)) * 1.5
    w = rng.standard_normal((d, n))
    labels = rng.integers(0, n, size=b)
    m = 3

    w_hat = unit_columns(w)
    direct = 0.0
    for i in range(b):
        xn = np.linalg.norm(x[i])
        cos = x[i] @ w_hat / xn
        theta = np.arccos(np.clip(cos, -1, 1))
        k = min(int(np.floor(theta[labels[i]] * m / np.pi)), m - 1)
        psi = (-1.0) ** k * np.cos(m * theta[labels[i]]) - 2 * k
        logits = xn * cos
        logits[labels[i]] = xn * psi
        direct += -np.log(np.exp(logits[labels[i]]) / np.exp(logits).sum())
    direct /= b

    ours = float(asoftmax_loss(Tensor(x), Tensor(w), labels, MarginConfig(m=m)).data)
    assert ours == pytest.approx(direct, abs=1e-10)


def test_asoftmax_annealed_target_logit():
    rng = np.random.default_rng(4)
    b, d, n = 4, 5, 3
    x = rng.standard_normal((b, d))
    w = rng.standard_normal((d, n))
    labels = rng.integers(0, n, size=b)
    lam = 7.0
    w_hat = unit_columns(w)
    direct = 0.0
    for i in range(b):
        xn = np.linalg.norm(x[i])
        cos = x[i] @ w_hat / xn
        psi = psi_of_cos(cos[labels[i]], 2)
        logits = xn * cos
        logits[labels[i]] = xn * (psi + lam * cos[labels[i]]) / (1 + lam)
        direct += -np.log(np.exp(logits[labels[i]]) / np.exp(logits).sum())
    ours = float(asoftmax_loss(Tensor(x), Tensor(w), labels,
                               MarginConfig(m=2, anneal_lambda=lam)).data)
    assert ours == pytest.approx(direct / b, abs=1e-10)


def test_asoftmax_invariant_to_column_rescaling():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 8))
    w = rng.standard_normal((8, 5))
    labels = rng.integers(0, 5, size=6)
    cfg = MarginConfig(m=2)
    base = float(asoftmax_loss(Tensor(x), Tensor(w), labels, cfg).data)
    scaled = w * rng.uniform(0.1, 10.0, size=5)[None, :]
    rescaled = float(asoftmax_loss(Tensor(x), Tensor(scaled), labels, cfg).data)
    assert abs(base - rescaled) < 1e-10


def test_margin_two_never_easier_than_margin_one():
    """With every target angle inside (0, pi/2), the m=2 loss dominates."""
    rng = np.random.default_rng(6)
    checked = 0
    while checked < 50:
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((5, 4))
        labels = rng.integers(0, 4, size=3)
        w_hat = unit_columns(w)
        cos_t = np.array([x[i] @ w_hat[:, labels[i]] / np.linalg.norm(x[i])
                          for i in range(3)])
        if not np.all((cos_t > 1e-6) & (cos_t < 1 - 1e-6)):
            continue
        l1 = float(asoftmax_loss(Tensor(x), Tensor(w), labels, MarginConfig(m=1)).data)
        l2 = float(asoftmax_loss(Tensor(x), Tensor(w), labels, MarginConfig(m=2)).data)
        assert l2 >= l1 - 1e-12
        checked += 1


@pytest.mark.parametrize("m,lam", [(1, 0.0), (2, 0.0), (3, 0.5), (4, 2.0)])
def test_asoftmax_gradient_away_from_boundaries(m, lam):
    rng = np.random.default_rng(7 + m)
    b, d, n = 4, 6, 3
    while True:
        x = rng.standard_normal((b, d))
        w = rng.standard_normal((d, n))
        labels = rng.integers(0, n, size=b)
        cos_t = np.array([x[i] @ unit_columns(w)[:, labels[i]] / np.linalg.norm(x[i])
                          for i in range(b)])
        theta = np.arccos(np.clip(cos_t, -1, 1))
        bounds = np.arange(m + 1) * np.pi / m
        if np.min(np.abs(theta[:, None] - bounds[None, :])) > 1e-3:
            break
    xt = Tensor(x, requires_grad=True)
    wt = Tensor(w, requires_grad=True)
    cfg = MarginConfig(m=m, anneal_lambda=lam)
    err = grad_check(lambda: asoftmax_loss(xt, wt, labels, cfg), {"x": xt, "w": wt})
    assert err < 1e-4


def test_asoftmax_degenerate_inputs():
    x = np.ones((2, 3))
    x[1] = 0.0
    with pytest.raises(ValueError, match="degenerate feature vector"):
        asoftmax_loss(Tensor(x), Tensor(np.ones((3, 2))), [0, 1], MarginConfig())
    w = np.ones((3, 2))
    w[:, 1] = 0.0
    with pytest.raises(ValueError, match="degenerate classifier column"):
        asoftmax_loss(Tensor(np.ones((2, 3))), Tensor(w), [0, 1], MarginConfig())


def test_margin_config_validation():
    with pytest.raises(ValueError):
        MarginConfig(m=5)
    with pytest.raises(ValueError):
        MarginConfig(m=2, anneal_lambda=-1.0)


def test_lambda_schedule():
    sched = LambdaSchedule(start=1000.0, decay=0.99, floor=5.0)
    assert sched.value(0) == 1000.0
    assert sched.value(1) == pytest.approx(990.0)
    assert sched.value(10_000) == 5.0
