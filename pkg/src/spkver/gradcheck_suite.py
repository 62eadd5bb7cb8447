"""Finite-difference gradient checks for every primitive op and both
full extractor architectures.

Each check rebuilds a small graph ending in a scalar loss and compares the
reverse-mode gradients of the listed parameters against central
differences.  Inputs are drawn away from activation kinks so the
comparison is well defined.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import models as md
from .autodiff import Tensor, grad_check
from .objectives import MarginConfig, asoftmax_loss, softmax_ce

TOLERANCE = 1e-4


def _quadratic(out: Tensor) -> Tensor:
    flat = out.data.reshape(-1)
    coeffs = np.linspace(0.3, 1.1, flat.size)

    def backward(g):
        out.accumulate_grad(float(g) * (coeffs * flat).reshape(out.data.shape))

    return Tensor(0.5 * float(coeffs @ (flat ** 2)), parents=(out,), backward=backward)


def op_checks(seed: int = 0, samples: int | None = None):
    """(name, loss_fn, params) triples covering each primitive op."""
    rng = np.random.default_rng(seed)
    checks = []

    x = Tensor(rng.standard_normal((5, 7)), requires_grad=True, name="x")
    w = Tensor(rng.standard_normal((7, 4)) * 0.5, requires_grad=True, name="w")
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True, name="b")
    checks.append(("affine", lambda: _quadratic(ad.affine(x, w, b)), [x, w, b]))

    xt = Tensor(rng.standard_normal((12, 3)), requires_grad=True, name="xt")
    wt = Tensor(rng.standard_normal((9, 5)) * 0.4, requires_grad=True, name="wt")
    bt = Tensor(rng.standard_normal(5) * 0.1, requires_grad=True, name="bt")
    checks.append(("time_delay",
                   lambda: _quadratic(ad.time_delay(xt, wt, bt, context=3, dilation=2)),
                   [xt, wt, bt]))

    xp = Tensor(rng.standard_normal((10, 8)), requires_grad=True, name="xp")
    checks.append(("max_pool_2x2", lambda: _quadratic(ad.max_pool_2x2(xp)), [xp]))
    checks.append(("max_pool_time", lambda: _quadratic(ad.max_pool_time(xp)), [xp]))

    xr = Tensor(rng.standard_normal((6, 5)), requires_grad=True, name="xr")
    slope = Tensor(np.full(5, 0.25), requires_grad=True, name="slope")
    checks.append(("prelu", lambda: _quadratic(ad.prelu(xr, slope)), [xr, slope]))

    xm = Tensor(rng.standard_normal((6, 8)), requires_grad=True, name="xm")
    checks.append(("mfm", lambda: _quadratic(ad.mfm(xm)), [xm]))

    xs = Tensor(rng.standard_normal((7, 4)), requires_grad=True, name="xs")
    checks.append(("stats_pool", lambda: _quadratic(ad.stats_pool(xs)), [xs]))

    logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True, name="logits")
    labels = rng.integers(0, 6, size=4)
    checks.append(("softmax_ce", lambda: softmax_ce(logits, labels), [logits]))

    feats = Tensor(rng.standard_normal((5, 8)), requires_grad=True, name="feats")
    weights = Tensor(rng.standard_normal((8, 4)), requires_grad=True, name="weights")
    alabels = rng.integers(0, 4, size=5)
    cfg = MarginConfig(m=2, anneal_lambda=0.5)
    checks.append(("asoftmax", lambda: asoftmax_loss(feats, weights, alabels, cfg),
                   [feats, weights]))
    return checks


def full_net_checks(frames: int = 50, seed: int = 0):
    """Full architectures driven to a cross-entropy loss."""
    rng = np.random.default_rng(seed)
    checks = []
    for arch_name, model in (
        ("maxpool_net", md.build_maxpool_net(n_spk=4, seed=seed)),
        ("res_net", md.build_res_net(3, n_spk=4, seed=seed)),
    ):
        feats = rng.standard_normal((max(frames, md.receptive_field(model) + 8), 23))
        labels = np.array([1])

        def loss_fn(model=model, feats=feats, labels=labels):
            emb = md.embed_graph(model, feats)
            return softmax_ce(md.classifier_graph(model, emb), labels)

        checks.append((arch_name, loss_fn, model.params))
    return checks


def run_suite(frames: int = 50, samples: int = 4, seed: int = 0, log=None) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    rng = np.random.default_rng(seed + 1)
    for name, loss_fn, params in op_checks(seed):
        err = grad_check(loss_fn, _named(params), n_samples=None, rng=rng)
        failures += _report(log, name, err)
    for name, loss_fn, params in full_net_checks(frames, seed):
        err = grad_check(loss_fn, params, n_samples=samples, rng=rng)
        failures += _report(log, name, err)
    return failures


def _named(tensors):
    return {t.name or f"p{i}": t for i, t in enumerate(tensors)}


def _report(log, name, err) -> int:
    ok = err < TOLERANCE
    if log is not None:
        log(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e}")
    return 0 if ok else 1
