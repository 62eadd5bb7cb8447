"""Reverse-mode automatic differentiation over the op set the extractors need.

Tensors wrap float64 numpy arrays and remember the op that produced them, so
a scalar loss can be backpropagated through the graph.  Only the layouts the
networks use are supported: frame sequences are (T, C) matrices, segment
activations are (B, D) matrices, pooled statistics are 1-D vectors.  There is
no general broadcasting.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Node in a computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar output to every reachable tensor."""
        if self.data.size != 1:
            raise ValueError("loss must be scalar")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape})"


def topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (iterative, acyclic)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as2d(x: Tensor, op: str) -> np.ndarray:
    if x.data.ndim != 2:
        raise ValueError(f"dimension error: {op} expects a 2-D input, got shape {x.data.shape}")
    return x.data


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise x @ w + b."""
    xv = _as2d(x, "affine")
    wv = w.data
    if wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ValueError(
            f"dimension error: affine input width {xv.shape[1]} vs weight {wv.shape}"
        )
    out = xv @ wv
    if b is not None:
        if b.data.shape != (wv.shape[1],):
            raise ValueError("dimension error: bias shape mismatch")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        x.accumulate_grad(g @ wv.T)
        w.accumulate_grad(xv.T @ g)
        if b is not None:
            b.accumulate_grad(g.sum(axis=0))

    return Tensor(out, parents=parents, backward=backward)


def time_delay(x: Tensor, w: Tensor, b: Tensor | None, context: int, dilation: int = 1) -> Tensor:
    """Valid 1-D convolution along frames, expressed as splice + affine.

    Output frame t is an affine map of the concatenation of input frames
    {t, t+d, ..., t+(K-1)d}, so the affine input width is context * C_in.
    """
    xv = _as2d(x, "time_delay")
    t_in, c_in = xv.shape
    span = (context - 1) * dilation + 1
    if t_in < span:
        raise ValueError(f"segment too short: {t_in} frames < receptive span {span}")
    t_out = t_in - (context - 1) * dilation
    spliced = np.concatenate(
        [xv[k * dilation : k * dilation + t_out] for k in range(context)], axis=1
    )
    wv = w.data
    if wv.shape[0] != context * c_in:
        raise ValueError(
            f"dimension error: spliced width {context * c_in} vs weight {wv.shape}"
        )
    out = spliced @ wv
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gs = g @ wv.T
        gx = np.zeros_like(xv)
        for k in range(context):
            gx[k * dilation : k * dilation + t_out] += gs[:, k * c_in : (k + 1) * c_in]
        x.accumulate_grad(gx)
        w.accumulate_grad(spliced.T @ g)
        if b is not None:
            b.accumulate_grad(g.sum(axis=0))

    return Tensor(out, parents=parents, backward=backward)


def max_pool_2x2(x: Tensor) -> Tensor:
    """Max over 2x2 blocks (frame pair x channel pair), stride 2 on both axes.

    A trailing odd frame is dropped.  The gradient is routed to the argmax of
    each block; ties go to the first entry in (frame, channel) scan order.
    """
    xv = _as2d(x, "max_pool_2x2")
    t_in, c_in = xv.shape
    if c_in % 2 != 0:
        raise ValueError("channel count must be even")
    if t_in < 2:
        raise ValueError("segment too short: max pooling needs at least 2 frames")
    t2, c2 = t_in // 2, c_in // 2
    blocks = xv[: 2 * t2].reshape(t2, 2, c2, 2).transpose(0, 2, 1, 3).reshape(t2, c2, 4)
    idx = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, idx[..., None], axis=2)[..., 0]

    def backward(g):
        gb = np.zeros((t2, c2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=2)
        gx = np.zeros_like(xv)
        gx[: 2 * t2] = gb.reshape(t2, c2, 2, 2).transpose(0, 2, 1, 3).reshape(2 * t2, c_in)
        x.accumulate_grad(gx)

    return Tensor(out, parents=(x,), backward=backward)


def max_pool_time(x: Tensor) -> Tensor:
    """Max over frame pairs with stride 2; channels are kept.

    Used where a stack needs time decimation without channel halving.  Ties
    route the gradient to the earlier frame.
    """
    xv = _as2d(x, "max_pool_time")
    t_in, c_in = xv.shape
    if t_in < 2:
        raise ValueError("segment too short: max pooling needs at least 2 frames")
    t2 = t_in // 2
    first = xv[0 : 2 * t2 : 2]
    second = xv[1 : 2 * t2 : 2]
    take_first = first >= second
    out = np.where(take_first, first, second)

    def backward(g):
        gx = np.zeros_like(xv)
        gx[0 : 2 * t2 : 2] = np.where(take_first, g, 0.0)
        gx[1 : 2 * t2 : 2] = np.where(take_first, 0.0, g)
        x.accumulate_grad(gx)

    return Tensor(out, parents=(x,), backward=backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x where x >= 0, slope * x otherwise; one learnable slope per channel."""
    xv = _as2d(x, "prelu")
    av = slope.data
    if av.shape != (xv.shape[1],):
        raise ValueError("dimension error: slope vector length must equal channel dim")
    pos = xv >= 0
    out = np.where(pos, xv, xv * av[None, :])

    def backward(g):
        x.accumulate_grad(g * np.where(pos, 1.0, av[None, :]))
        slope.accumulate_grad((g * np.where(pos, 0.0, xv)).sum(axis=0))

    return Tensor(out, parents=(x, slope), backward=backward)


def mfm(x: Tensor) -> Tensor:
    """Max-feature-map: elementwise max of the two channel halves.

    (., 2C) -> (., C); the gradient goes to the winning half only, ties to
    the first half.
    """
    xv = _as2d(x, "mfm")
    n = xv.shape[1]
    if n % 2 != 0:
        raise ValueError("channel count must be even")
    c = n // 2
    first, second = xv[:, :c], xv[:, c:]
    take_first = first >= second
    out = np.where(take_first, first, second)

    def backward(g):
        gx = np.zeros_like(xv)
        gx[:, :c] = np.where(take_first, g, 0.0)
        gx[:, c:] = np.where(take_first, 0.0, g)
        x.accumulate_grad(gx)

    return Tensor(out, parents=(x,), backward=backward)


def stats_pool(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Concatenate per-channel mean and standard deviation over frames.

    (T, C) -> (2C,).  The epsilon inside sqrt keeps the std branch
    differentiable on constant channels.
    """
    xv = _as2d(x, "stats_pool")
    t_in, c = xv.shape
    mean = xv.mean(axis=0)
    centered = xv - mean
    var = (centered ** 2).mean(axis=0)
    std = np.sqrt(var + eps)
    out = np.concatenate([mean, std])

    def backward(g):
        gm, gs = g[:c], g[c:]
        gx = gm[None, :] / t_in + gs[None, :] * centered / (t_in * std[None, :])
        x.accumulate_grad(gx)

    return Tensor(out, parents=(x,), backward=backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual skip)."""
    if x.data.shape != y.data.shape:
        raise ValueError(f"dimension error: add {x.data.shape} vs {y.data.shape}")

    def backward(g):
        x.accumulate_grad(g)
        y.accumulate_grad(g)

    return Tensor(x.data + y.data, parents=(x, y), backward=backward)


def slice_time(x: Tensor, start: int, length: int) -> Tensor:
    """Contiguous frame slice; the backward pass zero-pads."""
    xv = _as2d(x, "slice_time")
    if start < 0 or start + length > xv.shape[0]:
        raise ValueError("dimension error: slice outside frame range")

    def backward(g):
        gx = np.zeros_like(xv)
        gx[start : start + length] = g
        x.accumulate_grad(gx)

    return Tensor(xv[start : start + length], parents=(x,), backward=backward)


def pad_channels(x: Tensor, out_channels: int) -> Tensor:
    """Zero-pad the channel axis on the right up to ``out_channels``."""
    xv = _as2d(x, "pad_channels")
    c_in = xv.shape[1]
    if out_channels < c_in:
        raise ValueError("dimension error: cannot pad to fewer channels")
    out = np.zeros((xv.shape[0], out_channels))
    out[:, :c_in] = xv

    def backward(g):
        x.accumulate_grad(g[:, :c_in])

    return Tensor(out, parents=(x,), backward=backward)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack 1-D tensors into a (B, D) matrix; the backward pass splits rows."""
    if not rows:
        raise ValueError("dimension error: nothing to stack")
    for r in rows:
        if r.data.ndim != 1:
            raise ValueError("dimension error: stack_rows expects 1-D tensors")
    out = np.stack([r.data for r in rows])

    def backward(g):
        for i, r in enumerate(rows):
            r.accumulate_grad(g[i])

    return Tensor(out, parents=tuple(rows), backward=backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""

    def backward(g):
        x.accumulate_grad(g * factor)

    return Tensor(x.data * factor, parents=(x,), backward=backward)


class ParameterSet:
    """Named trainable tensors plus their per-tensor momentum buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        self.velocity[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for name, t in self._params.items():
            if name not in arrays:
                raise ValueError(f"missing parameter in state: {name}")
            if arrays[name].shape != t.data.shape:
                raise ValueError(f"shape mismatch for parameter {name}")
            t.data = np.asarray(arrays[name], dtype=np.float64).copy()


def grad_check(loss_fn, params, eps: float = 1e-5, n_samples: int | None = None, rng=None) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` rebuilds the graph from scratch and returns the scalar loss
    tensor.  Every tensor in ``params`` is probed; ``n_samples`` bounds the
    number of randomly chosen entries per tensor (None probes all entries).
    Returns the worst relative error across probes.
    """
    if isinstance(params, ParameterSet):
        named = list(params.items())
    elif isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(t.name or f"param{i}", t) for i, t in enumerate(params)]
    if rng is None:
        rng = np.random.default_rng(0)

    for _, t in named:
        t.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError("loss must be scalar")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in named
    }

    worst = 0.0
    for name, t in named:
        size = t.data.size
        if n_samples is None or n_samples >= size:
            indices = np.arange(size)
        else:
            indices = rng.choice(size, size=n_samples, replace=False)
        flat = t.data.reshape(-1)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = analytic[name].reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst
