"""Tape-based reverse-mode differentiation over the tensor kernels.

Every differentiable op takes plain arrays or :class:`Var` objects. When no
argument is a ``Var`` the op is just the forward kernel and returns an array,
so layer code is written once and runs both eagerly and on a tape::

    tape = Tape()
    w = tape.leaf(weights, "w")
    loss = softmax_cross_entropy(affine(features, w, bias), labels)
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError


class Var:
    __slots__ = ("value", "tape", "index", "name", "grad")

    def __init__(self, value, tape, index, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var({self.name or self.tape.nodes[self.index].op}, shape={self.shape})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    vjp: Callable | None = None
    saved: dict = field(default_factory=dict)


class Tape:
    """Records ops in forward order; :meth:`backward` walks them in reverse."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.vars: list[Var] = []

    def leaf(self, value, name=None) -> Var:
        return self._record("leaf", (), np.asarray(value), None, name=name)

    def _record(self, op, inputs, value, vjp, name=None, **saved) -> Var:
        var = Var(value, self, len(self.nodes), name)
        self.nodes.append(TapeNode(op, tuple(v.index for v in inputs), vjp, saved))
        self.vars.append(var)
        return var

    def saved(self, op):
        """Saved intermediates of every node with the given op, in forward order."""
        return [n.saved for n in self.nodes if n.op == op]

    def backward(self, loss: Var, cotangent=1.0):
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.full(loss.shape, cotangent, dtype=loss.dtype)
        for k in range(loss.index, -1, -1):
            node, g = self.nodes[k], grads[k]
            if g is None or node.vjp is None:
                continue
            for idx, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                grads[idx] = gi if grads[idx] is None else grads[idx] + gi
        for var, g in zip(self.vars, grads):
            var.grad = np.zeros_like(var.value) if g is None else g.astype(var.dtype, copy=False)


def _value(a):
    return a.value if isinstance(a, Var) else a


def _tape_of(*args):
    tapes = {id(a.tape): a.tape for a in args if isinstance(a, Var)}
    if len(tapes) > 1:
        raise ValueError("arguments come from different tapes")
    return next(iter(tapes.values()), None)


def _lift(tape, args):
    """Promote constant arguments to leaves so every input has a node index."""
    return [a if isinstance(a, Var) else tape.leaf(a) for a in args]


def _op(name, args, out, vjp, **saved):
    tape = _tape_of(*args)
    if tape is None:
        return out
    return tape._record(name, _lift(tape, args), out, vjp, **saved)


# -- ops --------------------------------------------------------------------

def conv2d(x, w, spec: ConvSpec):
    xv, wv = _value(x), _value(w)
    out = T.conv2d(xv, wv, spec)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        b, h, wd, _ = xv.shape
        ho, wo = g.shape[1:3]
        s, pad = spec.stride, spec.pad
        xp = T._pad_nhwc(xv.astype(np.float64, copy=False), pad)
        w64 = wv.astype(np.float64, copy=False)
        dxp = np.zeros_like(xp)
        dw = np.zeros(wv.shape, dtype=np.float64)
        flat_g = g64.reshape(-1, g.shape[3])
        for i in range(spec.kernel):
            for j in range(spec.kernel):
                win = T._window(xp, i, j, ho, wo, s)
                dw[:, i, j, :] = flat_g.T @ win.reshape(-1, win.shape[3])
                T._window(dxp, i, j, ho, wo, s)[...] += g64 @ w64[:, i, j, :]
        dx = dxp[:, pad:pad + h, pad:pad + wd, :]
        return dx.astype(xv.dtype), dw.astype(wv.dtype)

    return _op("conv2d", (x, w), out, vjp)


def depthwise_conv2d(x, w, spec: ConvSpec):
    xv, wv = _value(x), _value(w)
    out = T.depthwise_conv2d(xv, wv, spec)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        _, h, wd, _ = xv.shape
        ho, wo = g.shape[1:3]
        s, pad = spec.stride, spec.pad
        xp = T._pad_nhwc(xv.astype(np.float64, copy=False), pad)
        w64 = wv.astype(np.float64, copy=False)
        dxp = np.zeros_like(xp)
        dw = np.zeros(wv.shape, dtype=np.float64)
        for i in range(spec.kernel):
            for j in range(spec.kernel):
                win = T._window(xp, i, j, ho, wo, s)
                dw[:, i, j] = np.einsum("bhwc,bhwc->c", win, g64)
                T._window(dxp, i, j, ho, wo, s)[...] += g64 * w64[:, i, j]
        dx = dxp[:, pad:pad + h, pad:pad + wd, :]
        return dx.astype(xv.dtype), dw.astype(wv.dtype)

    return _op("depthwise_conv2d", (x, w), out, vjp)


def global_avg_pool(x):
    xv = _value(x)
    out = T.global_avg_pool(xv)

    def vjp(g):
        _, h, w, _ = xv.shape
        dx = np.broadcast_to(g[:, None, None, :] / (h * w), xv.shape)
        return (dx.astype(xv.dtype),)

    return _op("global_avg_pool", (x,), out, vjp)


def affine(v, w, b):
    vv, wv, bv = _value(v), _value(w), _value(b)
    out = T.affine(vv, wv, bv)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        dv = g64 @ wv.astype(np.float64, copy=False)
        dw = g64.T @ vv.astype(np.float64, copy=False)
        return dv.astype(vv.dtype), dw.astype(wv.dtype), g64.sum(axis=0).astype(bv.dtype)

    return _op("affine", (v, w, b), out, vjp)


def sigmoid(v):
    out = T.sigmoid(_value(v))

    def vjp(g):
        # uses the saved forward output
        return (g * out * (1 - out),)

    return _op("sigmoid", (v,), out, vjp)


def relu(v):
    vv = _value(v)
    mask = vv > 0
    out = T.relu(vv)

    def vjp(g):
        return (g * mask,)

    return _op("relu", (v,), out, vjp, mask=mask)


def activation(v, kind: str):
    if kind == "sigmoid":
        return sigmoid(v)
    if kind == "relu":
        return relu(v)
    raise ValueError(f"unknown activation {kind!r}")


def sample_norm(x, eps: float = 1e-5):
    xv = _value(x)
    axes = tuple(range(1, xv.ndim))
    x64 = xv.astype(np.float64, copy=False)
    inv_std = 1.0 / np.sqrt(x64.var(axis=axes, keepdims=True) + eps)
    y64 = (x64 - x64.mean(axis=axes, keepdims=True)) * inv_std

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        dx = inv_std * (g64 - g64.mean(axis=axes, keepdims=True)
                        - y64 * (g64 * y64).mean(axis=axes, keepdims=True))
        return (dx.astype(xv.dtype),)

    return _op("sample_norm", (x,), y64.astype(xv.dtype), vjp)


def concat_channels(a, b):
    ca = _value(a).shape[-1]
    out = T.concat_channels(_value(a), _value(b))
    return _op("concat_channels", (a, b), out, lambda g: (g[..., :ca], g[..., ca:]))


def replicate_channels(x, p: int):
    xv = _value(x)
    out = T.replicate_channels(xv, p)

    def vjp(g):
        c = xv.shape[-1]
        return (g.reshape(*g.shape[:-1], int(p), c).sum(axis=-2),)

    return _op("replicate_channels", (x,), out, vjp)


def add(a, b):
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add needs equal shapes, got {av.shape} and {bv.shape}")
    return _op("add", (a, b), av + bv, lambda g: (g, g))


def add_channel_offsets(y, c):
    """Add a per-(batch, channel) scalar ``c[b, j]`` at every spatial position of ``y``."""
    yv, cv = _value(y), _value(c)
    if cv.shape != (yv.shape[0], yv.shape[3]):
        raise ShapeError(f"offsets shape {cv.shape} != (y[0], y[3]) = {(yv.shape[0], yv.shape[3])}")
    out = yv + cv[:, None, None, :]
    return _op("add_channel_offsets", (y, c), out, lambda g: (g, g.sum(axis=(1, 2))))


def total(x):
    xv = _value(x)
    out = np.asarray(xv.sum(dtype=np.float64), dtype=xv.dtype)
    return _op("total", (x,), out, lambda g: (np.full(xv.shape, g, dtype=xv.dtype),))


def weighted_total(x, weights):
    """``sum(x * weights)`` with constant ``weights``."""
    xv = _value(x)
    out = np.asarray((xv * weights).sum(dtype=np.float64), dtype=xv.dtype)
    return _op("weighted_total", (x,), out, lambda g: ((g * weights).astype(xv.dtype),))


def softmax_cross_entropy(logits, labels):
    """Mean ``-log softmax(logits)[label]`` over the batch, via log-sum-exp."""
    lv = _value(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ShapeError(f"logits {lv.shape} and labels {labels.shape} disagree")
    k = lv.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = lv.astype(np.float64) - lv.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    bsz = lv.shape[0]
    out = np.asarray(-log_probs[np.arange(bsz), labels].mean(), dtype=lv.dtype)

    def vjp(g):
        d = np.exp(log_probs)
        d[np.arange(bsz), labels] -= 1.0
        return ((g * d / bsz).astype(lv.dtype),)

    return _op("softmax_cross_entropy", (logits,), out, vjp)


# -- checking and optimisation ----------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` in float64.

    Coordinates are visited in row-major order, evaluating ``f(x + h e)`` then
    ``f(x - h e)`` for each.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, eps: float = 1e-8) -> np.ndarray:
    a, f = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), eps)


@dataclass
class GradReport:
    layer: str
    errors: dict
    passed: bool
    tol: float
    step: float
    kinks_skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


GRAD_CHECK_LAYERS = (
    "conv2d", "depthwise", "affine", "recalibrate", "dct_forward", "dct_bottleneck_forward",
)


def grad_check(layer: str, seed: int = 0, tol: float = 1e-4, h: float = 1e-3, **shape) -> GradReport:
    """Compare tape gradients of ``layer`` against central differences.

    The loss is a fixed random linear functional of the layer output, evaluated
    in float64. Coordinates whose perturbation flips any relu activation are
    non-differentiable there and are skipped (counted in ``kinks_skipped``).
    """
    from .layers import grad_check_case

    rng = np.random.default_rng(seed)
    build, inputs = grad_check_case(layer, rng, **shape)
    probe = rng.standard_normal(build(inputs).shape)

    def run(values):
        tape = Tape()
        leaves = {k: tape.leaf(v, k) for k, v in values.items()}
        loss = weighted_total(build(leaves), probe)
        return tape, leaves, loss

    tape, leaves, loss = run(inputs)
    tape.backward(loss)
    base_masks = [s["mask"] for s in tape.saved("relu")]

    errors, skipped = {}, 0
    for name, value in inputs.items():
        flips = []

        def f(v, name=name):
            t, _, l = run({**inputs, name: v})
            masks = [s["mask"] for s in t.saved("relu")]
            flips.append(any(not np.array_equal(m, b) for m, b in zip(masks, base_masks)))
            return float(l.value)

        numeric = finite_diff_grad(f, value, h)
        kinked = np.array(flips).reshape(-1, 2).any(axis=1).reshape(value.shape)
        skipped += int(kinked.sum())
        err = relative_error(leaves[name].grad, numeric)[~kinked]
        errors[name] = float(err.max()) if err.size else 0.0
    passed = all(e <= tol for e in errors.values()) if tol > 0 else False
    return GradReport(layer, errors, passed, tol, h, skipped)


def sgd_step(params: dict, grads: dict, velocity: dict | None, lr: float, momentum: float = 0.0):
    """One SGD-with-momentum update: ``v <- momentum*v + g``; ``w <- w - lr*v``.

    Returns new ``(params, velocity)`` dicts; the inputs are not modified.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {w.shape}")
        v = velocity.get(name)
        v = g if v is None else momentum * v + g
        new_velocity[name] = v.astype(w.dtype, copy=False)
        new_params[name] = (w - lr * v).astype(w.dtype, copy=False)
    return new_params, new_velocity

