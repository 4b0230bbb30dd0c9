"""Dynamic clone transformer (DCT) module, DCT bottleneck and the separable baseline.

The DCT module expands ``c`` channels to ``p * c``: a replicator tiles the
input ``p`` times and a small recalibrator (GAP -> FC -> relu -> FC -> sigmoid)
emits one scalar per output channel that is added at every spatial position.

All forward functions accept plain arrays or tape variables (see
:mod:`dyclot.autodiff`), so the same code serves inference and training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .tensor import DEFAULT_DTYPE, ConvSpec, ShapeError

POINTWISE = ConvSpec(kernel=1, stride=1)


def hidden_width(c_in: int, r: int) -> int:
    return max(1, c_in // r)


# conv filters feed relus; this gain gives the He-uniform bound sqrt(6 / fan_in)
CONV_GAIN = float(np.sqrt(6.0))


def fan_in_uniform(rng, shape, fan_in, dtype=DEFAULT_DTYPE, gain=1.0):
    """Uniform on ``[-gain / sqrt(fan_in), gain / sqrt(fan_in)]``."""
    bound = gain * np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _check_ratio(name, value):
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be an integer >= 1, got {value}")


@dataclass
class DctParams:
    """Recalibrator weights; ``W2`` has ``p * c_in`` rows, one per cloned channel."""

    p: int
    r: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    inner_relu: bool = True

    def __post_init__(self):
        _check_ratio("p", self.p)
        _check_ratio("r", self.r)
        h, c = self.W1.shape
        if self.W2.shape != (self.p * c, h):
            raise ShapeError(f"W2 shape {self.W2.shape} != (p*c', h) = {(self.p * c, h)}")
        if self.b1.shape != (h,) or self.b2.shape != (self.p * c,):
            raise ShapeError(f"bias shapes {self.b1.shape}, {self.b2.shape} do not match W1/W2")

    @property
    def c_in(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def create(cls, c_in, p, r, rng=None, dtype=DEFAULT_DTYPE, inner_relu=True):
        """Fan-in initialisation of ``W1``; ``W2`` and both biases start at zero.

        With ``rng=None`` every weight is zero.
        """
        _check_ratio("p", p)
        _check_ratio("r", r)
        h = hidden_width(c_in, r)
        w1 = np.zeros((h, c_in), dtype) if rng is None else fan_in_uniform(rng, (h, c_in), c_in, dtype)
        return cls(p, r, w1, np.zeros(h, dtype), np.zeros((p * c_in, h), dtype),
                   np.zeros(p * c_in, dtype), inner_relu)

    def tensors(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def with_tensors(self, tensors: dict) -> "DctParams":
        return replace(self, **{k: tensors[k] for k in ("W1", "b1", "W2", "b2")})


@dataclass
class BottleneckParams:
    dw: np.ndarray
    pwA: np.ndarray
    pwB: np.ndarray
    dct: DctParams
    stride: int = 1

    def __post_init__(self):
        m = self.dw.shape[0]
        half = self.pwA.shape[0]
        if self.pwA.shape != (half, 1, 1, m):
            raise ShapeError(f"pwA shape {self.pwA.shape} != (N/(2p), 1, 1, M={m})")
        if self.pwB.shape != (half, 1, 1, half):
            raise ShapeError(f"pwB shape {self.pwB.shape} != (N/(2p), 1, 1, N/(2p)={half})")
        if self.dct.c_in != 2 * half:
            raise ShapeError(f"DCT input width {self.dct.c_in} != N/p = {2 * half}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def M(self) -> int:
        return self.dw.shape[0]

    @property
    def N(self) -> int:
        return self.dct.p * self.dct.c_in

    @property
    def p(self) -> int:
        return self.dct.p

    @property
    def has_shortcut(self) -> bool:
        return self.stride == 1 and self.M == self.N

    @classmethod
    def create(cls, M, N, p, r, stride=1, rng=None, dtype=DEFAULT_DTYPE):
        _check_ratio("p", p)
        if N % (2 * p):
            raise ValueError(f"N={N} must be divisible by 2p={2 * p}")
        half = N // (2 * p)
        if rng is None:
            dw = np.zeros((M, 3, 3), dtype)
            pwa = np.zeros((half, 1, 1, M), dtype)
            pwb = np.zeros((half, 1, 1, half), dtype)
        else:
            dw = fan_in_uniform(rng, (M, 3, 3), 9, dtype, CONV_GAIN)
            pwa = fan_in_uniform(rng, (half, 1, 1, M), M, dtype, CONV_GAIN)
            pwb = fan_in_uniform(rng, (half, 1, 1, half), half, dtype, CONV_GAIN)
        return cls(dw, pwa, pwb, DctParams.create(2 * half, p, r, rng, dtype), stride)

    def tensors(self) -> dict:
        out = {"dw": self.dw, "pwA": self.pwA, "pwB": self.pwB}
        out.update({f"dct.{k}": v for k, v in self.dct.tensors().items()})
        return out

    def with_tensors(self, tensors: dict) -> "BottleneckParams":
        dct = self.dct.with_tensors({k[4:]: v for k, v in tensors.items() if k.startswith("dct.")})
        return replace(self, dw=tensors["dw"], pwA=tensors["pwA"], pwB=tensors["pwB"], dct=dct)


@dataclass
class SepConvParams:
    dw: np.ndarray
    pw: np.ndarray
    kernel: int = field(init=False)

    def __post_init__(self):
        self.kernel = self.dw.shape[1]
        if self.pw.shape[1:] != (1, 1, self.dw.shape[0]):
            raise ShapeError(f"pw shape {self.pw.shape} != (N, 1, 1, M={self.dw.shape[0]})")


def recalibrate(x, params: DctParams):
    """Per-channel coefficients ``sigmoid(W2 relu(W1 GAP(x) + b1) + b2)``, shape ``(B, p*c)``."""
    c = ad._value(x).shape[-1]
    if c != params.c_in:
        raise ShapeError(f"input channel axis x[3]={c} != recalibrator width c'={params.c_in}")
    z = ad.affine(ad.global_avg_pool(x), params.W1, params.b1)
    if params.inner_relu:
        z = ad.relu(z)
    return ad.sigmoid(ad.affine(z, params.W2, params.b2))


def dct_forward(x, params: DctParams):
    clones = ad.replicate_channels(x, params.p)
    return ad.add_channel_offsets(clones, recalibrate(x, params))


def dct_bottleneck_forward(x, params: BottleneckParams):
    """dw3x3 -> relu -> pwA -> relu -> pwB; concat(pwA, pwB) -> DCT; residual if shape-preserving."""
    m = ad._value(x).shape[-1]
    if m != params.M:
        raise ShapeError(f"input channel axis x[3]={m} != block input width M={params.M}")
    y = ad.relu(ad.depthwise_conv2d(x, params.dw, ConvSpec(3, params.stride)))
    a = ad.relu(ad.conv2d(y, params.pwA, POINTWISE))
    b = ad.conv2d(a, params.pwB, POINTWISE)
    out = dct_forward(ad.concat_channels(a, b), params.dct)
    if params.has_shortcut:
        out = ad.add(out, x)
    return out


def separable_conv_forward(x, params: SepConvParams, stride: int = 1):
    y = ad.depthwise_conv2d(x, params.dw, ConvSpec(params.kernel, stride))
    return ad.conv2d(y, params.pw, POINTWISE)


def grad_check_case(layer: str, rng, **shape):
    """Small float64 instance of ``layer``: returns ``(build, inputs)``.

    ``build`` maps a dict of named inputs (arrays or tape variables) to the
    layer output.
    """
    f64 = np.float64
    normal = rng.standard_normal
    batch = shape.get("batch", 2)
    if layer == "conv2d":
        k, stride = shape.get("kernel", 3), shape.get("stride", 1)
        inputs = {"x": normal((batch, 5, 5, 3)), "w": normal((4, k, k, 3))}
        return (lambda v: ad.conv2d(v["x"], v["w"], ConvSpec(k, stride))), inputs
    if layer == "depthwise":
        stride = shape.get("stride", 1)
        inputs = {"x": normal((batch, 6, 6, 4)), "w": normal((4, 3, 3))}
        return (lambda v: ad.depthwise_conv2d(v["x"], v["w"], ConvSpec(3, stride))), inputs
    if layer == "affine":
        inputs = {"v": normal((batch, 5)), "W": normal((4, 5)), "b": normal(4)}
        return (lambda v: ad.affine(v["v"], v["W"], v["b"])), inputs
    if layer in ("recalibrate", "dct_forward"):
        c, p, r = shape.get("c", 8), shape.get("p", 2), shape.get("r", 2)
        h = hidden_width(c, r)
        inputs = {"x": normal((batch, 4, 4, c)), "W1": normal((h, c)), "b1": normal(h),
                  "W2": normal((p * c, h)), "b2": normal(p * c)}
        fn = recalibrate if layer == "recalibrate" else dct_forward

        def build(v):
            params = DctParams(p, r, v["W1"], v["b1"], v["W2"], v["b2"])
            return fn(v["x"], params)
        return build, inputs
    if layer == "dct_bottleneck_forward":
        m, n = shape.get("M", 8), shape.get("N", 8)
        p, r, stride = shape.get("p", 2), shape.get("r", 2), shape.get("stride", 1)
        spatial = shape.get("spatial", 4)
        template = BottleneckParams.create(m, n, p, r, stride, rng, f64)
        inputs = {"x": normal((batch, spatial, spatial, m))}
        inputs.update(template.tensors())
        # the zero-initialised recalibrator tensors get fan-in scaled values too
        h = template.dct.hidden
        inputs["dct.W2"] = fan_in_uniform(rng, (n, h), h, f64)
        inputs["dct.b1"] = fan_in_uniform(rng, h, h, f64)
        inputs["dct.b2"] = fan_in_uniform(rng, n, h, f64)

        def build(v):
            return dct_bottleneck_forward(v["x"], template.with_tensors(v))
        return build, inputs
    raise ValueError(f"unknown layer {layer!r}; expected one of {ad.GRAD_CHECK_LAYERS}")
