"""Dense NHWC tensor kernels.

Tensors are plain :class:`numpy.ndarray` objects. Feature maps use the
``(batch, height, width, channels)`` layout; dense filters are
``(out_channels, k, k, in_channels)`` and depthwise filters ``(channels, k, k)``.

Every kernel accumulates in float64 and returns the promoted input dtype, so
float32 parameters stay float32 while gradient checks can run end to end in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents disagree; the message names the axes."""


@dataclass(frozen=True)
class ConvSpec:
    kernel: int = 3
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding != "same":
            raise ValueError(f"only 'same' padding is supported, got {self.padding!r}")

    @property
    def pad(self) -> int:
        return self.kernel // 2

    def out_size(self, n: int) -> int:
        return -(-n // self.stride)


def tensor(data, shape=None, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Build a tensor from nested data or a flat buffer plus ``shape``."""
    arr = np.asarray(data, dtype=dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"buffer of length {arr.size} does not fill shape {shape}")
        arr = arr.reshape(shape)
    if any(s < 1 for s in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return arr


def _out_dtype(*arrays):
    return np.result_type(*arrays)


def _check_rank(name, arr, rank):
    if arr.ndim != rank:
        raise ShapeError(f"{name} must be rank {rank}, got shape {arr.shape}")


def _pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """View of the padded input seen by kernel tap (i, j) at every output position."""
    return xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation with zero "same" padding and no bias.

    ``x`` is ``(B, H, W, C)`` and ``w`` is ``(N, k, k, C)``; the result is
    ``(B, ceil(H/s), ceil(W/s), N)``.
    """
    _check_rank("x", x, 4)
    _check_rank("w", w, 4)
    if x.shape[3] != w.shape[3]:
        raise ShapeError(
            f"input channel axis x[3]={x.shape[3]} != filter input-channel axis w[3]={w.shape[3]}"
        )
    if w.shape[1] != spec.kernel or w.shape[2] != spec.kernel:
        raise ShapeError(
            f"filter spatial axes w[1:3]={w.shape[1:3]} != kernel {spec.kernel}"
        )
    b, h, wd, _ = x.shape
    ho, wo = spec.out_size(h), spec.out_size(wd)
    xp = _pad_nhwc(x.astype(np.float64, copy=False), spec.pad)
    w64 = w.astype(np.float64, copy=False)
    out = np.zeros((b, ho, wo, w.shape[0]), dtype=np.float64)
    for i in range(spec.kernel):
        for j in range(spec.kernel):
            out += _window(xp, i, j, ho, wo, spec.stride) @ w64[:, i, j, :].T
    return out.astype(_out_dtype(x, w), copy=False)


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """One ``k x k`` filter per channel; ``w`` is ``(C, k, k)``."""
    _check_rank("x", x, 4)
    _check_rank("w", w, 3)
    if x.shape[3] != w.shape[0]:
        raise ShapeError(
            f"input channel axis x[3]={x.shape[3]} != depthwise filter count w[0]={w.shape[0]}"
        )
    if w.shape[1] != spec.kernel or w.shape[2] != spec.kernel:
        raise ShapeError(
            f"filter spatial axes w[1:3]={w.shape[1:3]} != kernel {spec.kernel}"
        )
    b, h, wd, c = x.shape
    ho, wo = spec.out_size(h), spec.out_size(wd)
    xp = _pad_nhwc(x.astype(np.float64, copy=False), spec.pad)
    w64 = w.astype(np.float64, copy=False)
    out = np.zeros((b, ho, wo, c), dtype=np.float64)
    for i in range(spec.kernel):
        for j in range(spec.kernel):
            out += _window(xp, i, j, ho, wo, spec.stride) * w64[:, i, j]
    return out.astype(_out_dtype(x, w), copy=False)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _check_rank("x", x, 4)
    return x.astype(np.float64, copy=False).mean(axis=(1, 2)).astype(x.dtype, copy=False)


def affine(v: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``v @ w.T + b`` for ``v`` of shape ``(B, Cin)`` and ``w`` of ``(Cout, Cin)``."""
    _check_rank("v", v, 2)
    _check_rank("W", w, 2)
    _check_rank("b", b, 1)
    if v.shape[1] != w.shape[1]:
        raise ShapeError(f"v[1]={v.shape[1]} != W[1]={w.shape[1]}")
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"b[0]={b.shape[0]} != W[0]={w.shape[0]}")
    out = v.astype(np.float64, copy=False) @ w.astype(np.float64, copy=False).T + b
    return out.astype(_out_dtype(v, w, b), copy=False)


def sigmoid(v: np.ndarray) -> np.ndarray:
    v64 = v.astype(np.float64, copy=False)
    # split by sign so exp never overflows
    out = np.empty_like(v64)
    pos = v64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v64[pos]))
    e = np.exp(v64[~pos])
    out[~pos] = e / (1.0 + e)
    return out.astype(v.dtype, copy=False)


def relu(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0).astype(v.dtype, copy=False)


def activation(v: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(v)
    if kind == "relu":
        return relu(v)
    raise ValueError(f"unknown activation {kind!r}")


def sample_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Standardise each sample over all of its non-batch axes; no learned scale or shift."""
    x64 = x.astype(np.float64, copy=False)
    axes = tuple(range(1, x.ndim))
    mu = x64.mean(axis=axes, keepdims=True)
    var = x64.var(axis=axes, keepdims=True)
    return ((x64 - mu) / np.sqrt(var + eps)).astype(x.dtype, copy=False)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_rank("a", a, 4)
    _check_rank("b", b, 4)
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"batch/spatial axes differ: a[0:3]={a.shape[:3]} b[0:3]={b.shape[:3]}")
    if a.shape[3] < 1 or b.shape[3] < 1:
        raise ShapeError(f"both channel axes must be >= 1, got a[3]={a.shape[3]} b[3]={b.shape[3]}")
    return np.concatenate([a, b], axis=3)


def replicate_channels(x: np.ndarray, p: int) -> np.ndarray:
    """Tile ``x`` ``p`` times along channels: output channel j is input channel j mod C."""
    if int(p) != p or p < 1:
        raise ValueError(f"replication ratio p must be an integer >= 1, got {p}")
    _check_rank("x", x, 4)
    return np.tile(x, (1, 1, 1, int(p)))
