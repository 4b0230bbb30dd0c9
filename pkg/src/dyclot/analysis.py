"""Connectivity and cost arithmetic for multi-path layers and DCT bottlenecks.

Costs count multiply-adds (one multiplication plus its accumulation = 1 unit)
and are kept as Python ints; ratios are :class:`fractions.Fraction`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .layers import hidden_width
from .tensor import ShapeError


@dataclass
class MpfcLayer:
    """``weights[i, j, k]``: path ``k`` from input node ``j`` to output node ``i``."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 3:
            raise ShapeError(f"weights must have extents (t, s, p), got {self.weights.shape}")

    @property
    def t(self) -> int:
        return self.weights.shape[0]

    @property
    def s(self) -> int:
        return self.weights.shape[1]

    @property
    def p(self) -> int:
        return self.weights.shape[2]

    @property
    def parameter_count(self) -> int:
        return self.t * self.s * self.p

    @classmethod
    def fully_connected(cls, weights) -> "MpfcLayer":
        return cls(np.asarray(weights)[:, :, None])


def _check_input(layer, x):
    x = np.asarray(x)
    if x.shape != (layer.s,):
        raise ShapeError(f"input length {x.shape} != layer input nodes s={layer.s}")
    return x


def fc_forward(layer: MpfcLayer, x) -> np.ndarray:
    """``y_i = sum_j w_ij x_j`` for a single-path layer."""
    if layer.p != 1:
        raise ValueError(f"fc_forward needs a single-path layer, got p={layer.p}")
    x = _check_input(layer, x)
    return layer.weights[:, :, 0] @ x


def mpfc_forward(layer: MpfcLayer, x) -> np.ndarray:
    """``y_i = sum_k sum_j w_ijk x_j``, summing each path's contribution in turn."""
    x = _check_input(layer, x)
    y = layer.weights[:, :, 0] @ x
    for k in range(1, layer.p):
        y = y + layer.weights[:, :, k] @ x
    return y


def collapse_paths(layer: MpfcLayer) -> MpfcLayer:
    """Equivalent single-path layer with ``w_ij = sum_k w_ijk``."""
    return MpfcLayer(layer.weights.sum(axis=2, keepdims=True))


@dataclass(frozen=True)
class WideningScenario:
    m: int
    n: int
    l: int
    dl: int = 0

    def __post_init__(self):
        if min(self.m, self.n, self.l) < 1 or self.dl < 0:
            raise ValueError(f"need m, n, l >= 1 and dl >= 0, got {self}")


@dataclass(frozen=True)
class WideningCosts:
    base: int
    full_widen_extra: int
    duplicate_extra: int


def widening_costs(sc: WideningScenario) -> WideningCosts:
    """Edge counts of a 3-layer net, and the extra edges from widening vs. duplicating."""
    return WideningCosts(
        base=sc.l * (sc.m + sc.n),
        full_widen_extra=sc.dl * (sc.m + sc.n),
        duplicate_extra=sc.dl * sc.n,
    )


@dataclass
class CostReport:
    terms: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    ratio: Fraction | None = None

    @property
    def total(self) -> int:
        return sum(self.terms.values())

    @property
    def total_params(self) -> int:
        return sum(self.params.values())


def _positive(**kw):
    for k, v in kw.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{k} must be a positive integer, got {v}")


def sepconv_cost(M: int, N: int, Df: int, Dk: int) -> CostReport:
    _positive(M=M, N=N, Df=Df, Dk=Dk)
    return CostReport({
        "depthwise": Df * Df * Dk * Dk * M,
        "pointwise": Df * Df * M * N,
    })


def _half_width(N, p):
    _positive(N=N, p=p)
    if N % (2 * p):
        raise ValueError(f"N={N} must be divisible by 2p={2 * p}")
    return N // (2 * p)


def recalibrator_cost(N: int, p: int, r: int) -> int:
    """Multiply-adds of both recalibrator FC layers for a block of output width N."""
    c = N // p
    h = hidden_width(c, r)
    return c * h + h * N


def dct_bottleneck_cost(M: int, N: int, Df: int, Dk: int, p: int, r: int, exact: bool = False) -> CostReport:
    """Bottleneck multiply-adds at output spatial size ``Df``.

    The default drops the DCT module itself as negligible; ``exact=True`` adds
    the recalibrator's fully connected layers.
    """
    _positive(M=M, Df=Df, Dk=Dk, r=r)
    half = _half_width(N, p)
    terms = {
        "depthwise": Df * Df * Dk * Dk * M,
        "pointwise_a": Df * Df * M * half,
        "pointwise_b": Df * Df * half * half,
    }
    if exact:
        terms["recalibrator"] = recalibrator_cost(N, p, r)
    return CostReport(terms)


def bottleneck_param_count(M: int, N: int, p: int, r: int, Dk: int = 3) -> int:
    half = _half_width(N, p)
    c = N // p
    h = hidden_width(c, r)
    return Dk * Dk * M + M * half + half * half + (c * h + h) + (h * N + N)


def cost_ratio(M: int, N: int, Dk: int, p: int, approximate: bool = True) -> Fraction:
    """Bottleneck-to-separable cost ratio; spatial size cancels.

    ``approximate`` drops the depthwise terms from both costs.
    """
    _positive(M=M, Dk=Dk)
    half = _half_width(N, p)
    num = M * half + half * half
    den = M * N
    if not approximate:
        num += Dk * Dk * M
        den += Dk * Dk * M
    return Fraction(num, den)


SWEEP_HEADER = ["M", "N", "Df", "Dk", "p", "r", "C0", "C1_paper", "C1_exact", "ratio_num", "ratio_den"]


def sweep_row(M, N, Df, Dk, p, r) -> dict:
    c0 = sepconv_cost(M, N, Df, Dk).total
    c1 = dct_bottleneck_cost(M, N, Df, Dk, p, r).total
    c1x = dct_bottleneck_cost(M, N, Df, Dk, p, r, exact=True).total
    ratio = Fraction(c1, c0)
    return dict(M=M, N=N, Df=Df, Dk=Dk, p=p, r=r, C0=c0, C1_paper=c1, C1_exact=c1x,
                ratio_num=ratio.numerator, ratio_den=ratio.denominator)


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
