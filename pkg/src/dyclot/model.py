"""DyClotNet: a 3x3 stem, 18 DCT bottlenecks in five stages, 8x8 pooling and a classifier.

The stem output and every bottleneck output are standardised per sample
(:func:`dyclot.autodiff.sample_norm`). Without it the sigmoid offsets that each
DCT module adds pile up along the residual path and SGD at lr 0.05 diverges.
The normalisation has no parameters and no multiply-adds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from fractions import Fraction

import numpy as np

from . import analysis
from . import autodiff as ad
from .data import IMAGE_SHAPE, Dataset
from .layers import CONV_GAIN, BottleneckParams, DctParams, dct_bottleneck_forward, fan_in_uniform
from .tensor import DEFAULT_DTYPE, ConvSpec, ShapeError

STEM_WIDTH = 32
# (output width, repeats, stride of the first block)
STAGES = ((64, 5, 1), (128, 1, 2), (128, 5, 1), (256, 1, 2), (256, 6, 1))
STEM_SPEC = ConvSpec(kernel=3, stride=1)


@dataclass
class TrainConfig:
    alpha: float = 1.0
    p: int = 2
    r: int = 2
    num_classes: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        for name in ("p", "r", "num_classes", "epochs", "batch_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a flat JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        missing = sorted(names - set(raw))
        if unknown:
            raise ValueError(f"{path}: unknown config keys {unknown}")
        if missing:
            raise ValueError(f"{path}: missing config keys {missing}")
        return cls(**raw)


def scaled_width(channels: int, alpha: float, p: int) -> int:
    """``alpha * channels`` rounded up to a multiple of ``2p`` (at least ``2p``)."""
    step = 2 * p
    scaled = Fraction(repr(float(alpha))) * channels
    return max(step, math.ceil(scaled / step) * step)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv", "bottleneck", "pool" or "fc"
    M: int
    N: int
    stride: int = 1
    p: int = 1
    r: int = 1


class ModelGraph:
    """Ordered layer specs plus a parameter store keyed by ``"<layer>.<tensor>"``."""

    def __init__(self, layers, params: dict, num_classes: int):
        self.layers = list(layers)
        self.params = params
        self.num_classes = num_classes

    @property
    def blocks(self):
        return [s for s in self.layers if s.kind == "bottleneck"]

    def layer_params(self, name, params=None) -> dict:
        params = self.params if params is None else params
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

    def block_params(self, spec: LayerSpec, params=None) -> BottleneckParams:
        t = self.layer_params(spec.name, params)
        dct = DctParams(spec.p, spec.r, t["dct.W1"], t["dct.b1"], t["dct.W2"], t["dct.b2"])
        return BottleneckParams(t["dw"], t["pwA"], t["pwB"], dct, spec.stride)

    def forward(self, batch, params=None, trace=None):
        """Logits for a ``(B, 32, 32, 3)`` batch; ``params`` may hold tape variables."""
        params = self.params if params is None else params
        shape = ad._value(batch).shape
        if len(shape) != 4 or tuple(shape[1:]) != IMAGE_SHAPE:
            raise ShapeError(f"batch must be (B, 32, 32, 3), got {tuple(shape)}")
        x = batch
        for spec in self.layers:
            if spec.kind == "conv":
                x = ad.sample_norm(ad.relu(ad.conv2d(x, params[f"{spec.name}.w"], STEM_SPEC)))
            elif spec.kind == "bottleneck":
                x = ad.sample_norm(dct_bottleneck_forward(x, self.block_params(spec, params)))
            elif spec.kind == "pool":
                x = ad.global_avg_pool(x)
            else:
                x = ad.affine(x, params[f"{spec.name}.W"], params[f"{spec.name}.b"])
            if trace is not None:
                trace.append((spec.name, tuple(ad._value(x).shape)))
        return x

    def predict(self, batch) -> np.ndarray:
        return np.argmax(self.forward(batch), axis=1)

    @classmethod
    def from_params(cls, params: dict) -> "ModelGraph":
        """Rebuild the layer specs from tensor shapes alone (``r`` is inferred as ``c'/h``)."""
        layers = []
        stem = params["stem.w"]
        layers.append(LayerSpec("stem", "conv", stem.shape[3], stem.shape[0], 1))
        names = sorted({k.split(".")[0] for k in params if k.startswith("block")})
        strides = [s for _, n, s0 in STAGES for s in [s0] + [1] * (n - 1)]
        if len(names) != len(strides):
            raise ValueError(f"expected {len(strides)} bottlenecks, found {len(names)}")
        for name, stride in zip(names, strides):
            m = params[f"{name}.dw"].shape[0]
            n, h = params[f"{name}.dct.W2"].shape
            c = params[f"{name}.dct.W1"].shape[1]
            layers.append(LayerSpec(name, "bottleneck", m, n, stride, n // c, max(1, c // h)))
        fc = params["fc.W"]
        layers.append(LayerSpec("pool", "pool", fc.shape[1], fc.shape[1]))
        layers.append(LayerSpec("fc", "fc", fc.shape[1], fc.shape[0]))
        return cls(layers, dict(params), fc.shape[0])


def stage_widths(alpha: float, p: int) -> list:
    return [scaled_width(c, alpha, p) for c in (STEM_WIDTH, 64, 128, 256)]


def build_dyclotnet(cfg: TrainConfig, init: str = "fan_in", dtype=DEFAULT_DTYPE, stages=STAGES) -> ModelGraph:
    """Construct and initialise the network; ``init="zeros"`` gives an all-zero model.

    ``stages`` overrides the (width, repeats, first stride) plan, e.g. for
    shallow test models.
    """
    rng = np.random.default_rng(cfg.seed) if init == "fan_in" else None
    if init not in ("fan_in", "zeros"):
        raise ValueError(f"unknown init {init!r}")
    stem = scaled_width(STEM_WIDTH, cfg.alpha, cfg.p)
    params = {}
    layers = [LayerSpec("stem", "conv", 3, stem, 1)]
    params["stem.w"] = (fan_in_uniform(rng, (stem, 3, 3, 3), 27, dtype, CONV_GAIN) if rng is not None
                        else np.zeros((stem, 3, 3, 3), dtype))
    width, k = stem, 0
    for out, repeats, stride in stages:
        n = scaled_width(out, cfg.alpha, cfg.p)
        assert n % (2 * cfg.p) == 0
        for i in range(repeats):
            spec = LayerSpec(f"block{k:02d}", "bottleneck", width, n, stride if i == 0 else 1, cfg.p, cfg.r)
            block = BottleneckParams.create(spec.M, spec.N, cfg.p, cfg.r, spec.stride, rng, dtype)
            params.update({f"{spec.name}.{t}": v for t, v in block.tensors().items()})
            layers.append(spec)
            width, k = n, k + 1
    layers.append(LayerSpec("pool", "pool", width, width))
    layers.append(LayerSpec("fc", "fc", width, cfg.num_classes))
    # zero classifier: logits start uniform and the first epochs descend smoothly
    params["fc.W"] = np.zeros((cfg.num_classes, width), dtype)
    params["fc.b"] = np.zeros(cfg.num_classes, dtype)
    return ModelGraph(layers, params, cfg.num_classes)


@dataclass
class LayerCost:
    name: str
    kind: str
    out_shape: tuple
    params: int
    macs: int


@dataclass
class ModelSummary:
    rows: list
    graph: analysis.CostReport
    closed_form: analysis.CostReport
    closed_form_no_dct: analysis.CostReport

    @property
    def counters_agree(self) -> bool:
        return (self.graph.total == self.closed_form.total
                and self.graph.total_params == self.closed_form.total_params)


def _graph_walk(model: ModelGraph):
    """Count parameters and multiply-adds by walking actual tensor shapes."""
    rows, size, width = [], IMAGE_SHAPE[0], IMAGE_SHAPE[2]
    for spec in model.layers:
        t = model.layer_params(spec.name)
        n_params = sum(v.size for v in t.values())
        if spec.kind == "conv":
            size = STEM_SPEC.out_size(size)
            macs = size * size * t["w"].size
            width = t["w"].shape[0]
        elif spec.kind == "bottleneck":
            size = ConvSpec(3, spec.stride).out_size(size)
            spatial = size * size * (t["dw"].size + t["pwA"].size + t["pwB"].size)
            macs = spatial + t["dct.W1"].size + t["dct.W2"].size
            width = t["dct.W2"].shape[0]
        elif spec.kind == "pool":
            size, macs = 1, 0
        else:
            macs = t["W"].size
            width = t["W"].shape[0]
        out_shape = (size, size, width) if spec.kind in ("conv", "bottleneck") else (width,)
        rows.append(LayerCost(spec.name, spec.kind, out_shape, n_params, macs))
    return rows


def _closed_form(model: ModelGraph, exact: bool):
    report = analysis.CostReport()
    size = IMAGE_SHAPE[0]
    for spec in model.layers:
        if spec.kind == "conv":
            report.terms[spec.name] = size * size * 9 * spec.M * spec.N
            report.params[spec.name] = 9 * spec.M * spec.N
        elif spec.kind == "bottleneck":
            size = -(-size // spec.stride)
            cost = analysis.dct_bottleneck_cost(spec.M, spec.N, size, 3, spec.p, spec.r, exact=exact)
            report.terms[spec.name] = cost.total
            report.params[spec.name] = analysis.bottleneck_param_count(spec.M, spec.N, spec.p, spec.r)
        elif spec.kind == "pool":
            report.terms[spec.name] = 0
            report.params[spec.name] = 0
        else:
            report.terms[spec.name] = spec.M * spec.N
            report.params[spec.name] = spec.M * spec.N + spec.N
    return report


def model_summary(model: ModelGraph) -> ModelSummary:
    rows = _graph_walk(model)
    graph = analysis.CostReport({r.name: r.macs for r in rows}, {r.name: r.params for r in rows})
    return ModelSummary(rows, graph, _closed_form(model, True), _closed_form(model, False))


def forward(model: ModelGraph, batch) -> np.ndarray:
    return model.forward(batch)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def evaluate(model: ModelGraph, dataset: Dataset, batch_size: int = 64):
    """Accuracy (argmax, ties to the lowest class index) and mean cross-entropy."""
    correct, loss_sum = 0, 0.0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        logits = model.forward(xb)
        correct += int((np.argmax(logits, axis=1) == yb).sum())
        loss_sum += float(ad.softmax_cross_entropy(logits, yb)) * len(yb)
    return correct / len(dataset), loss_sum / len(dataset)


def loss_and_grads(model: ModelGraph, xb, yb, params=None):
    params = model.params if params is None else params
    tape = ad.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    loss = ad.softmax_cross_entropy(model.forward(xb, leaves), yb)
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in leaves.items()}


def train(model: ModelGraph, dataset: Dataset, cfg: TrainConfig, target_accuracy=None, log=None):
    """SGD with momentum over seeded shuffled mini-batches; updates ``model.params``.

    Each epoch records the sample-weighted mean training loss and the accuracy of
    the end-of-epoch weights on the full dataset. Training stops early once that
    accuracy reaches ``target_accuracy``.
    """
    if cfg.batch_size > len(dataset):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng(cfg.seed)
    velocity, history = None, []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, dataset.images[idx], dataset.labels[idx])
            model.params, velocity = ad.sgd_step(model.params, grads, velocity, cfg.lr, cfg.momentum)
            loss_sum += loss * len(idx)
        accuracy, _ = evaluate(model, dataset)
        history.append(EpochStats(epoch, loss_sum / len(dataset), accuracy))
        if log is not None:
            log(history[-1])
        if target_accuracy is not None and accuracy >= target_accuracy:
            break
    return history
