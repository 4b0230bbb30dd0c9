import math

import numpy as np
import pytest

from dyclot import autodiff as ad
from dyclot.data import Dataset, synth_dataset
from dyclot.model import (ModelGraph, TrainConfig, build_dyclotnet, evaluate, forward, loss_and_grads,
                          model_summary, scaled_width, stage_widths, train)
from dyclot.tensor import ShapeError

TINY = ((8, 1, 1), (16, 1, 2))


def tiny_model(seed=0, classes=3, init="fan_in"):
    cfg = TrainConfig(alpha=1.0, p=2, r=2, num_classes=classes, seed=seed)
    return build_dyclotnet(cfg, init=init, stages=TINY)


def test_scaled_width_rounding():
    assert stage_widths(1.0, 2) == [32, 64, 128, 256]
    assert stage_widths(0.5, 2) == [16, 32, 64, 128]
    assert scaled_width(32, 0.25, 2) == 8
    assert scaled_width(10, 0.3, 2) == 4
    assert scaled_width(64, 0.01, 4) == 8


def test_full_model_layout():
    model = build_dyclotnet(TrainConfig(alpha=1.0, p=2, r=2, num_classes=10), init="zeros")
    blocks = model.blocks
    assert len(blocks) == 18
    assert [(b.N, b.stride) for b in blocks] == (
        [(64, 1)] * 5 + [(128, 2)] + [(128, 1)] * 5 + [(256, 2)] + [(256, 1)] * 6)
    assert all(b.N % 4 == 0 for b in blocks)
    assert not blocks[0].stride == 2 and blocks[0].M == 32


def test_full_model_trace_shapes():
    model = build_dyclotnet(TrainConfig(alpha=1.0, p=2, r=2, num_classes=10))
    trace = []
    logits = model.forward(np.zeros((2, 32, 32, 3), np.float32), trace=trace)
    assert logits.shape == (2, 10)
    shapes = dict(trace)
    assert shapes["stem"] == (2, 32, 32, 32)
    assert shapes["block04"] == (2, 32, 32, 64)
    assert shapes["block05"] == (2, 16, 16, 128)
    assert shapes["block11"] == (2, 8, 8, 256)
    assert shapes["block17"] == (2, 8, 8, 256)
    assert shapes["pool"] == (2, 256)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        tiny_model().forward(np.zeros((1, 16, 16, 3), np.float32))


@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_summary_counters_agree(alpha):
    model = build_dyclotnet(TrainConfig(alpha=alpha, p=2, r=2, num_classes=10))
    summary = model_summary(model)
    assert summary.counters_agree
    rows = {r.name: r for r in summary.rows}
    assert rows["fc"].params == 10 * stage_widths(alpha, 2)[-1] + 10
    if alpha == 1.0:
        assert rows["stem"].params == 864


def test_zero_model_loss_is_log_classes():
    model = tiny_model(classes=5, init="zeros")
    x = np.random.default_rng(0).uniform(size=(4, 32, 32, 3)).astype(np.float32)
    logits = forward(model, x)
    assert np.all(logits == logits[0, 0])
    loss = float(ad.softmax_cross_entropy(logits, np.array([0, 1, 2, 3])))
    assert loss == pytest.approx(math.log(5), abs=1e-6)


def test_identical_images_and_permutation():
    model = tiny_model()
    x = synth_dataset(1, 2, 3).images
    logits = forward(model, x)
    perm = np.array([3, 0, 5, 1, 4, 2])
    np.testing.assert_allclose(forward(model, x[perm]), logits[perm], atol=1e-6)
    same = forward(model, np.repeat(x[:1], 3, axis=0))
    assert np.all(same == same[0])


def test_loss_gradients_match_finite_differences():
    model = tiny_model(seed=2)
    data = synth_dataset(2, 2, 3)
    params64 = {k: v.astype(np.float64) for k, v in model.params.items()}
    _, grads = loss_and_grads(model, data.images.astype(np.float64), data.labels, params64)
    rng = np.random.default_rng(0)
    for name in ("fc.W", "block01.pwA", "block00.dct.W1", "stem.w"):
        flat = rng.choice(params64[name].size, 3, replace=False)
        for i in flat:
            idx = np.unravel_index(i, params64[name].shape)

            def loss_at(delta):
                p = dict(params64)
                p[name] = p[name].copy()
                p[name][idx] += delta
                return float(ad.softmax_cross_entropy(model.forward(data.images.astype(np.float64), p),
                                                      data.labels))
            numeric = (loss_at(1e-5) - loss_at(-1e-5)) / 2e-5
            assert ad.relative_error(grads[name][idx], numeric) <= 1e-4 or abs(grads[name][idx] - numeric) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_two_block_model_loss_decreases(seed):
    cfg = TrainConfig(alpha=1.0, p=2, r=2, num_classes=3, lr=0.05, momentum=0.9, seed=seed)
    model = build_dyclotnet(cfg, stages=TINY)
    data = synth_dataset(seed, 4, 3)
    velocity, losses = None, []
    for _ in range(5):
        loss, grads = loss_and_grads(model, data.images, data.labels)
        losses.append(loss)
        model.params, velocity = ad.sgd_step(model.params, grads, velocity, cfg.lr, cfg.momentum)
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_initial_loss_near_log3():
    cfg = TrainConfig(alpha=0.25, p=2, r=2, num_classes=3, epochs=1, batch_size=8, seed=0)
    data = synth_dataset(0, 4, 3)
    history = train(build_dyclotnet(cfg), data, cfg)
    assert abs(history[0].loss - math.log(3)) <= 0.2


def test_train_is_deterministic_and_validates():
    cfg = TrainConfig(alpha=1.0, p=2, r=2, num_classes=3, epochs=3, batch_size=4, seed=4)
    data = synth_dataset(4, 3, 3)
    runs = []
    for _ in range(2):
        model = build_dyclotnet(cfg, stages=TINY)
        runs.append((train(model, data, cfg), model.params))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])
    with pytest.raises(ValueError):
        train(build_dyclotnet(cfg, stages=TINY), data.subset(slice(0, 3)), cfg)


def test_evaluate_examples():
    model = tiny_model(init="zeros")
    model.params["fc.b"][:] = [1.0, 0.0, 0.0]
    data = Dataset(np.zeros((4, 32, 32, 3), np.float32), np.zeros(4, np.int64), 3)
    assert evaluate(model, data)[0] == 1.0
    balanced = synth_dataset(0, 5, 3)
    model.params["fc.b"][:] = 0
    acc, loss = evaluate(model, balanced)
    assert acc == pytest.approx(1 / 3)
    assert loss == pytest.approx(math.log(3), abs=1e-6)
    trained = tiny_model(seed=3)
    assert evaluate(trained, balanced) == evaluate(trained, balanced)


def test_from_params_round_trip():
    model = build_dyclotnet(TrainConfig(alpha=0.25, p=4, r=2, num_classes=7, seed=1))
    rebuilt = ModelGraph.from_params(model.params)
    assert rebuilt.layers == model.layers
    assert rebuilt.num_classes == 7


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(alpha=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    path = tmp_path / "cfg.json"
    path.write_text('{"alpha": 0.25}')
    with pytest.raises(ValueError, match="missing"):
        TrainConfig.from_json(path)
