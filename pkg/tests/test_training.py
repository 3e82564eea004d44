import numpy as np
import pytest

from scaledrop.binary import BatchNormParams
from scaledrop.dropout import DropoutConfig, DropoutMask
from scaledrop.model import build_model, forward
from scaledrop.training import (
    SGD,
    Hyperparams,
    TrainingDiverged,
    _assign,
    backward_ste,
    cross_entropy,
    cross_entropy_grad,
    forward_train,
    loss_objective,
    parameters,
    regularizer_grads,
    scale_penalty,
    total_grads,
    train,
)

MLP = {"input_shape": [6], "encoding": {"kind": "sign"},
       "layers": [{"type": "dense", "units": 5}, {"type": "dense", "units": 4}, {"type": "dense", "units": 3}]}
RESNETLET = {"input_shape": [8, 8, 1], "encoding": {"kind": "sign"},
             "layers": [{"type": "conv", "channels": 3, "kernel": 3, "padding": 1, "pool": 2},
                        {"type": "residual", "layers": [{"type": "conv", "channels": 3, "kernel": 3, "padding": 1}]},
                        {"type": "dense", "units": 4}]}


def randomize_bn(model, rng):
    for layer in model.binary_layers():
        c = layer.out_channels
        layer.bias = rng.normal(size=c)
        layer.bn = BatchNormParams(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.3, c), rng.normal(size=c),
                                   rng.uniform(1, 4, c))


def fd_check(model, x, y, cfg, masks, hp, training, h=1e-6):
    def loss():
        logits, _ = forward_train(model, x, cfg, None, masks=masks, training=training, surrogate=True)
        return loss_objective(logits, y, model, hp)

    saved = [{k: v.copy() for k, v in p.items()} for p in parameters(model)]
    logits, cache = forward_train(model, x, cfg, None, masks=masks, training=training, surrogate=True)
    grads = total_grads(cache, logits, y, hp)
    worst = {}
    for i, params in enumerate(saved):
        for name, arr in params.items():
            for j in range(arr.size):
                plus, minus = arr.copy(), arr.copy()
                plus.flat[j] += h
                minus.flat[j] -= h
                _assign(model, i, name, plus)
                lp = loss()
                _restore(model, saved)
                _assign(model, i, name, minus)
                lm = loss()
                _restore(model, saved)
                fd, an = (lp - lm) / (2 * h), grads[i][name].flat[j]
                err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                worst[name] = max(worst.get(name, 0.0), err)
    return worst


def _restore(model, saved):
    for i, params in enumerate(saved):
        for name, arr in params.items():
            _assign(model, i, name, arr.copy())


# --------------------------------------------------------------------------- forward


def test_plain_bnn_when_dropout_disabled(rng):
    model = build_model(MLP, seed=2)
    for layer in model.binary_layers():
        layer.alpha = np.ones(layer.out_channels)
    x = rng.normal(size=(9, 6))
    cfg = DropoutConfig("unitary", [0.0] * 3)
    logits, _ = forward_train(model, x, cfg, np.random.default_rng(0), training=False)
    # hand-rolled BNN: sign weights of the normalized proxies, sign activations
    a = np.where(x >= 0, 1.0, -1.0)
    for k, layer in enumerate(model.binary_layers()):
        w = layer.weight - layer.weight.mean(1, keepdims=True)
        w = np.where(w >= 0, 1.0, -1.0)
        z = a @ w.T + layer.bias
        z = layer.bn.gamma * (z - layer.bn.running_mean) / np.sqrt(layer.bn.running_var + 1e-5) + layer.bn.beta
        a = z if k == 2 else np.where(z >= 0, 1.0, -1.0)
    np.testing.assert_allclose(logits, a, rtol=1e-12)


def test_single_layer_by_hand():
    model = build_model({"input_shape": [2], "encoding": {"kind": "sign"}, "layers": [{"type": "dense", "units": 2}]}, 0)
    layer = model.binary_layers()[0]
    layer.weight = np.array([[1.0, -1.0], [2.0, 3.0]])  # signs after normalization: [+1, -1], [-1, +1]
    layer.bias = np.array([0.5, 0.0])
    layer.alpha = np.array([2.0, 3.0])
    x = np.array([[0.5, -0.2]])  # encodes to [+1, -1]
    logits, _ = forward_train(model, x, DropoutConfig("unitary", [1.0]), np.random.default_rng(0), training=False)
    # S = [2, -2]; z = (S + b) * alpha = [5, -6]; eval BN with unit stats
    np.testing.assert_allclose(logits, [[5 / np.sqrt(1 + 1e-5), -6 / np.sqrt(1 + 1e-5)]], rtol=1e-14)


def test_same_seed_same_logits(rng):
    model = build_model(MLP, seed=2)
    x = rng.normal(size=(4, 6))
    cfg = DropoutConfig("unitary", [0.5] * 3)
    a, _ = forward_train(model, x, cfg, np.random.default_rng(7), training=False)
    b, _ = forward_train(model, x, cfg, np.random.default_rng(7), training=False)
    assert np.array_equal(a, b)


# --------------------------------------------------------------------------- loss


def test_loss_without_regularizers_is_cross_entropy(rng):
    model = build_model(MLP, seed=0)
    logits, y = rng.normal(size=(5, 3)), rng.integers(0, 3, 5)
    hp = Hyperparams(lambda_weight_decay=0, phi_scale_reg=0)
    assert loss_objective(logits, y, model, hp) == cross_entropy(logits, y)


def test_cross_entropy_oracle():
    logits = np.array([[1.0, 2.0, 0.5]])
    expected = -np.log(np.exp(2.0) / np.exp(logits).sum())
    assert cross_entropy(logits, np.array([1])) == pytest.approx(expected, rel=1e-14)


def test_unit_scale_means_contribute_nothing():
    model = build_model(MLP, seed=0)
    for layer in model.binary_layers():
        layer.alpha = np.array([0.5, 1.5] + [1.0] * (layer.out_channels - 2))
    assert scale_penalty(model) == 0


def test_scale_term_two_layers():
    model = build_model({"input_shape": [3], "encoding": {"kind": "sign"},
                         "layers": [{"type": "dense", "units": 2}, {"type": "dense", "units": 2}]}, 0)
    model.binary_layers()[0].alpha = np.array([0.25, 0.75])
    model.binary_layers()[1].alpha = np.array([1.0, 3.0])
    logits, y = np.zeros((1, 2)), np.array([0])
    hp = Hyperparams(lambda_weight_decay=0, phi_scale_reg=1e-5)
    assert loss_objective(logits, y, model, hp) - cross_entropy(logits, y) == pytest.approx(1.25e-5, rel=1e-12)


def test_scale_regularizer_gradient():
    model = build_model(MLP, seed=0)
    hp = Hyperparams(phi_scale_reg=1e-5)
    for layer, g in zip(model.binary_layers(), regularizer_grads(model, hp)):
        mu, c = layer.alpha.mean(), layer.out_channels
        np.testing.assert_allclose(g["alpha"], -2 * 1e-5 * (1 - mu) / c, rtol=1e-14)


# --------------------------------------------------------------------------- backward


def test_dropped_scale_gets_only_regularizer_gradient(rng):
    model = build_model(MLP, seed=3)
    x, y = rng.normal(size=(8, 6)), rng.integers(0, 3, 8)
    cfg = DropoutConfig("unitary", [0.5] * 3)
    masks = [DropoutMask(0), DropoutMask(1), DropoutMask(0)]
    hp = Hyperparams(phi_scale_reg=1e-3)
    logits, cache = forward_train(model, x, cfg, None, masks=masks)
    grads = total_grads(cache, logits, y, hp)
    reg = regularizer_grads(model, hp)
    for k in (0, 2):
        assert np.array_equal(grads[k]["alpha"], reg[k]["alpha"])
    assert np.any(backward_ste(cache, cross_entropy_grad(logits, y))[1]["alpha"] != 0)


def test_backward_needs_cache():
    with pytest.raises(ValueError):
        backward_ste(None, np.zeros((1, 2)))


def test_unit_scale_alpha_gradient_matches_finite_differences(rng):
    model = build_model({"input_shape": [4], "encoding": {"kind": "sign"}, "layers": [{"type": "dense", "units": 3}]}, 1)
    model.binary_layers()[0].alpha = np.ones(3)
    randomize_bn(model, rng)
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)
    worst = fd_check(model, x, y, DropoutConfig("unitary", [1.0]), [DropoutMask(1)], Hyperparams(), training=False)
    assert worst["alpha"] < 1e-4


@pytest.mark.parametrize("variant", ["unitary", "average", "random"])
def test_residual_conv_gradients(rng, variant):
    model = build_model(RESNETLET, seed=1)
    randomize_bn(model, rng)
    x, y = rng.normal(size=(4, 8, 8, 1)), rng.integers(0, 4, 4)
    masks = [DropoutMask(1), DropoutMask(0, 0.8), DropoutMask(1)]
    worst = fd_check(model, x, y, DropoutConfig(variant, [0.5] * 3), masks, Hyperparams(1e-2, 1e-1), training=False)
    assert max(worst.values()) < 1e-4, worst


# --------------------------------------------------------------------------- training loop


def test_zero_learning_rate_leaves_parameters(rng):
    model = build_model(MLP, seed=0)
    before = [{k: v.copy() for k, v in p.items()} for p in parameters(model)]
    x, y = rng.normal(size=(20, 6)), rng.integers(0, 3, 20)
    train(model, x, y, Hyperparams(learning_rate=0.0, epochs=2, batch_size=8), DropoutConfig("unitary", [0.5] * 3))
    for b, a in zip(before, parameters(model)):
        for k in b:
            assert np.array_equal(b[k], a[k])


def test_training_is_deterministic(rng):
    x, y = rng.normal(size=(40, 6)), rng.integers(0, 3, 40)
    runs = []
    for _ in range(2):
        model = build_model(MLP, seed=5)
        model, hist = train(model, x, y, Hyperparams(learning_rate=1e-2, epochs=3, batch_size=8, seed=3),
                            DropoutConfig("unitary", [0.5] * 3))
        runs.append((parameters(model), hist.to_csv()))
    assert runs[0][1] == runs[1][1]
    for a, b in zip(runs[0][0], runs[1][0]):
        for k in a:
            assert np.array_equal(a[k], b[k])


def test_regularizer_pulls_scale_mean_to_one():
    model = build_model(MLP, seed=0)
    for i, layer in enumerate(model.binary_layers()):
        layer.alpha = np.linspace(2.0, 4.0, layer.out_channels) if i % 2 else np.linspace(0.1, 0.3, layer.out_channels)
    hp = Hyperparams(lambda_weight_decay=0.0, phi_scale_reg=1.0)
    opt = SGD(0.5)
    gaps = [np.array([abs(1 - l.alpha.mean()) for l in model.binary_layers()])]
    for _ in range(20):
        grads = [{"weight": np.zeros_like(l.weight), "bias": np.zeros_like(l.bias), "alpha": g["alpha"],
                  "gamma": np.zeros_like(l.bn.gamma), "beta": np.zeros_like(l.bn.beta)}
                 for l, g in zip(model.binary_layers(), regularizer_grads(model, hp))]
        opt.step(model, grads)
        gaps.append(np.array([abs(1 - l.alpha.mean()) for l in model.binary_layers()]))
    gaps = np.array(gaps)
    assert np.all(np.diff(gaps, axis=0) < 0)
    assert np.all(gaps[-1] < 0.1 * gaps[0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(rng):
    model = build_model(MLP, seed=0)
    model.binary_layers()[-1].bn.gamma[:] = np.inf
    x, y = rng.normal(size=(8, 6)), rng.integers(0, 3, 8)
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(model, x, y, Hyperparams(epochs=1, batch_size=8), DropoutConfig("unitary", [0.5] * 3))


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(build_model(MLP, 0), np.zeros((0, 6)), np.zeros(0, int), Hyperparams(), DropoutConfig("unitary", [0.5] * 3))


def test_history_csv_columns(moons):
    lines = moons["history"].to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,test_acc"
    assert len(lines) == 101


def test_point_estimate_forward_matches_training_path(moons):
    model, te = moons["model"], moons["test"]
    a = forward(model, te.x)
    b, _ = forward_train(model, te.x, moons["cfg"], None, training=False)
    assert np.array_equal(a, b)
