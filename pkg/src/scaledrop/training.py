"""Training with the MC Scale-Dropout objective.

Gradients come from a straight-through estimator: sign activations pass
gradient where the pre-activation lies in [-1, 1], weight signs pass it
unchanged onto the channel-normalized proxy weights, and from there through
the normalization to the proxy weights themselves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .binary import batch_stats, channel_normalize_backward, col2im
from .dropout import DropoutConfig, Variant
from .model import FloatEngine, ModelSpec, draw_masks, forward, maxpool_backward, predict, softmax

logger = logging.getLogger(__name__)

PARAM_NAMES = ("weight", "bias", "alpha", "gamma", "beta")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Hyperparams:
    lambda_weight_decay: float = 1e-5
    phi_scale_reg: float = 1e-5
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "adam"
    cosine_decay: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lambda_weight_decay < 0 or self.phi_scale_reg < 0:
            raise ValueError("regularization strengths must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainCache:
    model: ModelSpec
    cfg: DropoutConfig
    records: list
    training: bool


def forward_train(model: ModelSpec, x: np.ndarray, cfg: DropoutConfig, rng: np.random.Generator | None,
                  *, masks=None, rates=None, training: bool = True, surrogate: bool = False):
    """Stochastic forward pass that keeps a cache for :func:`backward_ste`.

    Masks are drawn from ``rng`` (one per binary layer) unless given.
    ``rng=None`` and ``masks=None`` applies every scale.
    """
    if masks is None and rng is not None:
        masks = draw_masks(model, cfg, rng, rates)
    records: list = []
    logits = forward(model, x, masks, cfg, engine=FloatEngine(surrogate), training=training,
                     surrogate=surrogate, records=records)
    return logits, TrainCache(model, cfg, records, training)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logz - shifted[np.arange(len(labels)), labels]))


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def weight_penalty(model: ModelSpec) -> float:
    return float(sum(np.sum(l.weight ** 2) for l in model.binary_layers()))


def scale_penalty(model: ModelSpec) -> float:
    return float(sum((1.0 - l.alpha.mean()) ** 2 for l in model.binary_layers()))


def loss_objective(logits: np.ndarray, labels: np.ndarray, model: ModelSpec, hp: Hyperparams) -> float:
    """Cross-entropy + lambda * sum ||W||^2 + phi * sum (1 - mean(alpha))^2."""
    return (cross_entropy(logits, labels) + hp.lambda_weight_decay * weight_penalty(model)
            + hp.phi_scale_reg * scale_penalty(model))


def regularizer_grads(model: ModelSpec, hp: Hyperparams) -> list[dict]:
    out = []
    for layer in model.binary_layers():
        c = len(layer.alpha)
        out.append({
            "weight": 2.0 * hp.lambda_weight_decay * layer.weight,
            "alpha": np.full(c, -2.0 * hp.phi_scale_reg * (1.0 - layer.alpha.mean()) / c),
        })
    return out


def _bn_backward(g, rec, layer, training):
    bn = layer.bn
    z = rec["z"]
    axes = tuple(range(z.ndim - 1))
    if training:
        mean, var = batch_stats(z)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv = 1.0 / np.sqrt(var + bn.epsilon)
    xhat = (z - mean) * inv
    g_gamma = (g * xhat).sum(axis=axes)
    g_beta = g.sum(axis=axes)
    if training:
        gx = g * bn.gamma
        g_z = inv * (gx - gx.mean(axis=axes) - xhat * (gx * xhat).mean(axis=axes))
    else:
        g_z = g * bn.gamma * inv
    return g_z, g_gamma, g_beta


def _layer_backward(g, rec, cfg, training, need_input):
    layer = rec["layer"]
    g = g.reshape(rec["zn"].shape)
    if layer.activation:
        g = g * (np.abs(rec["zn"]) <= 1.0)
    g_z, g_gamma, g_beta = _bn_backward(g, rec, layer, training)
    if rec["arg"] is not None:
        g_z = maxpool_backward(g_z, rec["arg"], layer.pool, rec["pre_pool_shape"])
    zb = rec["zb"]
    axes = tuple(range(zb.ndim - 1))
    g_zb = g_z * rec["scale"]
    mask = rec["mask"]
    c = layer.out_channels
    if mask.d == 1:
        g_alpha = (g_z * zb).sum(axis=axes)
    elif cfg.variant is Variant.AVERAGE:
        g_alpha = np.full(c, (g_z * zb).sum() / c)
    else:
        g_alpha = np.zeros(c)
    g_bias = g_zb.sum(axis=axes)
    g_s = g_zb.reshape(-1, c)
    cols = rec["cols"].reshape(len(g_s), -1)
    g_wmat = g_s.T @ cols
    if layer.kind == "conv":
        g_wn = g_wmat.reshape(c, layer.kernel, layer.kernel, layer.in_channels).transpose(0, 3, 1, 2)
    else:
        g_wn = g_wmat
    g_weight = channel_normalize_backward(layer.weight, g_wn)
    grads = {"weight": g_weight, "bias": g_bias, "alpha": g_alpha, "gamma": g_gamma, "beta": g_beta}
    g_in = None
    if need_input:
        g_cols = g_s @ rec["wmat"]
        if layer.kind == "conv":
            g_cols = g_cols.reshape(rec["cols"].shape)
            g_in = col2im(g_cols, rec["input_shape"], layer.kernel, layer.stride, layer.padding)
        else:
            g_in = g_cols.reshape(rec["input_shape"])
    return grads, g_in


def backward_ste(cache: TrainCache | None, grad_logits: np.ndarray) -> list[dict]:
    """Data-term gradients, one dict per binary layer keyed by parameter name."""
    if cache is None or not cache.records:
        raise ValueError("backward_ste needs the cache returned by forward_train")
    n_layers = len(cache.model.binary_layers())
    grads: list[dict | None] = [None] * n_layers
    g = grad_logits
    skips: list[list] = []  # [skip_grad, body layers still to process]
    records = cache.records
    for pos in range(len(records) - 1, -1, -1):
        rec = records[pos]
        if rec.get("residual"):
            g = g.reshape(rec["y"].shape) * (np.abs(rec["y"]) <= 1.0)
            skips.append([g, rec["n_body"]])
            continue
        layer_grads, g = _layer_backward(g, rec, cache.cfg, cache.training, need_input=pos > 0)
        grads[rec["index"]] = layer_grads
        if skips:
            skips[-1][1] -= 1
            if skips[-1][1] == 0:
                skip_g, _ = skips.pop()
                g = g.reshape(skip_g.shape) + skip_g
    return grads


def total_grads(cache: TrainCache, logits: np.ndarray, labels: np.ndarray, hp: Hyperparams) -> list[dict]:
    """Gradient of :func:`loss_objective` with respect to every parameter."""
    data = backward_ste(cache, cross_entropy_grad(logits, labels))
    for d, r in zip(data, regularizer_grads(cache.model, hp)):
        d["weight"] = d["weight"] + r["weight"]
        d["alpha"] = d["alpha"] + r["alpha"]
    return data


def parameters(model: ModelSpec) -> list[dict]:
    return [{"weight": l.weight, "bias": l.bias, "alpha": l.alpha, "gamma": l.bn.gamma, "beta": l.bn.beta}
            for l in model.binary_layers()]


def _assign(model: ModelSpec, i: int, name: str, value: np.ndarray) -> None:
    layer = model.binary_layers()[i]
    if name in ("gamma", "beta"):
        setattr(layer.bn, name, value)
    else:
        setattr(layer, name, value)


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, model: ModelSpec, grads: list[dict], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for i, (params, g) in enumerate(zip(parameters(model), grads)):
            for name in PARAM_NAMES:
                key = (i, name)
                m = self.m.get(key, 0.0) * b1 + (1 - b1) * g[name]
                v = self.v.get(key, 0.0) * b2 + (1 - b2) * g[name] ** 2
                self.m[key], self.v[key] = m, v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                _assign(model, i, name, params[name] - lr * mhat / (np.sqrt(vhat) + self.eps))


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, model: ModelSpec, grads: list[dict], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, (params, g) in enumerate(zip(parameters(model), grads)):
            for name in PARAM_NAMES:
                _assign(model, i, name, params[name] - lr * g[name])


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,test_acc"]
        for r in self.rows:
            test = "" if r["test_acc"] is None else repr(r["test_acc"])
            lines.append(f"{r['epoch']},{r['train_loss']!r},{r['train_acc']!r},{test}")
        return "\n".join(lines) + "\n"


def accuracy(model: ModelSpec, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(model, x) == y))


def train(model: ModelSpec, x: np.ndarray, y: np.ndarray, hp: Hyperparams, cfg: DropoutConfig,
          test: tuple[np.ndarray, np.ndarray] | None = None, rates=None) -> tuple[ModelSpec, History]:
    """Minibatch training; mutates and returns ``model`` with a per-epoch history.

    Accuracies in the history are point estimates (every scale applied).
    """
    if len(x) == 0:
        raise ValueError("training set is empty")
    order_rng = np.random.default_rng([hp.seed, 1])
    mask_rng = np.random.default_rng([hp.seed, 2])
    opt = Adam(hp.learning_rate) if hp.optimizer == "adam" else SGD(hp.learning_rate)
    steps_per_epoch = math.ceil(len(x) / hp.batch_size)
    total_steps = steps_per_epoch * hp.epochs
    history = History()
    step = 0
    for epoch in range(1, hp.epochs + 1):
        perm = order_rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), hp.batch_size):
            idx = perm[start : start + hp.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            logits, cache = forward_train(model, x[idx], cfg, mask_rng, rates=rates)
            loss = loss_objective(logits, y[idx], model, hp)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            grads = total_grads(cache, logits, y[idx], hp)
            lr = hp.learning_rate
            if hp.cosine_decay:
                lr = 0.5 * hp.learning_rate * (1 + math.cos(math.pi * step / total_steps))
            opt.step(model, grads, lr)
            losses.append(loss)
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "train_acc": accuracy(model, x, y),
               "test_acc": accuracy(model, *test) if test is not None else None}
        logger.info("epoch %d loss %.4f train %.4f test %s", epoch, row["train_loss"], row["train_acc"], row["test_acc"])
        history.rows.append(row)
    return model, history
