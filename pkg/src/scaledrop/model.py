"""Binary network description and the shared feed-forward pipeline.

Each binary layer computes

    S  = sign(W)^T (x) sign(a)          (XNOR/popcount sums)
    z  = (S + b) * scale                (scale vector, subject to Scale-Dropout)
    z  = maxpool(z)                     (optional, conv only)
    zn = BatchNorm(z)
    a  = sign(zn)                       (omitted on the output layer)

How ``S`` is produced is delegated to an engine: :class:`FloatEngine` uses
float arithmetic on the +-1 values and keeps what backprop needs,
:class:`PackedEngine` runs the bit-packed kernels, and the crossbar simulator
provides a third engine. Everything after ``S`` is shared so the engines give
bit-identical logits whenever their sums agree.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .binary import (
    BatchNormParams,
    PackedBinaryTensor,
    batchnorm_forward,
    binary_conv2d,
    channel_normalize,
    im2col,
    output_size,
    sign,
    xnor_popcount_matmul,
)
from .dropout import DropoutConfig, DropoutMask, apply_scale, draw_layer_mask, effective_scale


# --------------------------------------------------------------------------- input encoding


@dataclass
class SignEncoder:
    threshold: float = 0.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return sign(np.asarray(x, dtype=np.float64) - self.threshold)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(input_shape)

    def to_dict(self) -> dict:
        return {"kind": "sign", "threshold": self.threshold}


@dataclass
class ThermometerEncoder:
    """Each scalar feature becomes ``levels`` +-1 bits, one per threshold."""

    levels: int = 16
    low: float = -1.0
    high: float = 1.0

    @property
    def thresholds(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.levels)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return sign(x[:, :, None] - self.thresholds).reshape(len(x), -1)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return (int(np.prod(input_shape)) * self.levels,)

    def to_dict(self) -> dict:
        return {"kind": "thermometer", "levels": self.levels, "low": self.low, "high": self.high}


Encoder = Union[SignEncoder, ThermometerEncoder]


def make_encoder(spec: dict | None) -> Encoder:
    spec = dict(spec or {"kind": "sign"})
    kind = spec.pop("kind", "sign")
    if kind == "sign":
        return SignEncoder(**spec)
    if kind == "thermometer":
        return ThermometerEncoder(**spec)
    raise ValueError(f"unknown input encoding {kind!r}")


# --------------------------------------------------------------------------- layers


@dataclass
class BinaryLayer:
    kind: str  # "dense" or "conv"
    weight: np.ndarray | None  # real proxy weights; None for inference-only models
    bias: np.ndarray
    alpha: np.ndarray
    bn: BatchNormParams
    in_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    pool: int = 1
    activation: bool = True
    bits: PackedBinaryTensor | None = field(default=None, repr=False)

    @property
    def out_channels(self) -> int:
        return len(self.bias)

    @property
    def fan_in(self) -> int:
        return self.kernel * self.kernel * self.in_channels

    @property
    def param_count(self) -> int:
        return self.out_channels * self.fan_in

    def proxy_matrix(self) -> np.ndarray:
        """Channel-normalized proxy weights as (C_out, fan_in), columns ordered (kh, kw, C_in)."""
        wn = channel_normalize(self.weight)
        if self.kind == "conv":
            wn = wn.transpose(0, 2, 3, 1)
        return wn.reshape(self.out_channels, self.fan_in)

    def binary_matrix(self) -> np.ndarray:
        if self.weight is None:
            if self.bits is None:
                raise ValueError("layer has neither proxy weights nor packed bits")
            return self.bits.unpack().astype(np.float64)
        return sign(self.proxy_matrix())

    def packed_weights(self) -> PackedBinaryTensor:
        if self.weight is None:
            return self.bits
        return PackedBinaryTensor.from_bool(self.proxy_matrix() >= 0)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.out_channels,)
        h, w, _ = input_shape
        ho = output_size(h, self.kernel, self.stride, self.padding) // self.pool
        wo = output_size(w, self.kernel, self.stride, self.padding) // self.pool
        return (ho, wo, self.out_channels)


@dataclass
class ResidualBlock:
    """``sign(body(a) + a)``; the body's last layer emits real values."""

    body: list[BinaryLayer]


Layer = Union[BinaryLayer, ResidualBlock]


@dataclass
class ModelSpec:
    input_shape: tuple[int, ...]
    encoder: Encoder
    layers: list[Layer]
    topology: dict | None = None  # descriptor the model was built from

    def binary_layers(self) -> list[BinaryLayer]:
        out: list[BinaryLayer] = []
        for layer in self.layers:
            out.extend(layer.body if isinstance(layer, ResidualBlock) else [layer])
        return out

    @property
    def n_classes(self) -> int:
        return self.binary_layers()[-1].out_channels

    @property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.binary_layers())

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match model input {tuple(self.input_shape)}")
        return self.encoder(x)


# --------------------------------------------------------------------------- construction


def _init_layer(kind, c_in, c_out, rng, scale_init, kernel=1, stride=1, padding=0, pool=1, activation=True):
    fan_in = kernel * kernel * c_in
    shape = (c_out, fan_in) if kind == "dense" else (c_out, c_in, kernel, kernel)
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    low, high = scale_init
    alpha = rng.uniform(low, high, size=c_out) if high > low else np.full(c_out, float(low))
    return BinaryLayer(kind, weight, np.zeros(c_out), alpha, BatchNormParams.identity(c_out), c_in,
                       kernel, stride, padding, pool, activation)


def build_model(topology: dict, seed: int) -> ModelSpec:
    """Build a freshly initialized model from a topology descriptor.

    ``topology`` holds ``input_shape``, ``encoding`` and ``layers``; layers are
    dicts with ``type`` in {dense, conv, residual}. The last layer never gets
    a sign activation.
    """
    rng = np.random.default_rng([seed, 0xB1])
    encoder = make_encoder(topology.get("encoding"))
    scale_init = tuple(topology.get("scale_init", (0.5, 1.5)))
    input_shape = tuple(topology["input_shape"])
    shape = encoder.output_shape(input_shape)
    specs = topology["layers"]
    if not specs:
        raise ValueError("topology has no layers")

    def make(spec, shape, last):
        kind = spec["type"]
        if kind == "dense":
            layer = _init_layer("dense", int(np.prod(shape)), spec["units"], rng, scale_init, activation=not last)
        elif kind == "conv":
            if len(shape) != 3:
                raise ValueError("conv layer needs an (H, W, C) input")
            layer = _init_layer("conv", shape[2], spec["channels"], rng, scale_init, spec.get("kernel", 3),
                                spec.get("stride", 1), spec.get("padding", 0), spec.get("pool", 1), not last)
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        return layer, layer.output_shape(shape)

    layers: list[Layer] = []
    for i, spec in enumerate(specs):
        last = i == len(specs) - 1
        if spec["type"] == "residual":
            if last:
                raise ValueError("the output layer cannot be a residual block")
            body, inner = [], shape
            for j, sub in enumerate(spec["layers"]):
                layer, inner = make(sub, inner, last=j == len(spec["layers"]) - 1)
                body.append(layer)
            if inner != shape:
                raise ValueError(f"residual block changes shape {shape} -> {inner}")
            layers.append(ResidualBlock(body))
        else:
            layer, shape = make(spec, shape, last)
            layers.append(layer)
    if isinstance(layers[-1], BinaryLayer) and layers[-1].kind != "dense":
        raise ValueError("the output layer must be dense")
    return ModelSpec(input_shape, encoder, layers, copy.deepcopy(topology))


# --------------------------------------------------------------------------- engines


class FloatEngine:
    """Float arithmetic on +-1 values; records what backprop needs.

    With ``surrogate=True`` the weight sign is replaced by the identity on the
    normalized proxy weights, which is the smooth function whose gradient the
    straight-through estimator returns.
    """

    def __init__(self, surrogate: bool = False):
        self.surrogate = surrogate

    def weighted_sum(self, layer: BinaryLayer, index: int, a: np.ndarray, rec: dict | None) -> np.ndarray:
        wmat = layer.proxy_matrix() if self.surrogate else layer.binary_matrix()
        if layer.kind == "conv":
            cols = im2col(a, layer.kernel, layer.stride, layer.padding)
        else:
            cols = a.reshape(len(a), -1)
        if rec is not None:
            rec.update(cols=cols, wmat=wmat, input_shape=a.shape)
        return cols @ wmat.T

    def scale(self, z, alpha, mask, cfg):
        return apply_scale(z, alpha, mask, cfg)


class PackedEngine:
    """XNOR/popcount kernels on bit-packed operands."""

    def __init__(self):
        self._weights: dict[int, PackedBinaryTensor] = {}

    def weighted_sum(self, layer: BinaryLayer, index: int, a: np.ndarray, rec: dict | None) -> np.ndarray:
        w = self._weights.get(id(layer))
        if w is None:
            w = layer.packed_weights()
            self._weights[id(layer)] = w
        if layer.kind == "conv":
            kw = w.reshape(layer.out_channels, layer.kernel, layer.kernel, layer.in_channels)
            return binary_conv2d(kw, PackedBinaryTensor.from_bool(a > 0), layer.stride, layer.padding).astype(np.float64)
        x = PackedBinaryTensor.from_bool(a.reshape(len(a), -1) > 0)
        return xnor_popcount_matmul(w, x).T.astype(np.float64)

    def scale(self, z, alpha, mask, cfg):
        return apply_scale(z, alpha, mask, cfg)


# --------------------------------------------------------------------------- forward


def maxpool(z: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling on NHWC; returns output and argmax window index."""
    b, h, w, c = z.shape
    ho, wo = h // size, w // size
    win = z[:, : ho * size, : wo * size].reshape(b, ho, size, wo, size, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, size * size)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def maxpool_backward(g: np.ndarray, arg: np.ndarray, size: int, shape: tuple[int, ...]) -> np.ndarray:
    b, h, w, c = shape
    ho, wo = h // size, w // size
    win = np.zeros((b, ho, wo, c, size * size))
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    win = win.reshape(b, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(b, ho * size, wo * size, c)
    out = np.zeros(shape)
    out[:, : ho * size, : wo * size] = win
    return out


def point_masks(model: ModelSpec) -> list[DropoutMask]:
    """All scales applied: the deterministic point-estimate network."""
    return [DropoutMask(1) for _ in model.binary_layers()]


def draw_masks(model: ModelSpec, cfg: DropoutConfig, rng: np.random.Generator,
               rates: Sequence[float] | None = None) -> list[DropoutMask]:
    """Exactly one Bernoulli draw per binary layer, in layer order."""
    rates = cfg.p if rates is None else rates
    n = len(model.binary_layers())
    if len(rates) != n:
        raise ValueError(f"{len(rates)} dropout rates for {n} binary layers")
    return [draw_layer_mask(r, cfg, rng) for r in rates]


def _layer_forward(layer, index, a, mask, cfg, engine, training, surrogate, records):
    rec = {} if records is not None else None
    s = engine.weighted_sum(layer, index, a, rec)
    zb = s + layer.bias
    z = engine.scale(zb, layer.alpha, mask, cfg)
    arg = None
    if layer.kind == "conv" and layer.pool > 1:
        pre_pool_shape = z.shape
        z, arg = maxpool(z, layer.pool)
    zn = batchnorm_forward(z, layer.bn, training)
    if layer.activation:
        out = np.clip(zn, -1.0, 1.0) if surrogate else sign(zn)
    else:
        out = zn
    if records is not None:
        rec.update(layer=layer, index=index, mask=mask, zb=zb, z=z, zn=zn, arg=arg,
                   scale=effective_scale(layer.alpha, mask, cfg))
        if arg is not None:
            rec["pre_pool_shape"] = pre_pool_shape
        records.append(rec)
    return out


def forward(model: ModelSpec, x: np.ndarray, masks: Sequence[DropoutMask] | None = None,
            cfg: DropoutConfig | None = None, *, engine=None, training: bool = False,
            surrogate: bool = False, records: list | None = None, encoded: bool = False) -> np.ndarray:
    """Run the network and return real logits of shape (B, n_classes).

    ``masks`` holds one :class:`DropoutMask` per binary layer; ``None`` means
    every scale is applied. ``records`` (a list) collects per-layer state for
    backprop. With ``surrogate=True`` sign activations become hard-tanh.
    """
    engine = engine or PackedEngine()
    cfg = cfg or DropoutConfig()
    masks = list(masks) if masks is not None else point_masks(model)
    a = x if encoded else model.encode(x)
    idx = 0
    for layer in model.layers:
        if isinstance(layer, ResidualBlock):
            h = a
            for sub in layer.body:
                h = _layer_forward(sub, idx, h, masks[idx], cfg, engine, training, surrogate, records)
                idx += 1
            y = h + a
            out = np.clip(y, -1.0, 1.0) if surrogate else sign(y)
            if records is not None:
                records.append({"residual": True, "y": y, "n_body": len(layer.body)})
            a = out
            continue
        if layer.kind == "dense" and a.ndim > 2:
            a = a.reshape(len(a), -1)
        a = _layer_forward(layer, idx, a, masks[idx], cfg, engine, training, surrogate, records)
        idx += 1
    return a


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: ModelSpec, x: np.ndarray, batch_size: int = 256, engine=None) -> np.ndarray:
    """Point-estimate class predictions (every scale applied)."""
    engine = engine or PackedEngine()
    out = [forward(model, x[i : i + batch_size], engine=engine).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)
