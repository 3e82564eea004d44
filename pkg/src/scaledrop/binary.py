"""Bit-packed {-1, +1} tensors, XNOR/popcount arithmetic and the weight pipeline.

Bit 1 encodes +1 and bit 0 encodes -1. Tensors are packed along their last
axis into little-endian 64-bit words; every row is padded to a word boundary
with zero bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORD_BITS = 64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-5
# Padded conv positions hold logical -1 (bit 0) so they stay representable.
PAD_VALUE = -1

# Bound on the (M, N, words) XOR intermediate, in words.
_CHUNK_WORDS = 1 << 21


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class PackedBinaryTensor:
    """A {-1, +1} tensor stored as packed 64-bit words along the last axis.

    ``bits`` has shape ``shape[:-1] + (n_words,)`` and dtype ``uint64``.
    """

    shape: tuple[int, ...]
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.shape) == 0:
            raise ValueError("PackedBinaryTensor needs at least one dimension")
        expected = tuple(self.shape[:-1]) + (n_words(self.shape[-1]),)
        if self.bits.shape != expected or self.bits.dtype != np.uint64:
            raise ValueError(f"bits must be uint64 of shape {expected}, got {self.bits.dtype} {self.bits.shape}")

    @classmethod
    def from_bool(cls, on: np.ndarray) -> "PackedBinaryTensor":
        on = np.asarray(on, dtype=bool)
        if on.ndim == 0:
            on = on.reshape(1)
        length = on.shape[-1]
        width = n_words(length) * WORD_BITS
        padded = np.zeros(on.shape[:-1] + (width,), dtype=bool)
        padded[..., :length] = on
        packed = np.packbits(padded, axis=-1, bitorder="little")
        words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
        return cls(tuple(on.shape), words)

    @classmethod
    def from_signs(cls, values: np.ndarray) -> "PackedBinaryTensor":
        """Pack a tensor whose entries are exactly -1 or +1."""
        values = np.asarray(values)
        if not np.all((values == 1) | (values == -1)):
            raise ValueError("from_signs expects entries in {-1, +1}")
        return cls.from_bool(values > 0)

    @property
    def length(self) -> int:
        return self.shape[-1]

    def to_bool(self) -> np.ndarray:
        raw = np.ascontiguousarray(self.bits.astype("<u8")).view(np.uint8)
        unpacked = np.unpackbits(raw, axis=-1, bitorder="little")
        return unpacked[..., : self.length].astype(bool).reshape(self.shape)

    def unpack(self) -> np.ndarray:
        """Decode to an int8 array of -1/+1."""
        return np.where(self.to_bool(), 1, -1).astype(np.int8)

    def reshape(self, *shape: int) -> "PackedBinaryTensor":
        return PackedBinaryTensor.from_bool(self.to_bool().reshape(*shape))


def n_words(length: int) -> int:
    return max(1, -(-length // WORD_BITS))


def _valid_mask(length: int) -> np.ndarray:
    words = n_words(length)
    mask = np.full(words, np.iinfo(np.uint64).max, dtype=np.uint64)
    tail = length % WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    if length == 0:
        mask[:] = 0
    return mask


def sign_binarize(w: np.ndarray) -> PackedBinaryTensor:
    """+1 where ``w >= 0`` else -1, packed."""
    w = np.asarray(w, dtype=np.float64)
    _check_finite(w, "sign_binarize input")
    return PackedBinaryTensor.from_bool(w >= 0)


def sign(w: np.ndarray) -> np.ndarray:
    """Float sign with sign(0) = +1."""
    return np.where(np.asarray(w) >= 0, 1.0, -1.0)


def _kernel_view(w: np.ndarray) -> np.ndarray:
    # Linear weights (C_out, fan_in) are treated as 1 x fan_in kernels.
    if w.ndim < 2:
        raise ValueError("channel_normalize needs at least 2 dimensions")
    return w[:, None, :] if w.ndim == 2 else w


def channel_normalize(w: np.ndarray, epsilon: float = NORM_EPS) -> np.ndarray:
    """Zero-centre and scale each kernel over its last two dimensions.

    The variance uses the one-pass form ``mean(W**2) - mean(W)**2``, clamped
    at zero because rounding can push it slightly negative.
    """
    w = np.asarray(w, dtype=np.float64)
    _check_finite(w, "channel_normalize input")
    k = _kernel_view(w)
    mu = k.mean(axis=(-2, -1), keepdims=True)
    centered = k - mu
    var = np.maximum((k * k).mean(axis=(-2, -1), keepdims=True) - mu * mu, 0.0)
    out = centered / (np.sqrt(var) + epsilon)
    return out.reshape(w.shape)


def channel_normalize_backward(w: np.ndarray, grad_out: np.ndarray, epsilon: float = NORM_EPS) -> np.ndarray:
    """Vector-Jacobian product of :func:`channel_normalize`."""
    w = np.asarray(w, dtype=np.float64)
    k = _kernel_view(w)
    g = np.asarray(grad_out, dtype=np.float64).reshape(k.shape)
    n = k.shape[-1] * k.shape[-2]
    mu = k.mean(axis=(-2, -1), keepdims=True)
    c = k - mu
    var = np.maximum((k * k).mean(axis=(-2, -1), keepdims=True) - mu * mu, 0.0)
    s = np.sqrt(var)
    denom = s + epsilon
    g_mean = g.mean(axis=(-2, -1), keepdims=True)
    gc = (g * c).sum(axis=(-2, -1), keepdims=True)
    safe_s = np.where(s > 0, s, 1.0)
    second = np.where(s > 0, c * gc / (n * safe_s * denom * denom), 0.0)
    return ((g - g_mean) / denom - second).reshape(w.shape)


def xnor_popcount_matmul(w: PackedBinaryTensor, x: PackedBinaryTensor) -> np.ndarray:
    """Binary matrix product via XNOR and popcount.

    ``w`` has logical shape (M, K) and ``x`` has logical shape (N, K), i.e.
    the right-hand operand is given column-wise. Returns the (M, N) int64
    matrix ``2 * popcount(XNOR(w_i, x_j)) - K``.
    """
    if len(w.shape) != 2 or len(x.shape) != 2:
        raise ValueError("xnor_popcount_matmul expects 2-D operands")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"inner dimensions differ: {w.shape[1]} vs {x.shape[1]}")
    k = w.shape[1]
    mask = _valid_mask(k)
    m, n = w.shape[0], x.shape[0]
    words = mask.shape[0]
    out = np.empty((m, n), dtype=np.int64)
    step = max(1, _CHUNK_WORDS // max(1, m * words))
    wb = w.bits[:, None, :]
    for start in range(0, n, step):
        xb = x.bits[None, start : start + step, :]
        agree = ~(wb ^ xb) & mask
        counts = np.bitwise_count(agree).sum(axis=-1, dtype=np.int64)
        out[:, start : start + step] = 2 * counts - k
    return out


def output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or stride < 1:
        raise ValueError(f"kernel {kernel} does not fit input {size} with padding {padding}")
    return span // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0, pad_value=PAD_VALUE) -> np.ndarray:
    """Patches of an NHWC tensor as rows ordered (kh, kw, C).

    Returns an array of shape (B, Ho, Wo, kernel * kernel * C).
    """
    if x.ndim != 4:
        raise ValueError("im2col expects an NHWC tensor")
    b, h, w_, c = x.shape
    ho = output_size(h, kernel, stride, padding)
    wo = output_size(w_, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, Ho, Wo, C, kh, kw) -> (B, Ho, Wo, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, ho, wo, kernel * kernel * c)


def col2im(cols: np.ndarray, input_shape: tuple[int, ...], kernel: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`; padded positions are dropped."""
    b, h, w_, c = input_shape
    _, ho, wo, _ = cols.shape
    cols = cols.reshape(b, ho, wo, kernel, kernel, c)
    out = np.zeros((b, h + 2 * padding, w_ + 2 * padding, c), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[:, :, :, i, j, :]
    return out[:, padding : padding + h, padding : padding + w_, :]


def binary_conv2d(w: PackedBinaryTensor, x: PackedBinaryTensor, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Binary convolution of packed NHWC activations.

    ``w`` has logical shape (C_out, K, K, C_in) and ``x`` has logical shape
    (B, H, W, C_in). Padding contributes logical -1. Returns int64 sums of
    shape (B, Ho, Wo, C_out).
    """
    if len(w.shape) != 4 or len(x.shape) != 4:
        raise ValueError("binary_conv2d expects 4-D kernel and NHWC input")
    c_out, kh, kw, c_in = w.shape
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if x.shape[3] != c_in:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {c_in}")
    cols = im2col(x.to_bool(), kh, stride, padding, pad_value=False)
    b, ho, wo, f = cols.shape
    packed_cols = PackedBinaryTensor.from_bool(cols.reshape(-1, f))
    packed_w = w.reshape(c_out, f)
    sums = xnor_popcount_matmul(packed_w, packed_cols)
    return sums.T.reshape(b, ho, wo, c_out)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPS

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != c:
                raise ValueError(f"{name} length differs from gamma ({c})")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int) -> "BatchNormParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    @property
    def channels(self) -> int:
        return len(self.gamma)


def batch_stats(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = tuple(range(z.ndim - 1))
    return z.mean(axis=axes), z.var(axis=axes)


def batchnorm_forward(z: np.ndarray, p: BatchNormParams, training: bool, momentum: float = BN_MOMENTUM) -> np.ndarray:
    """Batch normalization over the trailing channel axis.

    In training mode the batch statistics are used and the running estimates
    are updated in place (the running variance takes the unbiased batch
    variance).
    """
    if z.shape[-1] != p.channels:
        raise ValueError(f"z has {z.shape[-1]} channels, batch norm has {p.channels}")
    if training:
        mean, var = batch_stats(z)
        count = z.size // z.shape[-1]
        unbiased = var * count / max(count - 1, 1)
        p.running_mean = (1 - momentum) * p.running_mean + momentum * mean
        p.running_var = (1 - momentum) * p.running_var + momentum * unbiased
    else:
        mean, var = p.running_mean, p.running_var
    return p.gamma * (z - mean) / np.sqrt(var + p.epsilon) + p.beta
