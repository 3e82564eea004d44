"""Datasets: IDX and CSV readers/writers, synthetic generators, OOD and shift sets.

IDX layout (big-endian): a 4-byte magic ``0x00000803`` for uint8 images or
``0x00000801`` for uint8 labels, one 4-byte size per dimension, then the raw
bytes. Images are scaled to [0, 1] and returned NHWC with one channel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], None if self.y is None else self.y[idx])


# --------------------------------------------------------------------------- IDX


def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated dimension sizes at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: payload ends at byte offset {len(raw)}, expected {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ValueError("write_idx handles uint8 labels (1-D) or images (3-D)")
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images: Path, labels: Path | None = None) -> Dataset:
    x = _read_idx(images, IDX_IMAGES_MAGIC).astype(np.float64)[..., None] / 255.0
    y = None
    if labels is not None:
        y = _read_idx(labels, IDX_LABELS_MAGIC).astype(np.int64)
        if len(y) != len(x):
            raise DatasetFormatError(f"{labels}: {len(y)} labels for {len(x)} images")
    return Dataset(x, y)


# --------------------------------------------------------------------------- CSV


def load_csv(path: Path, image_shape: tuple[int, ...] | None = None) -> Dataset:
    """Rows of ``label,f1,f2,...``; a header line starting with ``label`` is skipped."""
    raw = Path(path).read_bytes()
    labels, rows = [], []
    offset = 0
    width = None
    for line in raw.split(b"\n"):
        start = offset
        offset += len(line) + 1
        text = line.strip()
        if not text or text.startswith(b"label"):
            continue
        try:
            values = [float(v) for v in text.split(b",")]
        except ValueError:
            raise DatasetFormatError(f"{path}: non-numeric field in row at byte offset {start}") from None
        if width is None:
            width = len(values)
        if len(values) != width or width < 2:
            raise DatasetFormatError(f"{path}: row at byte offset {start} has {len(values)} fields, expected {width}")
        labels.append(values[0])
        rows.append(values[1:])
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=np.float64)
    if image_shape is not None:
        if int(np.prod(image_shape)) != x.shape[1]:
            raise DatasetFormatError(f"{path}: {x.shape[1]} features cannot form shape {tuple(image_shape)}")
        x = x.reshape((len(x),) + tuple(image_shape))
    y = np.asarray(labels)
    if not np.all(y == np.round(y)):
        raise DatasetFormatError(f"{path}: labels must be integers")
    return Dataset(x, y.astype(np.int64))


def write_csv(path: Path, data: Dataset) -> None:
    flat = data.x.reshape(len(data.x), -1)
    lines = ["label," + ",".join(f"f{i}" for i in range(flat.shape[1]))]
    lines += [f"{int(lbl)}," + ",".join(repr(float(v)) for v in row) for lbl, row in zip(data.y, flat)]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- synthetic


def two_moons(n: int = 200, noise: float = 0.1, seed: int = 0) -> Dataset:
    from sklearn.datasets import make_moons

    x, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    return Dataset(x.astype(np.float64), y.astype(np.int64))


def gaussian_blobs(n: int = 200, centers: int = 3, std: float = 1.0, seed: int = 0) -> Dataset:
    from sklearn.datasets import make_blobs

    x, y = make_blobs(n_samples=n, centers=centers, cluster_std=std, random_state=seed)
    return Dataset(x.astype(np.float64), y.astype(np.int64))


def digits28(seed: int = 0) -> Dataset:
    """The bundled 8x8 handwritten digits, upsampled to 28x28 MNIST geometry.

    Each 8x8 image is zoomed to 24x24 (cubic spline) and centred in a 28x28
    frame, then shuffled with ``seed``. Pixels are in [0, 1].
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    small = d.images / 16.0
    big = np.stack([ndimage.zoom(img, 3, order=3) for img in small])
    frame = np.zeros((len(big), 28, 28))
    frame[:, 2:26, 2:26] = np.clip(big, 0.0, 1.0)
    order = np.random.default_rng(seed).permutation(len(frame))
    return Dataset(frame[order][..., None], d.target[order].astype(np.int64))


def export_digits_idx(out_dir: Path, n_train: int = 1000, seed: int = 0) -> dict[str, Path]:
    """Write the 28x28 digits as MNIST-style IDX train/test files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = digits28(seed)
    pixels = np.round(data.x[..., 0] * 255).astype(np.uint8)
    labels = data.y.astype(np.uint8)
    paths = {
        "train_images": out_dir / "train-images-idx3-ubyte",
        "train_labels": out_dir / "train-labels-idx1-ubyte",
        "test_images": out_dir / "t10k-images-idx3-ubyte",
        "test_labels": out_dir / "t10k-labels-idx1-ubyte",
    }
    write_idx(paths["train_images"], pixels[:n_train])
    write_idx(paths["train_labels"], labels[:n_train])
    write_idx(paths["test_images"], pixels[n_train:])
    write_idx(paths["test_labels"], labels[n_train:])
    return paths


BUILTINS = {"two-moons": two_moons, "gaussian-blobs": gaussian_blobs}


def load_dataset(path: str | Path | None, format: str, **options) -> Dataset:
    """Load ``idx-images`` (``path`` = images, ``labels`` option), ``csv-vectors`` or ``builtin-synthetic``."""
    if format == "idx-images":
        labels = options.get("labels")
        return load_idx(Path(path), Path(labels) if labels else None)
    if format == "csv-vectors":
        shape = options.get("image_shape")
        return load_csv(Path(path), tuple(shape) if shape else None)
    if format == "builtin-synthetic":
        name = options.pop("name")
        if name not in BUILTINS:
            raise ValueError(f"unknown builtin dataset {name!r}")
        return BUILTINS[name](**options)
    raise ValueError(f"unknown dataset format {format!r}")


# --------------------------------------------------------------------------- OOD and shift

OOD_KINDS = ("gaussian-noise", "uniform-noise", "additive-gaussian", "additive-uniform", "rotate")


def make_ood(kind: str, base: Dataset | None = None, strength: float = 1.0, seed: int = 0,
             n: int | None = None, shape: tuple[int, ...] | None = None, fill: float = 0.0) -> Dataset:
    """Out-of-distribution or shifted inputs.

    ``gaussian-noise`` and ``uniform-noise`` draw every pixel from N(0, 1) or
    U(0, 1) and need ``n`` and ``shape`` (or a base to copy them from).
    ``additive-gaussian`` adds ``strength * N(0, 1)``, ``additive-uniform``
    adds ``strength * U(-1, 1)`` and ``rotate`` turns each image by
    ``strength`` degrees, filling with ``fill``. Labels of the base are kept
    for the shifted kinds.
    """
    rng = np.random.default_rng(seed)
    if kind in ("gaussian-noise", "uniform-noise"):
        if base is not None:
            n = len(base) if n is None else n
            shape = base.x.shape[1:] if shape is None else shape
        if n is None or shape is None:
            raise ValueError(f"{kind} needs a sample count and shape")
        size = (n,) + tuple(shape)
        x = rng.standard_normal(size) if kind == "gaussian-noise" else rng.random(size)
        return Dataset(x, None)
    if kind not in OOD_KINDS:
        raise ValueError(f"unknown OOD kind {kind!r}")
    if base is None:
        raise ValueError(f"{kind} needs a base dataset")
    if kind == "additive-gaussian":
        return Dataset(base.x + strength * rng.standard_normal(base.x.shape), base.y)
    if kind == "additive-uniform":
        return Dataset(base.x + strength * rng.uniform(-1.0, 1.0, base.x.shape), base.y)
    if strength == 0:
        return Dataset(base.x.copy(), base.y)
    if base.x.ndim != 4:
        raise ValueError("rotate needs NHWC images")
    x = ndimage.rotate(base.x, strength, axes=(2, 1), reshape=False, order=1, mode="constant", cval=fill)
    return Dataset(x, base.y)
