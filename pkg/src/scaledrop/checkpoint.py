"""Single-file model checkpoints.

Layout::

    b"SCDROPCK"                  8-byte magic
    uint32 LE                    header length in bytes
    header                       UTF-8 JSON (sorted keys)
    sections                     raw little-endian arrays, back to back

The header lists every section with its dtype, shape, byte offset (relative
to the end of the header) and length, so files are self-describing.
Packed weight bitplanes are stored as uint64 words exactly as held in
memory; the real proxy weights are optional and only needed to resume
training.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .binary import PAD_VALUE, WORD_BITS, BatchNormParams, PackedBinaryTensor
from .dropout import DropoutConfig
from .model import ModelSpec, build_model

MAGIC = b"SCDROPCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def history_digest(history_csv: str | None) -> dict | None:
    if history_csv is None:
        return None
    rows = history_csv.strip().splitlines()
    return {"sha256": hashlib.sha256(history_csv.encode()).hexdigest(), "epochs": len(rows) - 1,
            "last": rows[-1] if len(rows) > 1 else None}


def save(path: str | Path, model: ModelSpec, cfg: DropoutConfig | None = None, *,
         history_csv: str | None = None, include_proxy: bool = True) -> None:
    if model.topology is None:
        raise CheckpointError("model has no topology descriptor; build it with build_model")
    sections, blobs = [], []
    offset = 0

    def put(layer: int, name: str, array: np.ndarray):
        nonlocal offset
        array = np.ascontiguousarray(array)
        dtype = "<u8" if array.dtype == np.uint64 else "<f8"
        raw = array.astype(dtype).tobytes()
        sections.append({"layer": layer, "name": name, "dtype": dtype, "shape": list(array.shape),
                         "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    layers_meta = []
    for i, layer in enumerate(model.binary_layers()):
        packed = layer.packed_weights()
        layers_meta.append({"kind": layer.kind, "bits_shape": list(packed.shape)})
        put(i, "bits", packed.bits)
        for name in ("bias", "alpha"):
            put(i, name, getattr(layer, name))
        for name in ("gamma", "beta", "running_mean", "running_var"):
            put(i, f"bn.{name}", getattr(layer.bn, name))
        if include_proxy and layer.weight is not None:
            put(i, "weight", layer.weight)
    header = {
        "format_version": FORMAT_VERSION,
        "topology": model.topology,
        "word_bits": WORD_BITS,
        "bit_order": "little-endian within uint64 words; bit 1 = +1",
        "padding_value": PAD_VALUE,
        "bn_epsilon": [l.bn.epsilon for l in model.binary_layers()],
        "layers": layers_meta,
        "dropout": cfg.to_dict() if cfg is not None else None,
        "history": history_digest(history_csv),
        "sections": sections,
    }
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs))


def read_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated at byte offset {len(raw)}")
    (n,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + n:
        raise CheckpointError(f"{path}: header runs past end of file at byte offset {len(raw)}")
    header = json.loads(raw[12 : 12 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, raw[12 + n :]


def load(path: str | Path) -> tuple[ModelSpec, DropoutConfig | None, dict]:
    """Return ``(model, dropout config, header)``.

    Layers without stored proxy weights run from their packed bitplanes.
    """
    header, body = read_header(path)
    if header["padding_value"] != PAD_VALUE:
        raise CheckpointError(f"checkpoint pads with {header['padding_value']}, this build pads with {PAD_VALUE}")
    model = build_model(header["topology"], seed=0)
    layers = model.binary_layers()
    if len(layers) != len(header["layers"]):
        raise CheckpointError("layer count in header does not match topology")
    arrays: dict[tuple[int, str], np.ndarray] = {}
    for s in header["sections"]:
        end = s["offset"] + s["length"]
        if end > len(body):
            raise CheckpointError(f"section {s['name']} of layer {s['layer']} is truncated")
        arr = np.frombuffer(body, dtype=s["dtype"], count=s["length"] // np.dtype(s["dtype"]).itemsize,
                            offset=s["offset"]).reshape(s["shape"])
        arrays[(s["layer"], s["name"])] = arr.astype(np.uint64 if s["dtype"] == "<u8" else np.float64)
    for i, (layer, meta) in enumerate(zip(layers, header["layers"])):
        layer.bits = PackedBinaryTensor(tuple(meta["bits_shape"]), arrays[(i, "bits")])
        layer.weight = arrays.get((i, "weight"))
        layer.bias = arrays[(i, "bias")]
        layer.alpha = arrays[(i, "alpha")]
        layer.bn = BatchNormParams(arrays[(i, "bn.gamma")], arrays[(i, "bn.beta")], arrays[(i, "bn.running_mean")],
                                   arrays[(i, "bn.running_var")], header["bn_epsilon"][i])
    cfg = DropoutConfig(**header["dropout"]) if header.get("dropout") else None
    return model, cfg, header
