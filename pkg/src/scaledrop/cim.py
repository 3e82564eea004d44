"""Crossbar compute-in-memory simulation: mapping, XNOR cell encoding, ADC,
scale memory and energy accounting.

Every crosspoint holds a complementary bit cell (two MTJs). A +1 weight is
stored as (LRS, HRS) and a -1 weight as (HRS, LRS); an input of +1 drives
the first line of the pair and -1 the second. The driven cell is LRS exactly
when input and weight agree, so a column current counts agreements and the
partial sum is ``2 * agreements - rows``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .binary import im2col, output_size
from .dropout import DropoutConfig, DropoutMask, Variant
from .model import BinaryLayer, ModelSpec, ResidualBlock

LRS, HRS = "LRS", "HRS"
COMPONENT_PJ = {
    "memory_decode_sense": 4.76,
    "rng": 3.80,
    "averaging": 18.42,
    "adder_accumulator": 0.12,
    "comparator": 0.01,
    "crossbar_read": 0.65,
}
RNG_SAMPLING_LATENCY = 15e-9
# 0.401 mm^2 for the 10-array LeNet-5 build, spread evenly over the arrays
AREA_PER_CROSSBAR_MM2 = 0.401 / 10


class Strategy(str, Enum):
    KERNEL_UNROLL = "kernel-unroll"
    KXK_SPLIT = "kxk-split"


@dataclass
class CrossbarConfig:
    rows: int = 256
    cols: int = 256
    adc_bits: int | None = None
    component_energies: dict = field(default_factory=lambda: dict(COMPONENT_PJ))
    # "column": one decode/sense per converted column; "read": one per array activation
    sense_unit: str = "column"
    available_crossbars: int | None = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("crossbar dimensions must be positive")
        if self.adc_bits is None:
            self.adc_bits = lossless_adc_bits(self.rows)
        if self.adc_bits < 1:
            raise ValueError("adc_bits must be positive")
        merged = dict(COMPONENT_PJ)
        merged.update(self.component_energies)
        unknown = set(merged) - set(COMPONENT_PJ)
        if unknown:
            raise ValueError(f"unknown energy components {sorted(unknown)}")
        if any(v < 0 for v in merged.values()):
            raise ValueError("component energies must be non-negative")
        self.component_energies = merged
        if self.sense_unit not in ("column", "read"):
            raise ValueError("sense_unit must be 'column' or 'read'")


def lossless_adc_bits(rows: int) -> int:
    return math.ceil(math.log2(rows + 1))


# --------------------------------------------------------------------------- cell encoding


def xnor_encode(weight: int) -> tuple[str, str]:
    """Complementary cell pair for a +-1 weight."""
    if weight == 1:
        return (LRS, HRS)
    if weight == -1:
        return (HRS, LRS)
    raise ValueError("weight must be +1 or -1")


def effective_state(inp: int, weight: int) -> str:
    """Resistance seen by the line an input of ``inp`` drives."""
    if inp not in (1, -1):
        raise ValueError("input must be +1 or -1")
    pair = xnor_encode(weight)
    return pair[0] if inp == 1 else pair[1]


def xnor_truth_table() -> list[tuple[int, int, int, str]]:
    """(input, weight, xnor, effective resistance) for all four combinations."""
    rows = []
    for inp in (1, -1):
        for w in (1, -1):
            state = effective_state(inp, w)
            rows.append((inp, w, 1 if state == LRS else -1, state))
    return rows


# --------------------------------------------------------------------------- mapping


@dataclass(frozen=True)
class LayerShape:
    kind: str  # "conv" or "dense"
    kernel: int
    c_in: int
    c_out: int

    @property
    def fan_in(self) -> int:
        return self.kernel * self.kernel * self.c_in

    @classmethod
    def of(cls, layer: BinaryLayer) -> "LayerShape":
        return cls(layer.kind, layer.kernel, layer.in_channels, layer.out_channels)


@dataclass(frozen=True)
class Tile:
    crossbar: int
    xbar_row: int  # first crossbar row used
    xbar_col: int
    w_rows: tuple[int, int]  # half-open range into the (fan_in, C_out) weight matrix
    w_cols: tuple[int, int]
    strategy: str

    @property
    def n_rows(self) -> int:
        return self.w_rows[1] - self.w_rows[0]

    @property
    def n_cols(self) -> int:
        return self.w_cols[1] - self.w_cols[0]


@dataclass
class LayerPlan:
    shape: LayerShape
    strategy: str
    tiles: list[Tile]
    num_crossbars: int

    def utilization(self, cfg: CrossbarConfig) -> float:
        used = sum(t.n_rows * t.n_cols for t in self.tiles)
        return used / (self.num_crossbars * cfg.rows * cfg.cols)


def _chunks(total: int, size: int):
    return [(s, min(s + size, total)) for s in range(0, total, size)]


def map_layer(shape: LayerShape, strategy: Strategy | str, cfg: CrossbarConfig) -> LayerPlan:
    """Assign a layer's (fan_in, C_out) weight matrix to crossbar tiles.

    Kernel unrolling puts each K*K*C_in kernel down one column and gives every
    row/column chunk its own array. K x K splitting cuts the matrix into K*K
    blocks of C_in rows (one per kernel position) and stacks them first-fit
    down the rows of shared arrays. Dense layers always unroll.
    """
    strategy = Strategy(strategy)
    if min(shape.kernel, shape.c_in, shape.c_out) < 1:
        raise ValueError("layer dimensions must be positive")
    if shape.kind == "dense" or shape.kernel == 1:
        strategy = Strategy.KERNEL_UNROLL
    tiles: list[Tile] = []
    col_chunks = _chunks(shape.c_out, cfg.cols)
    if strategy is Strategy.KERNEL_UNROLL:
        xbar = 0
        for rows in _chunks(shape.fan_in, cfg.rows):
            for cols in col_chunks:
                tiles.append(Tile(xbar, 0, 0, rows, cols, strategy.value))
                xbar += 1
        return LayerPlan(shape, strategy.value, tiles, xbar)
    blocks = []
    for pos in range(shape.kernel * shape.kernel):
        base = pos * shape.c_in
        blocks += [(base + a, base + b) for a, b in _chunks(shape.c_in, cfg.rows)]
    xbar = -1
    for cols in col_chunks:
        used = cfg.rows  # each column chunk starts on a fresh array
        for rows in blocks:
            height = rows[1] - rows[0]
            if used + height > cfg.rows:
                xbar += 1
                used = 0
            tiles.append(Tile(xbar, used, 0, rows, cols, strategy.value))
            used += height
    return LayerPlan(shape, strategy.value, tiles, xbar + 1)


@dataclass
class PlannedLayer:
    index: int
    plan: LayerPlan
    positions: int  # output positions per image (H_out * W_out for conv)
    activations: int  # sign comparisons per image after pooling; 0 for the output layer
    first_crossbar: int


@dataclass
class CrossbarPlan:
    layers: list[PlannedLayer]
    residual_adds: int  # skip-connection additions per image per pass
    n_classes: int
    strategy: str

    @property
    def num_crossbars(self) -> int:
        return sum(l.plan.num_crossbars for l in self.layers)

    def utilization(self, cfg: CrossbarConfig) -> float:
        used = sum(t.n_rows * t.n_cols for l in self.layers for t in l.plan.tiles)
        return used / (self.num_crossbars * cfg.rows * cfg.cols)

    def to_dict(self, cfg: CrossbarConfig) -> dict:
        return {
            "strategy": self.strategy,
            "num_crossbars": self.num_crossbars,
            "utilization": self.utilization(cfg),
            "area_mm2": self.num_crossbars * AREA_PER_CROSSBAR_MM2,
            "crossbar_rows": cfg.rows,
            "crossbar_cols": cfg.cols,
            "residual_adds": self.residual_adds,
            "layers": [{
                "index": l.index,
                "shape": asdict(l.plan.shape),
                "strategy": l.plan.strategy,
                "num_crossbars": l.plan.num_crossbars,
                "first_crossbar": l.first_crossbar,
                "positions": l.positions,
                "tiles": [{"crossbar": l.first_crossbar + t.crossbar, "xbar_row": t.xbar_row, "xbar_col": t.xbar_col,
                           "w_rows": list(t.w_rows), "w_cols": list(t.w_cols)} for t in l.plan.tiles],
            } for l in self.layers],
        }


def plan_model(model: ModelSpec, strategy: Strategy | str, cfg: CrossbarConfig) -> CrossbarPlan:
    """Map every binary layer; crossbars are numbered consecutively across layers."""
    planned: list[PlannedLayer] = []
    residual_adds = 0
    shape = model.encoder.output_shape(model.input_shape)
    next_xbar = 0

    def add(layer: BinaryLayer, shape):
        nonlocal next_xbar
        if layer.kind == "conv":
            ho = output_size(shape[0], layer.kernel, layer.stride, layer.padding)
            wo = output_size(shape[1], layer.kernel, layer.stride, layer.padding)
            positions = ho * wo
        else:
            positions = 1
        out_shape = layer.output_shape(shape) if layer.kind == "conv" else (layer.out_channels,)
        plan = map_layer(LayerShape.of(layer), strategy, cfg)
        acts = int(np.prod(out_shape)) if layer.activation else 0
        planned.append(PlannedLayer(len(planned), plan, positions, acts, next_xbar))
        next_xbar += plan.num_crossbars
        return out_shape

    for layer in model.layers:
        if isinstance(layer, ResidualBlock):
            inner = shape
            for sub in layer.body:
                inner = add(sub, inner)
            residual_adds += int(np.prod(shape))
            planned[-1].activations = int(np.prod(shape))  # sign after the skip add
        else:
            if layer.kind == "dense":
                shape = (int(np.prod(shape)),)
            shape = add(layer, shape)
    plan = CrossbarPlan(planned, residual_adds, model.n_classes, Strategy(strategy).value)
    if cfg.available_crossbars is not None and plan.num_crossbars > cfg.available_crossbars:
        raise ValueError(f"plan needs {plan.num_crossbars} crossbars, only {cfg.available_crossbars} available")
    return plan


# --------------------------------------------------------------------------- functional simulation


def adc_convert(agreements: np.ndarray, rows: int, adc_bits: int) -> np.ndarray:
    """Quantize agreement counts in [0, rows] uniformly to ``adc_bits`` bits."""
    levels = (1 << adc_bits) - 1
    if levels >= rows:
        return agreements.astype(np.float64)
    code = np.round(agreements * (levels / rows))
    return code * (rows / levels)


@dataclass
class ProgrammedTile:
    tile: Tile
    conductance: np.ndarray  # (2 * rows, cols): 1.0 where the cell is LRS


def program_layer(plan: LayerPlan, weights: np.ndarray) -> list[ProgrammedTile]:
    """One-time write of a (fan_in, C_out) +-1 matrix into its tiles."""
    if weights.shape != (plan.shape.fan_in, plan.shape.c_out):
        raise ValueError(f"weights {weights.shape} do not match plan {(plan.shape.fan_in, plan.shape.c_out)}")
    out = []
    for t in plan.tiles:
        w = weights[t.w_rows[0] : t.w_rows[1], t.w_cols[0] : t.w_cols[1]]
        g = np.empty((2 * t.n_rows, t.n_cols))
        g[0::2] = w > 0  # first cell of the pair is LRS for +1
        g[1::2] = w < 0
        out.append(ProgrammedTile(t, g))
    return out


def drive_lines(x: np.ndarray) -> np.ndarray:
    """(N, rows) +-1 inputs -> (N, 2 * rows) line activations: +1 -> (1, 0), -1 -> (0, 1)."""
    lines = np.empty((x.shape[0], 2 * x.shape[1]))
    lines[:, 0::2] = x > 0
    lines[:, 1::2] = x < 0
    return lines


def simulate_mvm(tiles: list[ProgrammedTile], x: np.ndarray, adc_bits: int, n_out: int,
                 counter: "OpCounter | None" = None) -> np.ndarray:
    """Crossbar matrix-vector products for (N, fan_in) +-1 inputs.

    Each tile's column currents count agreeing cells; the ADC quantizes them
    and the accumulator adds the tiles' partial sums.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("simulate_mvm expects (N, fan_in) inputs")
    fan_in = max(t.tile.w_rows[1] for t in tiles)
    if x.shape[1] != fan_in:
        raise ValueError(f"input width {x.shape[1]} does not match mapped fan-in {fan_in}")
    out = np.zeros((x.shape[0], n_out))
    for pt in tiles:
        t = pt.tile
        current = drive_lines(x[:, t.w_rows[0] : t.w_rows[1]]) @ pt.conductance
        agreements = adc_convert(current, t.n_rows, adc_bits)
        out[:, t.w_cols[0] : t.w_cols[1]] += 2.0 * agreements - t.n_rows
        if counter is not None:
            counter.add("crossbar_read", x.shape[0])
            counter.add("adc_conversions", x.shape[0] * t.n_cols)
    return out


def apply_scale_memory(partial_sums: np.ndarray, scale_row: np.ndarray, mask: DropoutMask) -> np.ndarray:
    """Multiplexer between the stored scale row (mask 1) and a bypass (mask 0)."""
    if partial_sums.shape[-1] != len(scale_row):
        raise ValueError("scale row length differs from the number of outputs")
    if mask.d == 1:
        return partial_sums * scale_row
    return partial_sums


class OpCounter(dict):
    def add(self, key: str, n: int) -> None:
        self[key] = self.get(key, 0) + int(n)


class CrossbarEngine:
    """Model engine that computes weighted sums on simulated crossbars."""

    def __init__(self, model: ModelSpec, cfg: CrossbarConfig | None = None,
                 strategy: Strategy | str = Strategy.KERNEL_UNROLL):
        self.cfg = cfg or CrossbarConfig()
        self.plan = plan_model(model, strategy, self.cfg)
        self.counter = OpCounter()
        self.tiles = [program_layer(pl.plan, layer.binary_matrix().T)
                      for pl, layer in zip(self.plan.layers, model.binary_layers())]

    def weighted_sum(self, layer: BinaryLayer, index: int, a: np.ndarray, rec) -> np.ndarray:
        if layer.kind == "conv":
            cols = im2col(a, layer.kernel, layer.stride, layer.padding)
            lead = cols.shape[:-1]
            flat = cols.reshape(-1, cols.shape[-1])
        else:
            flat = a.reshape(len(a), -1)
            lead = (len(a),)
        sums = simulate_mvm(self.tiles[index], flat, self.cfg.adc_bits, layer.out_channels, self.counter)
        return sums.reshape(lead + (layer.out_channels,))

    def scale(self, z, alpha, mask, cfg: DropoutConfig):
        if cfg.variant is not Variant.UNITARY:
            raise ValueError("the crossbar scale memory implements the unitary variant only")
        return apply_scale_memory(z, alpha, mask)


# --------------------------------------------------------------------------- energy


@dataclass
class EnergyLedger:
    counts: dict[str, int]
    unit_pj: dict[str, float]
    n_images: int
    T: int
    energy_total: float  # joules
    latency_total: float  # seconds of RNG sampling
    assumptions: list[str]

    @property
    def energy_per_image(self) -> float:
        return self.energy_total / self.n_images

    @property
    def energy_per_pass(self) -> float:
        return self.energy_per_image / self.T

    def breakdown_pj(self) -> dict[str, float]:
        return {k: self.counts[k] * self.unit_pj[k] for k in self.counts}

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "unit_pj": dict(self.unit_pj),
            "breakdown_pj": self.breakdown_pj(),
            "n_images": self.n_images,
            "T": self.T,
            "energy_total_j": self.energy_total,
            "energy_per_image_j": self.energy_per_image,
            "energy_per_image_uj": self.energy_per_image * 1e6,
            "energy_per_pass_j": self.energy_per_pass,
            "latency_total_s": self.latency_total,
            "assumptions": list(self.assumptions),
        }


def ledger_energy_j(counts: dict[str, int], unit_pj: dict[str, float]) -> float:
    """Exact accounting identity: sum of counts times unit energies."""
    return math.fsum(counts[k] * unit_pj[k] for k in sorted(counts)) * 1e-12


def pass_counts(plan: CrossbarPlan, cfg: CrossbarConfig) -> dict[str, int]:
    """Operation counts for one image and one forward pass."""
    reads = conversions = comparisons = 0
    for pl in plan.layers:
        reads += pl.positions * len(pl.plan.tiles)
        conversions += pl.positions * sum(t.n_cols for t in pl.plan.tiles)
        comparisons += pl.activations
    n_layers = len(plan.layers)
    sense = conversions if cfg.sense_unit == "column" else reads
    return {
        "crossbar_read": reads,
        "memory_decode_sense": sense + n_layers,  # plus one scale-memory row read per layer
        "adder_accumulator": conversions + plan.residual_adds,
        "comparator": comparisons,
        "rng": n_layers,
        "averaging": 0,
    }


def energy_rollup(plan: CrossbarPlan, T: int, cfg: CrossbarConfig, n_images: int = 1) -> EnergyLedger:
    """Energy of ``n_images`` Bayesian inferences with ``T`` passes each."""
    if T < 1 or n_images < 1:
        raise ValueError("T and n_images must be positive")
    per_pass = pass_counts(plan, cfg)
    counts = {k: v * T * n_images for k, v in per_pass.items()}
    counts["averaging"] = n_images
    counts["comparator"] += n_images  # final confidence-threshold decision
    unit = {k: float(cfg.component_energies[k]) for k in counts}
    assumptions = [
        "crossbar_read: one per tile activation (output position x tile)",
        f"memory_decode_sense: one per {'converted column' if cfg.sense_unit == 'column' else 'tile activation'}"
        " plus one scale-memory row read per layer per pass",
        "adder_accumulator: one per converted column partial sum, plus one per skip-connection element",
        "comparator: one per sign activation per pass, plus one threshold decision per image",
        "rng: one dropout-bit sample per binary layer per pass",
        "averaging: one per image (over the T passes)",
        f"T = {T} forward passes per image",
    ]
    return EnergyLedger(counts, unit, n_images, T, ledger_energy_j(counts, unit),
                        counts["rng"] * RNG_SAMPLING_LATENCY, assumptions)
