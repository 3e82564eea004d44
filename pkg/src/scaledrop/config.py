"""Experiment configuration: a YAML file validated against a strict schema.

Unknown keys anywhere are rejected. ``config_hash`` identifies the
semantic content of a configuration; it ignores where results go
(``output_dir``) and how many threads compute them (``threads``).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .cim import CrossbarConfig, Strategy, COMPONENT_PJ
from .dropout import DropoutConfig, Variant, adaptive_rates
from .spin import VARIATION_SIGMA, MtjDevice, VariationModel
from .training import Hyperparams


class ConfigError(ValueError):
    pass


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LayerCfg(Strict):
    type: Literal["dense", "conv", "residual"]
    units: Optional[int] = Field(None, gt=0)
    channels: Optional[int] = Field(None, gt=0)
    kernel: int = Field(3, gt=0)
    stride: int = Field(1, gt=0)
    padding: int = Field(0, ge=0)
    pool: int = Field(1, gt=0)
    layers: Optional[list["LayerCfg"]] = None

    def descriptor(self) -> dict:
        if self.type == "dense":
            if self.units is None:
                raise ConfigError("dense layer needs 'units'")
            return {"type": "dense", "units": self.units}
        if self.type == "conv":
            if self.channels is None:
                raise ConfigError("conv layer needs 'channels'")
            return {"type": "conv", "channels": self.channels, "kernel": self.kernel,
                    "stride": self.stride, "padding": self.padding, "pool": self.pool}
        if not self.layers:
            raise ConfigError("residual block needs 'layers'")
        return {"type": "residual", "layers": [l.descriptor() for l in self.layers]}


class EncodingCfg(Strict):
    kind: Literal["sign", "thermometer"] = "sign"
    threshold: Optional[float] = None
    levels: Optional[int] = Field(None, gt=0)
    low: Optional[float] = None
    high: Optional[float] = None

    def descriptor(self) -> dict:
        fields = ("threshold",) if self.kind == "sign" else ("levels", "low", "high")
        return {"kind": self.kind, **{f: getattr(self, f) for f in fields if getattr(self, f) is not None}}


class ModelCfg(Strict):
    input_shape: list[int]
    encoding: EncodingCfg = EncodingCfg()
    scale_init: tuple[float, float] = (0.5, 1.5)
    layers: list[LayerCfg]

    def topology(self) -> dict:
        return {"input_shape": list(self.input_shape), "encoding": self.encoding.descriptor(),
                "scale_init": list(self.scale_init), "layers": [l.descriptor() for l in self.layers]}


class TrainingCfg(Strict):
    lambda_weight_decay: float = Field(1e-5, ge=0)
    phi_scale_reg: float = Field(1e-5, ge=0)
    learning_rate: float = Field(1e-2, ge=0)
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(32, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    cosine_decay: bool = False


class DropoutCfg(Strict):
    variant: Variant = Variant.UNITARY
    p: Union[Literal["adaptive"], list[float]] = "adaptive"
    random_low: float = 0.5
    random_high: float = 1.5

    @field_validator("p")
    @classmethod
    def _rates(cls, v):
        if isinstance(v, list) and any(not 0 <= r <= 1 for r in v):
            raise ValueError("dropout probabilities must lie in [0, 1]")
        return v


class DeviceCfg(Strict):
    delta_e_over_kT: float = Field(40.0, gt=0)
    tau0: float = Field(1e-9, gt=0)
    ic0: float = Field(100e-6, gt=0)
    pulse_t: float = Field(10e-9, gt=0)
    target_p: float = Field(0.5, gt=0, lt=1)
    bitstream_bits: int = Field(1_000_000, gt=1)


class VariationCfg(Strict):
    mu: float = 0.0
    sigma: Optional[float] = Field(None, ge=0)
    level: Optional[int] = None

    @field_validator("level")
    @classmethod
    def _level(cls, v):
        if v is not None and v not in VARIATION_SIGMA:
            raise ValueError(f"variation level must be one of {sorted(VARIATION_SIGMA)}")
        return v

    def model(self) -> VariationModel:
        if self.sigma is not None and self.level is not None:
            raise ConfigError("give either variation.sigma or variation.level, not both")
        sigma = self.sigma if self.sigma is not None else VARIATION_SIGMA[self.level or 0]
        return VariationModel(self.mu, sigma)


class CrossbarCfg(Strict):
    rows: int = Field(256, gt=0)
    cols: int = Field(256, gt=0)
    adc_bits: Optional[int] = Field(None, gt=0)
    component_energies: dict[str, float] = Field(default_factory=dict)
    sense_unit: Literal["column", "read"] = "column"
    available_crossbars: Optional[int] = Field(None, gt=0)
    strategy: Strategy = Strategy.KERNEL_UNROLL
    n_images: int = Field(1, gt=0)
    check_inputs: int = Field(100, ge=0)

    @field_validator("component_energies")
    @classmethod
    def _known(cls, v):
        unknown = set(v) - set(COMPONENT_PJ)
        if unknown:
            raise ValueError(f"unknown energy components {sorted(unknown)}")
        return v


class DataSource(Strict):
    format: Literal["idx-images", "csv-vectors", "builtin-synthetic"]
    path: Optional[str] = None
    labels: Optional[str] = None
    image_shape: Optional[list[int]] = None
    name: Optional[Literal["two-moons", "gaussian-blobs"]] = None
    n: int = Field(200, gt=0)
    noise: Optional[float] = None
    centers: Optional[int] = None
    std: Optional[float] = None
    seed: int = 0
    limit: Optional[int] = Field(None, gt=0)

    def options(self) -> dict:
        if self.format == "builtin-synthetic":
            if self.name is None:
                raise ConfigError("builtin-synthetic data needs 'name'")
            opts = {"name": self.name, "n": self.n, "seed": self.seed}
            if self.name == "two-moons" and self.noise is not None:
                opts["noise"] = self.noise
            if self.name == "gaussian-blobs":
                opts.update({k: v for k, v in (("centers", self.centers), ("std", self.std)) if v is not None})
            return opts
        if self.path is None:
            raise ConfigError(f"{self.format} data needs 'path'")
        return {"labels": self.labels} if self.format == "idx-images" else {"image_shape": self.image_shape}


class DataCfg(Strict):
    train: DataSource
    test: Optional[DataSource] = None


class OodCfg(Strict):
    kinds: list[Literal["gaussian-noise", "uniform-noise", "additive-gaussian", "additive-uniform"]] = \
        ["gaussian-noise", "uniform-noise", "additive-gaussian", "additive-uniform"]
    n: int = Field(500, gt=0)
    strength: float = Field(1.0, ge=0)
    quantile_level: float = Field(0.1, gt=0, lt=1)
    threshold: float = Field(0.95, gt=0, le=1)
    ci_percent: float = Field(95.0, gt=0, le=100)


class ShiftCfg(Strict):
    noise_kind: Literal["additive-uniform", "additive-gaussian"] = "additive-uniform"
    strengths: list[float] = Field(default_factory=lambda: [i / 9 for i in range(10)])
    angles: list[float] = Field(default_factory=lambda: [10.0 * i for i in range(10)])
    fill: float = 0.0
    n: Optional[int] = Field(None, gt=0)


class ExperimentConfig(Strict):
    seed: int
    output_dir: str = "out"
    threads: Optional[int] = Field(None, gt=0)
    T: Optional[int] = Field(None, gt=0)
    checkpoint: Optional[str] = None
    model: ModelCfg
    training: TrainingCfg = TrainingCfg()
    dropout: DropoutCfg = DropoutCfg()
    device: DeviceCfg = DeviceCfg()
    variation: VariationCfg = VariationCfg()
    crossbar: CrossbarCfg = CrossbarCfg()
    data: Optional[DataCfg] = None
    ood: OodCfg = OodCfg()
    shift: ShiftCfg = ShiftCfg()

    # -- conversions to library objects

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(seed=self.seed, **self.training.model_dump())

    def dropout_config(self, param_counts: list[int]) -> DropoutConfig:
        p = self.dropout.p
        if p == "adaptive":
            p = adaptive_rates(param_counts)
        elif len(p) != len(param_counts):
            raise ConfigError(f"{len(p)} dropout rates for {len(param_counts)} binary layers")
        return DropoutConfig(self.dropout.variant, list(p), self.dropout.random_low, self.dropout.random_high)

    def device_model(self) -> MtjDevice:
        d = self.device
        return MtjDevice(d.delta_e_over_kT, d.tau0, d.ic0, d.pulse_t)

    def crossbar_config(self) -> CrossbarConfig:
        c = self.crossbar
        return CrossbarConfig(c.rows, c.cols, c.adc_bits, dict(c.component_energies), c.sense_unit,
                              c.available_crossbars)

    def semantic_dict(self) -> dict:
        return self.model_dump(mode="json", exclude={"output_dir", "threads"})


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.semantic_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)
