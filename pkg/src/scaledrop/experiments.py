"""Experiment commands. Each writes a JSON summary and a CSV table into the
output directory; every report carries the config hash and seed.

Reports contain no timestamps or absolute paths and floats are written with
``repr``, so re-running a command with the same config and seed reproduces
the files byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import checkpoint
from .bayes import default_passes, mc_forward, metrics_suite, ood_decide, prediction_records
from .cim import CrossbarEngine, energy_rollup, ledger_energy_j, plan_model
from .config import ConfigError, ExperimentConfig, config_hash
from .data import Dataset, load_dataset, make_ood
from .dropout import Variant
from .model import ModelSpec, PackedEngine, build_model, draw_masks, forward, predict
from .spin import (calibrate_current, generate_bitstream, lag1_autocorrelation, sample_varied_p,
                   switching_probability, varied_rates)
from .training import train

log = logging.getLogger(__name__)

COMMANDS = ("train", "eval", "mc-eval", "ood", "shift-sweep", "cim-sim", "spin-calibrate")


# --------------------------------------------------------------------------- report writing


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())


class Context:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)

    def report(self, command: str, summary: dict) -> dict:
        summary = {"command": command, "config_hash": self.hash, "seed": self.cfg.seed, **summary}
        write_json(self.out / f"{command}.json", summary)
        return summary

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.cfg.checkpoint) if self.cfg.checkpoint else self.out / "model.ckpt"


# --------------------------------------------------------------------------- shared helpers


def _source(src) -> Dataset:
    ds = load_dataset(src.path, src.format, **src.options())
    return ds.subset(slice(0, src.limit)) if src.limit else ds


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data is None:
        raise ConfigError("this command needs a 'data' section")
    train_ds = _source(cfg.data.train)
    test_ds = _source(cfg.data.test) if cfg.data.test else train_ds
    return train_ds, test_ds


def check_paths(cfg: ExperimentConfig, command: str) -> None:
    """Fail early, as a config error, on dataset files that do not exist."""
    if cfg.data is None:
        return
    for src in (cfg.data.train, cfg.data.test):
        if src is None:
            continue
        for p in (src.path, src.labels):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"data file {p} does not exist")


def load_model(ctx: Context) -> tuple[ModelSpec, object]:
    path = ctx.checkpoint_path
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist; run 'train' first or set 'checkpoint'")
    model, dcfg, _ = checkpoint.load(path)
    if dcfg is None:
        dcfg = ctx.cfg.dropout_config([l.param_count for l in model.binary_layers()])
    return model, dcfg


def layer_rates(ctx: Context, dcfg) -> list[float]:
    """Nominal dropout rates, perturbed once per run when variation is configured."""
    vm = ctx.cfg.variation.model()
    if vm.sigma == 0 and vm.mu == 0:
        return list(dcfg.p)
    return varied_rates(vm, dcfg.p, ctx.cfg.seed)


def passes(ctx: Context, model: ModelSpec) -> int:
    return ctx.cfg.T or default_passes(model.param_count)


# --------------------------------------------------------------------------- commands


def run_train(ctx: Context) -> dict:
    cfg = ctx.cfg
    train_ds, test_ds = load_data(cfg)
    model = build_model(cfg.model.topology(), cfg.seed)
    dcfg = cfg.dropout_config([l.param_count for l in model.binary_layers()])
    model, history = train(model, train_ds.x, train_ds.y, cfg.hyperparams(), dcfg, test=(test_ds.x, test_ds.y))
    history_csv = history.to_csv()
    checkpoint.save(ctx.out / "model.ckpt", model, dcfg, history_csv=history_csv)
    (ctx.out / "history.csv").write_text(history_csv)
    last = history.rows[-1] if history.rows else {}
    return ctx.report("train", {
        "epochs": len(history.rows),
        "train_loss": last.get("train_loss"),
        "train_acc": last.get("train_acc"),
        "test_acc": last.get("test_acc"),
        "dropout": dcfg.to_dict(),
        "param_count": model.param_count,
        "checkpoint": "model.ckpt",
    })


def run_eval(ctx: Context) -> dict:
    model, _ = load_model(ctx)
    _, test_ds = load_data(ctx.cfg)
    pred = predict(model, test_ds.x)
    correct = pred == test_ds.y
    write_csv(ctx.out / "eval.csv", ["index", "label", "pred", "correct"],
              [[i, int(l), int(p), int(c)] for i, (l, p, c) in enumerate(zip(test_ds.y, pred, correct))])
    return ctx.report("eval", {"n": len(test_ds), "accuracy": float(correct.mean())})


def run_mc_eval(ctx: Context) -> dict:
    cfg = ctx.cfg
    model, dcfg = load_model(ctx)
    _, test_ds = load_data(cfg)
    T = passes(ctx, model)
    rates = layer_rates(ctx, dcfg)
    mc = mc_forward(model, test_ds.x, T, dcfg, cfg.seed, rates)
    dec = ood_decide(mc, cfg.ood.quantile_level, cfg.ood.threshold)
    mean = mc.mean
    pred = mean.argmax(axis=1)
    correct = pred == test_ds.y
    metrics = metrics_suite(dec.is_ood, correct)
    records = prediction_records(mc, dec, cfg.seed, cfg.ood.ci_percent)
    write_json(ctx.out / "mc-eval-records.json", records)
    ent = np.atleast_1d(mc.entropy)
    rows = [[i, int(test_ds.y[i]), int(pred[i]), int(correct[i]), float(mean[i, pred[i]]),
             float(records[i]["ci_lo"][pred[i]]), float(records[i]["ci_hi"][pred[i]]),
             float(ent[i]), float(dec.score[i]), records[i]["verdict"]] for i in range(len(pred))]
    write_csv(ctx.out / "mc-eval.csv", ["index", "label", "pred", "correct", "mean_prob", "ci_lo", "ci_hi",
                                        "entropy", "score", "verdict"], rows)
    return ctx.report("mc-eval", {"T": T, "rates": rates, "quantile_level": dec.quantile_level,
                                  "threshold": dec.threshold, "ci_percent": cfg.ood.ci_percent,
                                  "mean_entropy": float(ent.mean()), "metrics": metrics,
                                  "point_accuracy": float((predict(model, test_ds.x) == test_ds.y).mean())})


def _mc_summary(model, x, T, dcfg, seed, rates, cfg) -> dict:
    mc = mc_forward(model, x, T, dcfg, seed, rates)
    dec = ood_decide(mc, cfg.ood.quantile_level, cfg.ood.threshold)
    return {"mc": mc, "ood_rate": float(dec.is_ood.mean()), "mean_entropy": float(np.mean(mc.entropy)),
            "mean_score": float(dec.score.mean())}


def run_ood(ctx: Context) -> dict:
    cfg = ctx.cfg
    model, dcfg = load_model(ctx)
    _, test_ds = load_data(cfg)
    T = passes(ctx, model)
    rates = layer_rates(ctx, dcfg)
    base = test_ds.subset(slice(0, cfg.ood.n))
    sets = [("in-distribution", base)]
    for i, kind in enumerate(cfg.ood.kinds):
        if kind in ("gaussian-noise", "uniform-noise"):
            ds = make_ood(kind, n=cfg.ood.n, shape=tuple(model.input_shape), seed=cfg.seed + 1 + i)
        else:
            ds = make_ood(kind, base, cfg.ood.strength, seed=cfg.seed + 1 + i)
        sets.append((kind, ds))
    rows, table = [], []
    for name, ds in sets:
        s = _mc_summary(model, ds.x, T, dcfg, cfg.seed, rates, cfg)
        rows.append([name, len(ds), s["ood_rate"], s["mean_entropy"], s["mean_score"]])
        table.append({"set": name, "n": len(ds), "detection_rate": s["ood_rate"],
                      "mean_entropy": s["mean_entropy"], "mean_score": s["mean_score"]})
    write_csv(ctx.out / "ood.csv", ["set", "n", "detection_rate", "mean_entropy", "mean_score"], rows)
    return ctx.report("ood", {"T": T, "rates": rates, "quantile_level": cfg.ood.quantile_level,
                              "threshold": cfg.ood.threshold, "strength": cfg.ood.strength, "sets": table})


def _spearman(levels, values) -> float | None:
    if len(levels) < 2 or np.ptp(values) == 0:
        return None
    return float(spearmanr(levels, values).statistic)


def run_shift_sweep(ctx: Context) -> dict:
    cfg = ctx.cfg
    model, dcfg = load_model(ctx)
    _, test_ds = load_data(cfg)
    base = test_ds.subset(slice(0, cfg.shift.n)) if cfg.shift.n else test_ds
    T = passes(ctx, model)
    rates = layer_rates(ctx, dcfg)
    sweeps = {"noise": (cfg.shift.noise_kind, cfg.shift.strengths)}
    if len(model.input_shape) == 3:
        sweeps["rotation"] = ("rotate", cfg.shift.angles)
    rows, result = [], {}
    for sweep, (kind, levels) in sweeps.items():
        ents = []
        for i, level in enumerate(levels):
            ds = make_ood(kind, base, level, seed=cfg.seed + 1 + i, fill=cfg.shift.fill)
            s = _mc_summary(model, ds.x, T, dcfg, cfg.seed, rates, cfg)
            acc = float((s["mc"].mean.argmax(axis=1) == ds.y).mean())
            ents.append(s["mean_entropy"])
            rows.append([sweep, kind, float(level), acc, s["mean_entropy"], s["ood_rate"]])
        result[sweep] = {"kind": kind, "levels": list(levels), "mean_entropy": ents,
                         "spearman_entropy": _spearman(levels, ents)}
    write_csv(ctx.out / "shift-sweep.csv", ["sweep", "kind", "level", "accuracy", "mean_entropy", "ood_rate"], rows)
    return ctx.report("shift-sweep", {"T": T, "n": len(base), "sweeps": result})


def cim_functional_check(model: ModelSpec, dcfg, engine: CrossbarEngine, n: int, seed: int) -> dict:
    """Compare crossbar and packed logits on ``n`` random inputs under sampled masks."""
    if n == 0:
        return {"checked": 0, "bit_identical": None}
    if dcfg.variant is not Variant.UNITARY:
        return {"checked": 0, "bit_identical": None, "note": "crossbar scale memory supports the unitary variant only"}
    rng = np.random.default_rng([seed, 0xC1])
    x = rng.random((n,) + tuple(model.input_shape))
    masks = draw_masks(model, dcfg, rng)
    a = forward(model, x, masks, dcfg, engine=engine)
    b = forward(model, x, masks, dcfg, engine=PackedEngine())
    return {"checked": n, "bit_identical": bool(np.array_equal(a, b)), "masks": [m.d for m in masks]}


def run_cim_sim(ctx: Context) -> dict:
    cfg = ctx.cfg
    if ctx.checkpoint_path.exists():
        model, dcfg = load_model(ctx)
        source = "checkpoint"
    else:
        model = build_model(cfg.model.topology(), cfg.seed)
        dcfg = cfg.dropout_config([l.param_count for l in model.binary_layers()])
        source = "initialized"
    xcfg = cfg.crossbar_config()
    T = passes(ctx, model)
    engine = CrossbarEngine(model, xcfg, cfg.crossbar.strategy)
    plan = engine.plan
    ledger = energy_rollup(plan, T, xcfg, cfg.crossbar.n_images)
    check = cim_functional_check(model, dcfg, engine, cfg.crossbar.check_inputs, cfg.seed)
    identity = ledger.energy_total == ledger_energy_j(ledger.counts, ledger.unit_pj)
    write_json(ctx.out / "cim-plan.json", plan.to_dict(xcfg))
    write_json(ctx.out / "cim-ledger.json", ledger.to_dict())
    rows = [[k, ledger.counts[k], ledger.unit_pj[k], ledger.counts[k] * ledger.unit_pj[k]] for k in sorted(ledger.counts)]
    write_csv(ctx.out / "cim-sim.csv", ["component", "count", "unit_pj", "energy_pj"], rows)
    return ctx.report("cim-sim", {
        "model_source": source,
        "T": T,
        "strategy": plan.strategy,
        "num_crossbars": plan.num_crossbars,
        "utilization": plan.utilization(xcfg),
        "adc_bits": xcfg.adc_bits,
        "energy_per_image_uj": ledger.energy_per_image * 1e6,
        "energy_per_pass_uj": ledger.energy_per_pass * 1e6,
        "rng_ops": ledger.counts["rng"],
        "binary_layers": len(plan.layers),
        "latency_rng_s": ledger.latency_total,
        "accounting_identity": identity,
        "assumptions": ledger.assumptions,
        "functional_check": check,
    })


def run_spin_calibrate(ctx: Context) -> dict:
    cfg = ctx.cfg
    dev = cfg.device_model()
    target = cfg.device.target_p
    current = calibrate_current(dev, target)
    p = switching_probability(dev, current)
    stream = generate_bitstream(dev, cfg.device.bitstream_bits, np.random.default_rng([cfg.seed, 0xB17]), current)
    vm = cfg.variation.model()
    vrng = np.random.default_rng([cfg.seed, 0x5EED])
    varied = [sample_varied_p(vm, target, vrng) for _ in range(1000)]
    grid = np.linspace(0.0, dev.ic0, 101)
    write_csv(ctx.out / "spin-calibrate.csv", ["current_a", "p_switch"],
              [[float(i), float(switching_probability(dev, i))] for i in grid])
    return ctx.report("spin-calibrate", {
        "device": {"delta_e_over_kT": dev.delta_e_over_kT, "tau0": dev.tau0, "ic0": dev.ic0, "pulse_t": dev.pulse_t},
        "target_p": target,
        "current_a": current,
        "residual": abs(p - target),
        "turning_current_a": dev.turning_current,
        "bitstream": {"bits": stream.cycles, "ones_fraction": stream.ones_fraction,
                      "lag1_autocorrelation": lag1_autocorrelation(stream.bits), "time_s": stream.time_s},
        "variation": {"mu": vm.mu, "sigma": vm.sigma, "draws": len(varied),
                      "mean_p": float(np.mean(varied)), "std_p": float(np.std(varied)),
                      "within_0.1": float(np.mean(np.abs(np.asarray(varied) - target) <= 0.1))},
    })


RUNNERS = {
    "train": run_train,
    "eval": run_eval,
    "mc-eval": run_mc_eval,
    "ood": run_ood,
    "shift-sweep": run_shift_sweep,
    "cim-sim": run_cim_sim,
    "spin-calibrate": run_spin_calibrate,
}


def run_experiment(cfg: ExperimentConfig, command: str, out_dir: str | Path | None = None) -> dict:
    if command not in RUNNERS:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    check_paths(cfg, command)
    ctx = Context(cfg, Path(out_dir) if out_dir is not None else Path(cfg.output_dir))
    log.info("%s: config %s seed %d -> %s", command, ctx.hash[:12], cfg.seed, ctx.out)
    return RUNNERS[command](ctx)
