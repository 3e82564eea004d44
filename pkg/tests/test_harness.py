import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from scaledrop import checkpoint
from scaledrop.cli import main
from scaledrop.config import ConfigError, config_hash, load_config, parse_config
from scaledrop.model import build_model, forward

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = {
    "seed": 1,
    "output_dir": "out",
    "T": 8,
    "model": {"input_shape": [2], "encoding": {"kind": "thermometer", "levels": 8, "low": -1.5, "high": 2.5},
              "layers": [{"type": "dense", "units": 16}, {"type": "dense", "units": 2}]},
    "training": {"epochs": 3, "learning_rate": 0.01},
    "data": {"train": {"format": "builtin-synthetic", "name": "two-moons", "n": 60, "seed": 1},
             "test": {"format": "builtin-synthetic", "name": "two-moons", "n": 40, "seed": 2}},
    "ood": {"n": 20, "kinds": ["gaussian-noise", "uniform-noise", "additive-uniform"]},
    "shift": {"strengths": [0.0, 0.5, 1.0]},
    "device": {"bitstream_bits": 1000},
    "crossbar": {"check_inputs": 5},
}


def write_config(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


# --------------------------------------------------------------------------- config


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.yaml")):
        cfg = load_config(path)
        build_model(cfg.model.topology(), cfg.seed)


def test_unknown_key_is_an_error():
    for bad in ({**BASE, "sed": 3}, {**BASE, "training": {"epoch": 3}},
                {**BASE, "model": {**BASE["model"], "layers": [{"type": "dense", "unit": 2}]}}):
        with pytest.raises(ConfigError):
            parse_config(bad)


def test_seed_is_mandatory():
    with pytest.raises(ConfigError):
        parse_config({k: v for k, v in BASE.items() if k != "seed"})


def test_hash_ignores_whitespace_output_and_threads(tmp_path):
    a = load_config(write_config(tmp_path, BASE, "a.yaml"))
    (tmp_path / "b.yaml").write_text(yaml.safe_dump(BASE, indent=6, default_flow_style=True))
    b = load_config(tmp_path / "b.yaml")
    c = parse_config({**BASE, "output_dir": "elsewhere", "threads": 4})
    assert config_hash(a) == config_hash(b) == config_hash(c)


@pytest.mark.parametrize("change", [
    {"seed": 2},
    {"T": 9},
    {"training": {"epochs": 4, "learning_rate": 0.01}},
    {"dropout": {"p": [0.5, 0.2]}},
    {"crossbar": {"rows": 128}},
])
def test_hash_tracks_semantic_changes(change):
    assert config_hash(parse_config({**BASE, **change})) != config_hash(parse_config(BASE))


def test_dropout_rate_count_checked():
    cfg = parse_config({**BASE, "dropout": {"p": [0.5]}})
    with pytest.raises(ConfigError):
        cfg.dropout_config([10, 20])


# --------------------------------------------------------------------------- checkpoint


@pytest.mark.parametrize("proxy", [True, False])
def test_checkpoint_round_trip(tmp_path, moons, proxy):
    model, cfg = moons["model"], moons["cfg"]
    x = moons["test"].x
    before = forward(model, x)
    checkpoint.save(tmp_path / "m.ckpt", model, cfg, history_csv=moons["history"].to_csv(), include_proxy=proxy)
    loaded, loaded_cfg, header = checkpoint.load(tmp_path / "m.ckpt")
    assert np.array_equal(forward(loaded, x), before)
    assert loaded_cfg == cfg
    assert header["padding_value"] == -1 and header["format_version"] == 1
    assert header["history"]["epochs"] == 100
    assert (loaded.binary_layers()[0].weight is None) == (not proxy)


def test_checkpoint_is_deterministic(tmp_path, moons):
    for name in ("a", "b"):
        checkpoint.save(tmp_path / name, moons["model"], moons["cfg"])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\x00" * 10)
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.load(tmp_path / "x.ckpt")


def test_checkpoint_truncated(tmp_path, moons):
    checkpoint.save(tmp_path / "m.ckpt", moons["model"], moons["cfg"])
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw[:-100])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.load(tmp_path / "m.ckpt")


# --------------------------------------------------------------------------- CLI


def test_cli_pipeline_and_exit_codes(tmp_path, capsys):
    path = write_config(tmp_path, BASE)
    out = tmp_path / "run"
    for cmd in ("train", "eval", "mc-eval", "ood", "shift-sweep", "cim-sim", "spin-calibrate"):
        assert main([cmd, "--config", str(path), "--out", str(out), "--threads", "1"]) == 0, cmd
        summary = json.loads((out / f"{cmd}.json").read_text())
        assert summary["seed"] == 1 and len(summary["config_hash"]) == 64
    ood = (out / "ood.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in ood[1:]] == ["in-distribution", "gaussian-noise", "uniform-noise",
                                                  "additive-uniform"]
    ledger = json.loads((out / "cim-sim.json").read_text())
    assert ledger["accounting_identity"] and ledger["functional_check"]["bit_identical"]


def test_cli_eval_twice_is_byte_identical(tmp_path):
    path = write_config(tmp_path, BASE)
    out = tmp_path / "run"
    assert main(["train", "--config", str(path), "--out", str(out)]) == 0
    reports = []
    for _ in range(2):
        assert main(["eval", "--config", str(path), "--out", str(out)]) == 0
        reports.append(((out / "eval.json").read_bytes(), (out / "eval.csv").read_bytes()))
    assert reports[0] == reports[1]


def test_cli_seed_override(tmp_path):
    path = write_config(tmp_path, BASE)
    assert main(["spin-calibrate", "--config", str(path), "--out", str(tmp_path / "o"), "--seed", "9"]) == 0
    assert json.loads((tmp_path / "o" / "spin-calibrate.json").read_text())["seed"] == 9


def test_cli_config_errors(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = write_config(tmp_path, {**BASE, "bogus": 1}, "bad.yaml")
    assert main(["train", "--config", str(bad)]) == 2
    (tmp_path / "broken.yaml").write_text("seed: [1,\n")
    assert main(["train", "--config", str(tmp_path / "broken.yaml")]) == 2
    nodata = write_config(tmp_path, {**BASE, "data": {"train": {"format": "idx-images", "path": "nope"}}}, "nd.yaml")
    assert main(["train", "--config", str(nodata), "--out", str(tmp_path / "o")]) == 2
    # evaluating before training: the checkpoint the config points at does not exist
    assert main(["eval", "--config", str(write_config(tmp_path, BASE)), "--out", str(tmp_path / "empty")]) == 2
    assert main(["spin-calibrate", "--config", str(write_config(tmp_path, BASE)), "--threads", "0"]) == 2


def test_cli_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["fly", "--config", "x"])
    assert e.value.code == 2


def test_cli_runtime_error(tmp_path):
    cfg = {**BASE, "device": {"target_p": 0.5, "delta_e_over_kT": 0.1, "pulse_t": 1e-12}}
    path = write_config(tmp_path, cfg)
    assert main(["spin-calibrate", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "model.ckpt").write_bytes(b"garbage!")
    assert main(["eval", "--config", str(write_config(tmp_path, BASE)), "--out", str(tmp_path / "run")]) == 3


def test_export_digits(tmp_path):
    assert main(["export-digits", "--out", str(tmp_path / "d"), "--n-train", "100"]) == 0
    assert (tmp_path / "d" / "train-images-idx3-ubyte").stat().st_size == 16 + 100 * 784
