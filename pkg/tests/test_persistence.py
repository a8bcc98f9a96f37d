import copy
import struct

import numpy as np
import pytest

from sr2 import checkpoint as ckpt
from sr2 import config as config_mod
from sr2 import runner
from sr2.config import ConfigError, RunConfig
from sr2.report import MetricsLog, ReportError, line_chart, plot_csv, read_csv, write_csv


def small_config(**overrides) -> RunConfig:
    cfg = RunConfig()
    values = {
        "task.n_train": "48", "task.n_test": "32", "model.d_model": "16", "model.n_heads": "2",
        "model.mlp_mult": "2", "sr2.m": "2", "sr2.n": "2", "optim.lr": "0.001", "train.epochs": "4",
        "train.batch_size": "16",
    }
    values.update(overrides)
    for k, v in values.items():
        cfg.set(k, v)
    return cfg.validate()


# ---- config -------------------------------------------------------------------------


def test_config_round_trip():
    cfg = small_config(**{"sr2.reflection_blocks": "1,2", "train.augment": "false", "optim.beta2": "0.999"})
    text = config_mod.dumps(cfg)
    back = config_mod.loads(text)
    assert back == cfg
    assert config_mod.dumps(back) == text
    assert config_mod.from_flat(cfg.to_flat()) == cfg
    assert back.hash() == cfg.hash()


def test_config_errors():
    cfg = RunConfig()
    with pytest.raises(ConfigError):
        cfg.set("optim.lr", "fast")
    with pytest.raises(ConfigError):
        cfg.set("optim.momentum", "0.9")
    with pytest.raises(ConfigError):
        cfg.set("nosuch.key", "1")
    with pytest.raises(ConfigError):
        config_mod.loads("just words")
    cfg2 = RunConfig()
    cfg2.model.n_heads = 3
    with pytest.raises(ConfigError):
        cfg2.validate()
    cfg3 = RunConfig()
    cfg3.sr2.alignment = "1"
    with pytest.raises(ConfigError):
        cfg3.validate()


def test_config_derived_objects():
    cfg = small_config(**{"model.kind": "sr2_mixture(2)", "sr2.alignment": "2", "sr2.test_time_blocks": "3"})
    s = cfg.sr2_config()
    assert s.alignment == (2,) and s.test_time_blocks == 3 and s.reflection_blocks == (1,)
    assert cfg.baseline_spec().k == 2
    assert cfg.model_config().seq_len == 16
    preset = RunConfig()
    for k, v in config_mod.PAPER_PRESET.items():
        preset.set(k, v)
    assert preset.train.batch_size == 768 and preset.optim.lr == 1e-4


# ---- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    res = runner.run_training(cfg, None)
    path = tmp_path / "c.bin"
    ckpt.save(path, res.model, res.state, cfg)
    cfg2, model2, state2 = ckpt.load(path)
    assert cfg2 == cfg
    for (n, a), (_, b) in zip(res.model.named_parameters(), model2.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(res.state.optimizer.m[n], state2.optimizer.m[n])
    assert state2.epoch == 4 and state2.step == res.state.step
    assert state2.rng.bit_generator.state == res.state.rng.bit_generator.state
    # re-serialising gives identical bytes
    assert ckpt.to_bytes(model2, state2, cfg2) == path.read_bytes()


def test_checkpoint_rejects_other_major_version(tmp_path):
    cfg = small_config()
    model = runner.build_model(cfg)
    data = bytearray(ckpt.to_bytes(model, None, cfg))
    data[len(ckpt.MAGIC):len(ckpt.MAGIC) + 2] = struct.pack("<H", ckpt.VERSION[0] + 1)
    path = tmp_path / "old.bin"
    path.write_bytes(bytes(data))
    with pytest.raises(ckpt.CheckpointError, match="refusing"):
        ckpt.load(path)
    path.write_bytes(b"garbage")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(path)
    path.write_bytes(bytes(data[:40]))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(path)


def test_checkpoint_detects_altered_config(tmp_path):
    cfg = small_config()
    raw = ckpt.to_bytes(runner.build_model(cfg), None, cfg)
    tampered = raw.replace(b'"optim.lr":"0.001"', b'"optim.lr":"0.002"')
    assert tampered != raw
    path = tmp_path / "t.bin"
    path.write_bytes(tampered)
    with pytest.raises(ckpt.CheckpointError, match="hash"):
        ckpt.load(path)


def test_resume_equals_continuous(tmp_path):
    cfg = small_config(**{"train.epochs": "6", "train.checkpoint_every": "3"})
    runner.run_training(cfg, str(tmp_path / "full"))
    half = copy.deepcopy(cfg)
    half.train.epochs = 3
    runner.run_training(half, str(tmp_path / "part"))
    runner.run_training(cfg, str(tmp_path / "part"), resume=str(tmp_path / "part" / "checkpoint.bin"))
    full = (tmp_path / "full" / "checkpoint.bin").read_bytes()
    assert (tmp_path / "part" / "checkpoint.bin").read_bytes() == full
    # the periodic checkpoint of the long run holds the same weights as the short run's final one
    _, mid, mid_state = ckpt.load(tmp_path / "full" / "checkpoint_epoch3.bin")
    _, short, _ = ckpt.load(tmp_path / "part" / "checkpoint_epoch3.bin")
    assert mid_state.epoch == 3
    for (_, a), (_, b) in zip(mid.named_parameters(), short.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    rows = read_csv(tmp_path / "part" / "metrics.csv")
    assert [int(r["epoch"]) for r in rows] == [e for e in range(1, 7) for _ in range(2)]
    strip = lambda rs: [(r["epoch"], r["block"], r["loss"], r["pass1"]) for r in rs]  # noqa: E731
    assert strip(read_csv(tmp_path / "full" / "metrics.csv")) == strip(rows)


def test_resume_rejects_different_model(tmp_path):
    cfg = small_config(**{"train.epochs": "1"})
    runner.run_training(cfg, str(tmp_path))
    other = small_config(**{"model.d_model": "32", "train.epochs": "2"})
    with pytest.raises(ConfigError):
        runner.run_training(other, str(tmp_path / "x"), resume=str(tmp_path / "checkpoint.bin"))


def test_lr_zero_initial_equals_final(tmp_path):
    cfg = small_config(**{"optim.lr": "0.0", "train.epochs": "2"})
    res = runner.run_training(cfg, str(tmp_path))
    init = runner.build_model(cfg)
    _, final, _ = ckpt.load(tmp_path / "checkpoint.bin")
    for (_, a), (_, b) in zip(init.named_parameters(), final.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert res.state.epoch == 2


def test_metrics_row_count(tmp_path):
    cfg = small_config(**{"sr2.n": "3", "sr2.alignment": "2,3", "train.epochs": "3"})
    runner.run_training(cfg, str(tmp_path))
    rows = read_csv(tmp_path / "metrics.csv")
    assert len(rows) == 3 * 2
    assert {r["kind"] for r in rows} == {"sr2"} and {r["config_hash"] for r in rows} == {cfg.hash()}
    assert all(float(r["pass1"]) <= float(r["cell_acc"]) for r in rows)


# ---- CSV and SVG ------------------------------------------------------------------


def test_csv_stamps_and_version_check(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, ["k", "pass1"], [{"k": 1, "pass1": 0.5}, {"k": 2, "pass1": 0.75}], "abc")
    rows = read_csv(path)
    assert rows[0] == {"k": "1", "pass1": "0.5", "config_hash": "abc", "tool_version": "0.1.0"}
    path.write_text(path.read_text().replace("0.1.0", "7.0.0"))
    with pytest.raises(ReportError):
        read_csv(path)


def test_metrics_log_truncate(tmp_path):
    class _B:
        def __init__(self, b):
            self.block, self.loss, self.cell_acc, self.pass1 = b, 1.0, 0.5, 0.0

    class _M:
        blocks = [_B(1), _B(2)]
        wall_s, samples_per_s = 1.0, 10.0

    log = MetricsLog(tmp_path / "m.csv", "sr2", "h")
    for e in (1, 2, 3):
        log.append(e, _M())
    log.truncate_after(1)
    assert [r["epoch"] for r in read_csv(tmp_path / "m.csv")] == ["1", "1"]


def test_plot_two_points(tmp_path):
    csv_path = tmp_path / "two.csv"
    write_csv(csv_path, ["k", "pass1"], [{"k": 1, "pass1": 0.2}, {"k": 4, "pass1": 0.9}], "h")
    svg = tmp_path / "two.svg"
    assert plot_csv(csv_path, svg) == 2
    text = svg.read_text()
    assert text.count('class="marker"') == 2
    assert text.startswith("<svg") and "</svg>" in text


def test_plot_groups_series_and_errors(tmp_path):
    csv_path = tmp_path / "m.csv"
    rows = [{"epoch": e, "block": b, "pass1": 0.1 * e} for e in (1, 2, 3) for b in (1, 2)]
    write_csv(csv_path, ["epoch", "block", "pass1"], rows, "h")
    svg = tmp_path / "m.svg"
    assert plot_csv(csv_path, svg) == 6
    assert svg.read_text().count("<polyline") == 2
    with pytest.raises(ReportError):
        plot_csv(csv_path, svg, y="nope")
    with pytest.raises(ReportError):
        line_chart({}, "x", "y")
