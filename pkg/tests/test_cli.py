"""End-to-end CLI coverage: every subcommand, exit codes, output files."""

import hashlib
import json
from pathlib import Path

import pytest

from clb.cli import AUDIT_HEADER, ROWS_HEADER, SWEEP_HEADER, main
from clb.config import parse_config, serialize_config


def _config_text(data_dir, out_dir, **overrides):
    sections = {
        "data": {
            "dir": str(data_dir),
            "classes": 4,
            "frames": 16,
            "height": 16,
            "width": 16,
            "channels": 1,
        },
        "protocol": {
            "pool_size": 2,
            "classes_per_task": 2,
            "tasks_per_problem": 2,
            "experiments": 2,
            "clips_per_class": 13,
            "master_seed": 5,
        },
        "strategy": {"kind": "er", "replay_batch": 4, "buffer_capacity": 10},
        "training": {
            "epochs": 2,
            "batch_size": 8,
            "hidden": 8,
            "pool": 4,
            "window": 16,
        },
        "run": {"output_dir": str(out_dir), "workers": 1},
        "sweep": {"buffers": "5", "deltas": "off,0.5", "idd": "false"},
    }
    for section, keys in overrides.items():
        sections.setdefault(section, {}).update(keys)
    lines = []
    for section, keys in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in keys.items())
        lines.append("")
    return "\n".join(lines)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.vclp")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    data = base / "clips"
    cfg_path = base / "engine.ini"
    cfg_path.write_text(_config_text(data, base / "out"), encoding="utf-8")
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    return base, data, cfg_path


def _write_cfg(base, data, name, out_name, **overrides):
    path = base / name
    path.write_text(_config_text(data, base / out_name, **overrides), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_materializes_every_class(workdir):
    _, data, _ = workdir
    dirs = sorted(p.name for p in data.iterdir() if p.is_dir())
    assert dirs == ["class_0", "class_1", "class_2", "class_3"]
    assert sum(1 for _ in data.rglob("*.vclp")) == 4 * 13


def test_gen_data_refuses_nonempty_then_force_reproduces(workdir, capsys):
    base, data, cfg_path = workdir
    before = _tree_digest(data)
    assert main(["gen-data", "--config", str(cfg_path)]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(cfg_path), "--force"]) == 0
    assert _tree_digest(data) == before


# ---------------------------------------------------------------------------
# run


def test_run_writes_complete_output_tree(workdir, capsys):
    base, data, cfg_path = workdir
    assert main(["run", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "er: n=2" in out
    run_dir = base / "out"

    rows = (run_dir / "rows.csv").read_text().splitlines()
    assert rows[0] == ROWS_HEADER
    assert len(rows) == 3
    for i, line in enumerate(rows[1:]):
        parts = line.split(",")
        assert parts[0] == str(i)
        assert parts[1] == "er"
        assert parts[2] == "10"
        assert parts[3] == "off"
        assert parts[4] == "off"

    assert "experiments: 2" in (run_dir / "summary.txt").read_text()
    assert (run_dir / "config.ini").read_text() == serialize_config(
        parse_config(str(cfg_path))
    )
    for exp in (0, 1):
        audit = (run_dir / "buffers" / f"experiment_{exp}.csv").read_text().splitlines()
        assert audit[0] == AUDIT_HEADER
        assert len(audit) == 11  # capacity 10 fills from 40 offers
        log = json.loads((run_dir / "runlogs" / f"experiment_{exp}.json").read_text())
        assert log["experiment_id"] == exp
        assert log["seeds"]["master"] == 5
        assert len(log["losses"]) == 12
    assert not (run_dir / "failures.json").exists()


def test_run_repeat_and_parallel_are_byte_identical(workdir):
    base, data, _ = workdir
    ref = (base / "out" / "rows.csv").read_bytes()
    again = _write_cfg(base, data, "again.ini", "out_again")
    assert main(["run", "--config", str(again)]) == 0
    assert (base / "out_again" / "rows.csv").read_bytes() == ref
    par = _write_cfg(base, data, "par.ini", "out_par")
    assert main(["run", "--config", str(par), "--workers", "2"]) == 0
    assert (base / "out_par" / "rows.csv").read_bytes() == ref
    ref_audit = (base / "out" / "buffers" / "experiment_1.csv").read_bytes()
    assert (base / "out_par" / "buffers" / "experiment_1.csv").read_bytes() == ref_audit


def test_run_env_seed_overrides_config(workdir, monkeypatch):
    base, data, _ = workdir
    cfg = _write_cfg(base, data, "seeded.ini", "out_seeded")
    monkeypatch.setenv("CLB_SEED", "99")
    assert main(["run", "--config", str(cfg)]) == 0
    ini = (base / "out_seeded" / "config.ini").read_text()
    assert "master_seed = 99" in ini
    log = json.loads((base / "out_seeded" / "runlogs" / "experiment_0.json").read_text())
    assert log["seeds"]["master"] == 99


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_run_divergence_fails_with_partial_results(workdir, capsys):
    base, data, _ = workdir
    cfg = _write_cfg(
        base, data, "diverge.ini", "out_diverge",
        training={"learning_rate": "1e200"}, strategy={"kind": "finetune"},
    )
    assert main(["run", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "experiments failed" in err
    failures = json.loads((base / "out_diverge" / "failures.json").read_text())
    assert set(failures) == {"0", "1"}
    assert "NumericError" in failures["0"]


def test_run_unwritable_output_exits_two(workdir):
    base, data, _ = workdir
    blocker = base / "blocker"
    blocker.write_text("file, not a directory")
    cfg = _write_cfg(base, data, "blocked.ini", "blocker/out")
    assert main(["run", "--config", str(cfg)]) == 2


# ---------------------------------------------------------------------------
# sweep


def test_sweep_runs_grid_and_aggregates(workdir, capsys):
    base, data, _ = workdir
    cfg = _write_cfg(base, data, "sweep.ini", "sweep_out")
    assert main(["sweep", "--config", str(cfg)]) == 0
    capsys.readouterr()
    out_root = base / "sweep_out"
    lines = (out_root / "sweep.csv").read_text().splitlines()
    assert lines[0] == SWEEP_HEADER
    assert len(lines) == 3  # buffers {5} x deltas {off, 0.5} x idd {false}
    assert lines[1].startswith("5,off,off,2,")
    assert lines[2].startswith("5,0.5,off,2,")
    for cell in ("m5_doff_iddoff", "m5_d0.5_iddoff"):
        rows = (out_root / cell / "rows.csv").read_text().splitlines()
        assert rows[0] == ROWS_HEADER
        assert len(rows) == 3
    gated = (out_root / "m5_d0.5_iddoff" / "buffers" / "experiment_0.csv").read_text()
    for line in gated.splitlines()[1:]:
        assert float(line.split(",")[3]) > 0.5


# ---------------------------------------------------------------------------
# inspection


def test_flow_inspect_prints_norms(workdir, capsys):
    _, data, _ = workdir
    clip = sorted((data / "class_0").glob("*.vclp"))[0]
    assert main(["flow-inspect", str(clip)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "index,norm"
    assert len(lines) == 16  # 15 transitions for 16 frames
    for i, line in enumerate(lines[1:]):
        idx, norm = line.split(",")
        assert int(idx) == i
        assert float(norm) >= 0.0


def test_buffer_dump_replays_audit(workdir, capsys):
    base, _, _ = workdir
    assert main(["buffer-dump", str(base / "out"), "--experiment", "1"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == AUDIT_HEADER
    assert out == (base / "out" / "buffers" / "experiment_1.csv").read_text()


def test_buffer_dump_missing_experiment(workdir, capsys):
    base, _, _ = workdir
    assert main(["buffer-dump", str(base / "out"), "--experiment", "7"]) == 1
    assert "no buffer audit" in capsys.readouterr().err


def test_report_recomputes_from_rows(workdir, capsys):
    base, _, _ = workdir
    assert main(["report", str(base / "out")]) == 0
    out = capsys.readouterr().out
    assert "strategy: er" in out
    assert "experiments: 2" in out
    assert "class-incremental:" in out
    assert "task-incremental:" in out
    assert "buffer_bytes_max:" in out


def test_report_rejects_foreign_csv(workdir, tmp_path, capsys):
    (tmp_path / "rows.csv").write_text("a,b,c\n1,2,3\n")
    assert main(["report", str(tmp_path)]) == 1
    assert "header" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# exit codes


def test_missing_config_is_validation_failure(capsys):
    assert main(["run", "--config", "/nonexistent/engine.ini"]) == 1
    assert "cannot read config" in capsys.readouterr().err


def test_unknown_config_key_is_validation_failure(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[training]\nepoch = 4\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_empty_dataset_is_validation_failure(workdir, tmp_path, capsys):
    base, _, _ = workdir
    cfg = tmp_path / "nodata.ini"
    cfg.write_text(
        _config_text(tmp_path / "empty_clips", tmp_path / "out"), encoding="utf-8"
    )
    assert main(["run", "--config", str(cfg)]) == 1


def test_idd_budget_mismatch_rejected(workdir, tmp_path, capsys):
    base, data, _ = workdir
    cfg = tmp_path / "mismatch.ini"
    cfg.write_text(
        _config_text(data, tmp_path / "out", gate={"idd": "true", "frame_budget": 8}),
        encoding="utf-8",
    )
    assert main(["run", "--config", str(cfg)]) == 1
    assert "frame_budget" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["unknown-command"]) == 1
    assert main(["run"]) == 1  # --config is required
    capsys.readouterr()
