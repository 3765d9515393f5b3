"""Command line entry points.

Subcommands: gen-data, run, sweep, flow-inspect, buffer-dump, report.
Exit codes: 0 on success, 1 for configuration or input validation problems,
2 for runtime failures (divergence, I/O trouble mid-run, partial results).

All result CSVs are written with fixed column order and fixed float
formatting so repeat runs of the same config are byte-identical. Wall-clock
timings never enter a CSV; they live in the per-experiment run logs.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys

import numpy as np
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import (
    EngineConfig,
    config_hash,
    parse_config,
    parse_config_text,
    serialize_config,
)
from .diffcore import save_params
from .errors import (
    BudgetError,
    ConfigError,
    DimensionError,
    EngineError,
    FormatError,
    LabelError,
    ProtocolError,
    RangeError,
)
from .evalproto import ExperimentResult, aggregate, run_experiment
from .flowselect import FlowConfig, transition_norms
from .rehearsal import GateConfig
from .videodata import ClipStore, build_task_pool, read_clip, sample_problems, write_dataset

ROWS_HEADER = "experiment_id,strategy,buffer_capacity,delta,idd,cil_mean,til_mean,buffer_bytes"
AUDIT_HEADER = "item_index,task_id,label,confidence,stream_index"
SWEEP_HEADER = "buffer_capacity,delta,idd,experiments,cil_mean,cil_std,til_mean,til_std"

_VALIDATION_ERRORS = (
    ConfigError,
    ProtocolError,
    FormatError,
    BudgetError,
    RangeError,
    LabelError,
    DimensionError,
)


class _Parser(argparse.ArgumentParser):
    # usage mistakes are validation failures, not crashes
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clb", description="continual learning benchmark engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="materialize the synthetic clip dataset")
    p.add_argument("--config", required=True, help="path to the INI config")
    p.add_argument("--force", action="store_true", help="regenerate into a non-empty directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("run", help="run all experiments for one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None, help="process count override")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="run the buffer/threshold/frame-selection grid")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("flow-inspect", help="print per-transition motion norms for a clip")
    p.add_argument("clip", help="path to a .vclp file")
    p.set_defaults(fn=cmd_flow_inspect)

    p = sub.add_parser("buffer-dump", help="print a run's stored-buffer audit")
    p.add_argument("run_dir")
    p.add_argument("--experiment", type=int, default=0)
    p.set_defaults(fn=cmd_buffer_dump)

    p = sub.add_parser("report", help="recompute the summary from a run's rows.csv")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except _VALIDATION_ERRORS as err:
        print(f"clb: error: {err}", file=sys.stderr)
        return 1
    except (EngineError, OSError) as err:
        print(f"clb: error: {err}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config)
    root = Path(cfg.data.dir)
    if root.is_dir() and any(root.iterdir()):
        if not args.force:
            raise ConfigError(
                f"dataset directory {root} is not empty; pass --force to regenerate"
            )
        shutil.rmtree(root)
    count = write_dataset(
        root,
        range(cfg.data.classes),
        cfg.protocol.clips_per_class,
        (cfg.data.frames, cfg.data.height, cfg.data.width, cfg.data.channels),
        cfg.protocol.master_seed,
    )
    print(f"wrote {count} clips to {root}")
    return 0


# ---------------------------------------------------------------------------
# run


def _check_cross_sections(cfg: EngineConfig) -> None:
    if cfg.gate.idd_enabled and cfg.gate.frame_budget != cfg.training.window:
        raise ConfigError(
            f"frame_budget {cfg.gate.frame_budget} must equal the training "
            f"window {cfg.training.window} when frame selection is enabled"
        )


def _build_problems(cfg: EngineConfig, store: ClipStore):
    class_ids = store.class_ids()
    if not class_ids:
        raise ConfigError(f"no class directories under {cfg.data.dir}")
    short = [c for c in class_ids if store.count(c) < cfg.protocol.clips_per_class]
    if short:
        raise ConfigError(
            f"class {short[0]} has {store.count(short[0])} clips, "
            f"config expects {cfg.protocol.clips_per_class}"
        )
    pool = build_task_pool(class_ids, cfg.protocol)
    return sample_problems(pool, cfg.protocol)


def _execute_experiment(cfg: EngineConfig, store: ClipStore, problems, exp_id: int):
    return run_experiment(
        problems[exp_id],
        store,
        cfg.strategy,
        cfg.gate,
        cfg.training,
        cfg.protocol.master_seed,
        config_hash(cfg),
    )


_worker_state = None


def _worker_init(config_text: str) -> None:
    global _worker_state
    cfg = parse_config_text(config_text, apply_env=False)
    store = ClipStore(cfg.data.dir)
    _worker_state = (cfg, store, _build_problems(cfg, store))


def _worker_run(exp_id: int):
    cfg, store, problems = _worker_state
    try:
        return exp_id, _execute_experiment(cfg, store, problems, exp_id), None
    except Exception as err:  # report across the process boundary as text
        return exp_id, None, f"{type(err).__name__}: {err}"


def _run_all(cfg: EngineConfig, workers: int):
    """Execute every experiment; returns ({exp_id: result}, {exp_id: error})."""
    n = cfg.protocol.experiments
    results: dict[int, ExperimentResult] = {}
    failures: dict[int, str] = {}
    if workers > 1:
        text = serialize_config(cfg)
        with ProcessPoolExecutor(
            max_workers=min(workers, n), initializer=_worker_init, initargs=(text,)
        ) as ex:
            for exp_id, result, err in ex.map(_worker_run, range(n)):
                if err is None:
                    results[exp_id] = result
                else:
                    failures[exp_id] = err
    else:
        store = ClipStore(cfg.data.dir)
        problems = _build_problems(cfg, store)
        for exp_id in range(n):
            try:
                results[exp_id] = _execute_experiment(cfg, store, problems, exp_id)
            except Exception as err:
                failures[exp_id] = f"{type(err).__name__}: {err}"
    return results, failures


def _delta_str(delta) -> str:
    return "off" if delta is None else repr(float(delta))


def _row_line(r) -> str:
    return (
        f"{r.experiment_id},{r.strategy},{r.buffer_capacity},"
        f"{_delta_str(r.cdr_delta)},{'on' if r.idd_enabled else 'off'},"
        f"{r.cil_mean:.6f},{r.til_mean:.6f},{r.buffer_bytes}"
    )


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _summary_text(reports) -> str:
    agg = aggregate(reports)
    kind = reports[0].strategy
    rehearsal = "yes" if reports[0].buffer_capacity > 0 else "no"
    lines = [
        f"strategy: {kind}",
        f"rehearsal: {rehearsal}",
        f"experiments: {agg.n}",
        f"class-incremental: {agg.cil_mean:.4f} +/- {agg.cil_std:.4f}",
        f"task-incremental: {agg.til_mean:.4f} +/- {agg.til_std:.4f}",
    ]
    if agg.degenerate_std:
        lines.append("note: single experiment, std is degenerate")
    return "\n".join(lines) + "\n"


def _write_run_outputs(out_dir: Path, cfg: EngineConfig, results, failures) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "config.ini", serialize_config(cfg))

    reports = [results[e].report for e in sorted(results)]
    rows = "\n".join([ROWS_HEADER] + [_row_line(r) for r in reports])
    _write_text(out_dir / "rows.csv", rows + "\n")
    if reports:
        _write_text(out_dir / "summary.txt", _summary_text(reports))

    buffers_dir = out_dir / "buffers"
    runlog_dir = out_dir / "runlogs"
    runlog_dir.mkdir(exist_ok=True)
    for exp_id in sorted(results):
        res = results[exp_id]
        if res.buffer_audit is not None:
            buffers_dir.mkdir(exist_ok=True)
            lines = [AUDIT_HEADER] + [
                f"{i},{t},{lab},{conf:.6f},{s}" for i, t, lab, conf, s in res.buffer_audit
            ]
            _write_text(buffers_dir / f"experiment_{exp_id}.csv", "\n".join(lines) + "\n")
        log = res.runlog
        payload = {
            "experiment_id": exp_id,
            "seeds": log.seeds,
            "config_hash": log.config_hash,
            "losses": log.losses,
            "task_seconds": log.task_seconds,
            "eval_snapshots": log.eval_snapshots,
        }
        with open(runlog_dir / f"experiment_{exp_id}.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
        if res.params is not None:
            ckpt_dir = out_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            save_params(ckpt_dir / f"experiment_{exp_id}.clwb", res.params)

    if failures:
        with open(out_dir / "failures.json", "w", encoding="utf-8") as fh:
            json.dump(
                {str(e): failures[e] for e in sorted(failures)}, fh, sort_keys=True, indent=2
            )


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    _check_cross_sections(cfg)
    workers = args.workers if args.workers is not None else cfg.run.workers
    if workers < 1:
        raise ConfigError("workers must be positive")
    out_dir = Path(cfg.run.output_dir)
    results, failures = _run_all(cfg, workers)
    _write_run_outputs(out_dir, cfg, results, failures)
    if results:
        agg = aggregate([results[e].report for e in sorted(results)])
        print(
            f"{cfg.strategy.kind}: n={agg.n} "
            f"cil={agg.cil_mean:.4f}+/-{agg.cil_std:.4f} "
            f"til={agg.til_mean:.4f}+/-{agg.til_std:.4f}"
        )
    if failures:
        for exp_id in sorted(failures):
            print(f"experiment {exp_id} failed: {failures[exp_id]}", file=sys.stderr)
        print(f"{len(failures)} of {cfg.protocol.experiments} experiments failed", file=sys.stderr)
        return 2
    print(f"results in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _cell_name(capacity: int, delta, idd: bool) -> str:
    return f"m{capacity}_d{_delta_str(delta)}_idd{'on' if idd else 'off'}"


def cmd_sweep(args) -> int:
    base = parse_config(args.config)
    out_root = Path(base.run.output_dir)
    sweep_rows: list[str] = []
    failed_cells = 0
    for capacity in base.sweep.buffers:
        for delta in base.sweep.deltas:
            for idd in base.sweep.idd:
                gate = GateConfig(
                    cdr_enabled=delta is not None,
                    delta=base.gate.delta if delta is None else delta,
                    idd_enabled=idd,
                    frame_budget=base.training.window,
                    flow=base.gate.flow,
                )
                cell_dir = out_root / _cell_name(capacity, delta, idd)
                cfg = replace(
                    base,
                    strategy=replace(base.strategy, buffer_capacity=capacity),
                    gate=gate,
                    run=replace(base.run, output_dir=str(cell_dir)),
                )
                _check_cross_sections(cfg)
                results, failures = _run_all(cfg, cfg.run.workers)
                _write_run_outputs(cell_dir, cfg, results, failures)
                if failures:
                    failed_cells += 1
                    for exp_id in sorted(failures):
                        print(
                            f"cell {cell_dir.name} experiment {exp_id} failed: "
                            f"{failures[exp_id]}",
                            file=sys.stderr,
                        )
                    continue
                agg = aggregate([results[e].report for e in sorted(results)])
                sweep_rows.append(
                    f"{capacity},{_delta_str(delta)},{'on' if idd else 'off'},{agg.n},"
                    f"{agg.cil_mean:.6f},{agg.cil_std:.6f},"
                    f"{agg.til_mean:.6f},{agg.til_std:.6f}"
                )
                print(f"cell {cell_dir.name}: cil={agg.cil_mean:.4f} til={agg.til_mean:.4f}")
    out_root.mkdir(parents=True, exist_ok=True)
    _write_text(out_root / "sweep.csv", "\n".join([SWEEP_HEADER] + sweep_rows) + "\n")
    if failed_cells:
        print(f"{failed_cells} sweep cells failed", file=sys.stderr)
        return 2
    print(f"sweep results in {out_root}")
    return 0


# ---------------------------------------------------------------------------
# inspection commands


def cmd_flow_inspect(args) -> int:
    clip = read_clip(args.clip)
    norms = transition_norms(clip, FlowConfig())
    print("index,norm")
    for i, value in enumerate(norms):
        print(f"{i},{value:.6f}")
    return 0


def cmd_buffer_dump(args) -> int:
    path = Path(args.run_dir) / "buffers" / f"experiment_{args.experiment}.csv"
    if not path.is_file():
        raise ConfigError(f"no buffer audit for experiment {args.experiment} at {path}")
    sys.stdout.write(path.read_text(encoding="utf-8"))
    return 0


def cmd_report(args) -> int:
    path = Path(args.run_dir) / "rows.csv"
    if not path.is_file():
        raise ConfigError(f"no rows.csv under {args.run_dir}")
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != ROWS_HEADER:
        raise FormatError(f"unexpected rows.csv header in {path}")
    cil: list[float] = []
    til: list[float] = []
    strategies: set[str] = set()
    max_bytes = 0
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 8:
            raise FormatError(f"malformed row in {path}: {line!r}")
        strategies.add(parts[1])
        cil.append(float(parts[5]))
        til.append(float(parts[6]))
        max_bytes = max(max_bytes, int(parts[7]))
    if not cil:
        raise FormatError(f"rows.csv in {path} has no data rows")
    n = len(cil)
    cil_std = float(np.std(cil, ddof=1)) if n > 1 else 0.0
    til_std = float(np.std(til, ddof=1)) if n > 1 else 0.0
    print(f"strategy: {','.join(sorted(strategies))}")
    print(f"experiments: {n}")
    print(f"class-incremental: {float(np.mean(cil)):.4f} +/- {cil_std:.4f}")
    print(f"task-incremental: {float(np.mean(til)):.4f} +/- {til_std:.4f}")
    print(f"buffer_bytes_max: {max_bytes}")
    return 0


if __name__ == "__main__":
    main_entry()
