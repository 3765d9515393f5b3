"""Evaluation protocol and the per-problem training loop.

A problem is trained one task at a time; after the final task the model is
scored on every task's held-out clips twice: class-incremental (argmax over
all problem classes) and task-incremental (argmax restricted to the clip's
task classes, all other logits masked to -inf). Per-task accuracies are
averaged within a problem; problems are aggregated with sample statistics.

Test-time inference averages logits over all non-overlapping windows of the
clip; a trailing remainder shorter than the window is dropped, and clips
shorter than one window are repeat-padded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffcore import MLP, OptimizerState
from .errors import AggregationError, NumericError
from .rehearsal import GateConfig, ReplayBuffer
from .seeding import child_seed
from .strategies import StrategyConfig, make_strategy
from .videodata import (
    Clip,
    ContinualProblem,
    clip_features,
    feature_dim,
    pad_to_window,
    temporal_crop,
)

Array = np.ndarray


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 16
    optimizer: str = "rmsprop"
    learning_rate: float = 1e-3
    hidden: int = 32
    pool: int = 4
    window: int = 16
    save_checkpoints: bool = False
    eval_per_task: bool = False

    def __post_init__(self):
        from .errors import ConfigError

        if min(self.epochs, self.batch_size, self.hidden, self.pool) < 1:
            raise ConfigError("epochs, batch size, hidden width, pool must be positive")
        if self.window < 2:
            raise ConfigError("window must be at least 2 frames")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if self.optimizer not in OptimizerState.KINDS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EvalReport:
    experiment_id: int
    strategy: str
    cil_per_task: list[float]
    til_per_task: list[float]
    cil_mean: float
    til_mean: float
    buffer_items: int
    buffer_bytes: int
    buffer_capacity: int
    cdr_delta: float | None
    idd_enabled: bool


@dataclass
class RunLog:
    seeds: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    losses: list[float] = field(default_factory=list)
    task_seconds: list[float] = field(default_factory=list)
    eval_snapshots: list[tuple[int, float, float]] = field(default_factory=list)


@dataclass
class ExperimentResult:
    report: EvalReport
    runlog: RunLog
    buffer_audit: list[tuple[int, int, int, float, int]] | None
    params: dict[str, Array] | None


@dataclass(frozen=True)
class Summary:
    n: int
    cil_mean: float
    cil_std: float
    til_mean: float
    til_std: float
    degenerate_std: bool


def class_index_map(problem: ContinualProblem) -> dict[int, int]:
    """Global class id -> local head index, in problem task order."""
    local: dict[int, int] = {}
    for task in problem.tasks:
        for cid in task.classes:
            local[cid] = len(local)
    return local


def eval_windows(clip: Clip, window: int) -> list[Clip]:
    """Non-overlapping window views; remainder dropped, short clips padded."""
    if clip.p < window:
        return [pad_to_window(clip, window)]
    return [
        clip.take_frames(range(i * window, (i + 1) * window))
        for i in range(clip.p // window)
    ]


def predict_clip(
    logits_fn: Callable[[Array], Array],
    clip: Clip,
    featurizer: Callable[[Clip], Array],
    window: int,
) -> Array:
    """Mean of the model's logits over the clip's evaluation windows."""
    wins = eval_windows(clip, window)
    feats = np.stack([featurizer(w) for w in wins])
    return logits_fn(feats).mean(axis=0)


def evaluate_problem(
    predict: Callable[[Clip], Array],
    problem: ContinualProblem,
    store,
    cmap: dict[int, int],
) -> tuple[list[float], list[float]]:
    """Per-task class-incremental and task-incremental accuracies."""
    k = len(cmap)
    cil: list[float] = []
    til: list[float] = []
    for task in problem.tasks:
        mask_idx = np.array([cmap[c] for c in task.classes], dtype=np.int64)
        hits_c = 0
        hits_t = 0
        total = 0
        for class_id in task.classes:
            target = cmap[class_id]
            for clip_id in task.test_ids[class_id]:
                logits = predict(store.clip(class_id, clip_id))
                if int(np.argmax(logits)) == target:
                    hits_c += 1
                masked = np.full(k, -np.inf)
                masked[mask_idx] = logits[mask_idx]
                if int(np.argmax(masked)) == target:
                    hits_t += 1
                total += 1
        cil.append(hits_c / total)
        til.append(hits_t / total)
    return cil, til


def run_experiment(
    problem: ContinualProblem,
    store,
    strategy_cfg: StrategyConfig,
    gate_cfg: GateConfig,
    train_cfg: TrainingConfig,
    master_seed: int,
    config_hash: str = "",
) -> ExperimentResult:
    """Train through the problem's task sequence and evaluate both metrics.
    Fully deterministic in (master seed, experiment id); wall-clock timings
    land in the run log only."""
    exp = problem.experiment_id
    cmap = class_index_map(problem)
    k = len(cmap)
    first_task = problem.tasks[0]
    first_class = first_task.classes[0]
    probe = store.clip(first_class, first_task.train_ids[first_class][0])
    _, h, w, c = probe.frames.shape
    d_in = feature_dim(train_cfg.window, h, w, c, train_cfg.pool)

    model = MLP(d_in, train_cfg.hidden, k, child_seed(master_seed, "init", exp))
    opt = OptimizerState(train_cfg.optimizer, train_cfg.learning_rate)
    pool = train_cfg.pool
    featurizer = lambda clip: clip_features(clip, pool)
    strategy = make_strategy(strategy_cfg, featurizer)
    buffer = (
        ReplayBuffer(
            strategy_cfg.buffer_capacity,
            train_cfg.window,
            k,
            gate_cfg,
            child_seed(master_seed, "buffer", exp),
        )
        if strategy.uses_buffer
        else None
    )
    runlog = RunLog(
        seeds={"master": master_seed, "experiment": exp, "problem": problem.problem_seed},
        config_hash=config_hash,
    )
    feat_memo: dict[str, Array] = {}

    def features_of(view: Clip) -> Array:
        # memoized only for full-length clips, whose identity is the source id
        if view.p == train_cfg.window:
            hit = feat_memo.get(view.source_id)
            if hit is None:
                hit = featurizer(view)
                feat_memo[view.source_id] = hit
            return hit
        return featurizer(view)

    predict = lambda clip: predict_clip(model.logits_np, clip, featurizer, train_cfg.window)

    step = 0
    for t_idx, task in enumerate(problem.tasks):
        titems: list[tuple[Clip, int]] = []
        for class_id in task.classes:
            for clip_id in task.train_ids[class_id]:
                titems.append((store.clip(class_id, clip_id), cmap[class_id]))
        started = time.perf_counter()
        for epoch in range(train_cfg.epochs):
            order = np.random.default_rng(
                child_seed(master_seed, "order", exp, t_idx, epoch)
            ).permutation(len(titems))
            for lo in range(0, len(order), train_cfg.batch_size):
                chunk = order[lo : lo + train_cfg.batch_size]
                batch_clips: list[tuple[Clip, Clip]] = []
                rows: list[Array] = []
                labels: list[int] = []
                for idx in chunk:
                    clip, label = titems[int(idx)]
                    if clip.p == train_cfg.window:
                        view = clip
                        rows.append(features_of(clip))
                    else:
                        view = temporal_crop(
                            clip,
                            train_cfg.window,
                            child_seed(master_seed, "crop", exp, t_idx, epoch, int(idx)),
                        )
                        rows.append(featurizer(view))
                    batch_clips.append((clip, view))
                    labels.append(label)
                feats = np.stack(rows)
                step_seed = child_seed(master_seed, "step", exp, step)
                try:
                    loss_val, logits = strategy.prepare_gradients(
                        model, feats, labels, buffer, step_seed
                    )
                    opt.step(model.pv)
                except NumericError as err:
                    raise NumericError(
                        f"divergence at step {step}, task {t_idx}, "
                        f"strategy {strategy_cfg.kind}: {err}"
                    ) from err
                runlog.losses.append(loss_val)
                if buffer is not None:
                    for i, (full_clip, view) in enumerate(batch_clips):
                        offered = full_clip if gate_cfg.idd_enabled else view
                        buffer.offer(offered, labels[i], logits[i], task.task_id)
                step += 1
        if strategy.kind == "ewc":
            hook_rows = []
            hook_labels = []
            for i, (clip, label) in enumerate(titems):
                if clip.p == train_cfg.window:
                    hook_rows.append(features_of(clip))
                else:
                    view = temporal_crop(
                        clip,
                        train_cfg.window,
                        child_seed(master_seed, "fisher_view", exp, t_idx, i),
                    )
                    hook_rows.append(featurizer(view))
                hook_labels.append(label)
            strategy.end_of_task(model, np.stack(hook_rows), hook_labels)
        else:
            strategy.end_of_task(model, np.empty((0, d_in)), [])
        runlog.task_seconds.append(time.perf_counter() - started)
        if train_cfg.eval_per_task:
            c_list, t_list = evaluate_problem(predict, problem, store, cmap)
            runlog.eval_snapshots.append(
                (t_idx, float(np.mean(c_list)), float(np.mean(t_list)))
            )

    cil_list, til_list = evaluate_problem(predict, problem, store, cmap)
    report = EvalReport(
        experiment_id=exp,
        strategy=strategy_cfg.kind,
        cil_per_task=cil_list,
        til_per_task=til_list,
        cil_mean=float(np.mean(cil_list)),
        til_mean=float(np.mean(til_list)),
        buffer_items=len(buffer) if buffer is not None else 0,
        buffer_bytes=buffer.memory_bytes() if buffer is not None else 0,
        buffer_capacity=strategy_cfg.buffer_capacity if buffer is not None else 0,
        cdr_delta=gate_cfg.delta if gate_cfg.cdr_enabled else None,
        idd_enabled=gate_cfg.idd_enabled,
    )
    return ExperimentResult(
        report=report,
        runlog=runlog,
        buffer_audit=buffer.audit_rows() if buffer is not None else None,
        params=model.pv.as_arrays() if train_cfg.save_checkpoints else None,
    )


def sample_std(values: Sequence[float]) -> float:
    """Sample standard deviation (n-1 denominator); 0 for a single value."""
    if len(values) < 2:
        return 0.0
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=1))


def aggregate(reports: Sequence[EvalReport]) -> Summary:
    """Mean and sample std of both metrics over the experiment set."""
    if not reports:
        raise AggregationError("cannot aggregate zero reports")
    cil = [r.cil_mean for r in reports]
    til = [r.til_mean for r in reports]
    return Summary(
        n=len(reports),
        cil_mean=float(np.mean(cil)),
        cil_std=sample_std(cil),
        til_mean=float(np.mean(til)),
        til_std=sample_std(til),
        degenerate_std=len(reports) == 1,
    )
