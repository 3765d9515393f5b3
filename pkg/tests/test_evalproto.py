"""Evaluation protocol: window scoring, masking, the training loop, aggregation."""

import numpy as np
import pytest

from clb.errors import AggregationError, ConfigError
from clb.evalproto import (
    EvalReport,
    TrainingConfig,
    aggregate,
    class_index_map,
    eval_windows,
    evaluate_problem,
    predict_clip,
    run_experiment,
    sample_std,
)
from clb.rehearsal import GateConfig
from clb.strategies import StrategyConfig
from clb.videodata import (
    Clip,
    ContinualProblem,
    ProtocolConfig,
    TaskSpec,
    ClipStore,
    build_task_pool,
    sample_problems,
    write_dataset,
)


def _report(cil, til):
    return EvalReport(0, "finetune", [cil], [til], cil, til, 0, 0, 0, None, False)


def _problem():
    return ContinualProblem(
        experiment_id=0,
        problem_seed=1,
        tasks=(
            TaskSpec(0, (7, 3), {7: (0,), 3: (0,)}, {7: (1, 2), 3: (1, 2)}),
            TaskSpec(1, (5, 9), {5: (0,), 9: (0,)}, {5: (1, 2), 9: (1, 2)}),
        ),
    )


class _StubStore:
    """Serves 2-frame clips whose label is the class id."""

    def clip(self, class_id, clip_id):
        frames = np.zeros((2, 2, 2, 1), dtype=np.uint8)
        return Clip(frames=frames, label=class_id, source_id=f"{class_id}_{clip_id}")


def test_class_index_map_follows_task_order():
    assert class_index_map(_problem()) == {7: 0, 3: 1, 5: 2, 9: 3}


def test_eval_windows_splits_and_drops_remainder():
    frames = np.arange(35 * 4, dtype=np.uint8).reshape(35, 2, 2, 1)
    wins = eval_windows(Clip(frames=frames, label=0, source_id="x"), 16)
    assert len(wins) == 2
    assert np.array_equal(wins[0].frames, frames[:16])
    assert np.array_equal(wins[1].frames, frames[16:32])


def test_eval_windows_pads_short_clip():
    frames = np.arange(5 * 4, dtype=np.uint8).reshape(5, 2, 2, 1)
    wins = eval_windows(Clip(frames=frames, label=0, source_id="x"), 16)
    assert len(wins) == 1
    assert wins[0].p == 16
    assert wins[0].padded
    assert np.array_equal(wins[0].frames[-1], frames[-1])


def test_eval_windows_exact_fit_is_identity():
    frames = np.arange(16 * 4, dtype=np.uint8).reshape(16, 2, 2, 1)
    wins = eval_windows(Clip(frames=frames, label=0, source_id="x"), 16)
    assert len(wins) == 1
    assert np.array_equal(wins[0].frames, frames)


def test_predict_clip_averages_window_logits():
    frames = np.zeros((32, 2, 2, 1), dtype=np.uint8)
    frames[:16] = 10
    frames[16:] = 30
    clip = Clip(frames=frames, label=0, source_id="x")
    featurizer = lambda c: np.array([float(c.frames.mean())])
    logits_fn = lambda rows: np.concatenate([rows, -rows], axis=1)
    out = predict_clip(logits_fn, clip, featurizer, 16)
    assert np.allclose(out, [20.0, -20.0])


def test_evaluate_problem_perfect_predictor():
    problem = _problem()
    cmap = class_index_map(problem)

    def predict(clip):
        logits = np.zeros(len(cmap))
        logits[cmap[clip.label]] = 1.0
        return logits

    cil, til = evaluate_problem(predict, problem, _StubStore(), cmap)
    assert cil == [1.0, 1.0]
    assert til == [1.0, 1.0]


def test_evaluate_problem_masks_out_of_task_logits():
    problem = _problem()
    cmap = class_index_map(problem)

    # the highest logit always lands on a task-0 class, but within each
    # task the correct class still has the larger of the surviving logits
    def predict(clip):
        logits = np.full(len(cmap), -10.0)
        logits[0] = 100.0
        logits[cmap[clip.label]] = max(logits[cmap[clip.label]], 1.0)
        return logits

    cil, til = evaluate_problem(predict, problem, _StubStore(), cmap)
    assert til[1] == 1.0  # masking removed the intruding class
    assert cil[1] == 0.0  # argmax over all classes picks the intruder
    assert cil[0] == 0.5  # class at index 0 wins, its task partner loses


def test_random_predictor_hits_chance_levels():
    # 10 classes in 5 two-class tasks: class-incremental chance is 1/10,
    # task-incremental chance is 1/2
    classes = list(range(10))
    tasks = []
    for t in range(5):
        pair = tuple(classes[2 * t : 2 * t + 2])
        ids = tuple(range(40))
        tasks.append(TaskSpec(t, pair, {c: (0,) for c in pair}, {c: ids for c in pair}))
    problem = ContinualProblem(0, 0, tuple(tasks))
    cmap = class_index_map(problem)
    rng = np.random.default_rng(7)
    predict = lambda clip: rng.normal(0, 1, 10)
    cil, til = evaluate_problem(predict, problem, _StubStore(), cmap)
    assert abs(float(np.mean(cil)) - 0.1) < 0.04
    assert abs(float(np.mean(til)) - 0.5) < 0.04


# ---------------------------------------------------------------------------
# training loop on a real miniature dataset


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("clips")
    classes = range(4)
    write_dataset(root, classes, clips_per_class=13, shape=(16, 8, 8, 1), master_seed=5)
    store = ClipStore(root)
    cfg = ProtocolConfig(
        pool_size=2,
        classes_per_task=2,
        tasks_per_problem=2,
        experiments=2,
        clips_per_class=13,
        master_seed=5,
    )
    pool = build_task_pool(list(classes), cfg)
    problems = sample_problems(pool, cfg)
    train = TrainingConfig(
        epochs=2, batch_size=8, hidden=8, pool=4, window=16, learning_rate=1e-3
    )
    return store, problems, train


def test_run_experiment_is_deterministic(tiny_setup):
    store, problems, train = tiny_setup
    scfg = StrategyConfig(kind="er", buffer_capacity=10, replay_batch=4)
    gate = GateConfig()
    a = run_experiment(problems[0], store, scfg, gate, train, master_seed=5)
    b = run_experiment(problems[0], store, scfg, gate, train, master_seed=5)
    assert a.report.cil_per_task == b.report.cil_per_task
    assert a.report.til_per_task == b.report.til_per_task
    assert a.runlog.losses == b.runlog.losses
    assert a.buffer_audit == b.buffer_audit


def test_run_experiment_varies_with_experiment_id(tiny_setup):
    store, problems, train = tiny_setup
    scfg = StrategyConfig(kind="finetune")
    gate = GateConfig()
    a = run_experiment(problems[0], store, scfg, gate, train, master_seed=5)
    b = run_experiment(problems[1], store, scfg, gate, train, master_seed=5)
    assert a.runlog.losses != b.runlog.losses


def test_run_experiment_records_expected_loss_count(tiny_setup):
    store, problems, train = tiny_setup
    scfg = StrategyConfig(kind="finetune")
    res = run_experiment(problems[0], store, scfg, gate_cfg=GateConfig(), train_cfg=train, master_seed=5)
    # 2 tasks x 2 epochs x ceil(20 train clips / 8) batches
    assert len(res.runlog.losses) == 2 * 2 * 3
    assert len(res.runlog.task_seconds) == 2
    assert res.report.strategy == "finetune"
    assert res.report.buffer_items == 0
    assert res.report.buffer_bytes == 0
    assert res.report.buffer_capacity == 0
    assert res.report.cdr_delta is None
    assert res.buffer_audit is None
    assert res.params is None


def test_run_experiment_buffer_reporting(tiny_setup):
    store, problems, train = tiny_setup
    scfg = StrategyConfig(kind="er", buffer_capacity=10, replay_batch=4)
    res = run_experiment(problems[0], store, scfg, GateConfig(), train, master_seed=5)
    assert res.report.buffer_items == 10
    assert res.report.buffer_capacity == 10
    assert res.report.buffer_bytes > 10 * 16 * 8 * 8 * 4
    assert len(res.buffer_audit) == 10
    labels = {row[2] for row in res.buffer_audit}
    assert labels <= {0, 1, 2, 3}


def test_run_experiment_gate_delta_reported(tiny_setup):
    store, problems, train = tiny_setup
    scfg = StrategyConfig(kind="er", buffer_capacity=10, replay_batch=4)
    gate = GateConfig(cdr_enabled=True, delta=0.3)
    res = run_experiment(problems[0], store, scfg, gate, train, master_seed=5)
    assert res.report.cdr_delta == 0.3
    for row in res.buffer_audit:
        assert row[3] > 0.3


def test_run_experiment_eval_per_task_snapshots(tiny_setup):
    store, problems, train = tiny_setup
    tcfg = TrainingConfig(
        epochs=1, batch_size=8, hidden=8, pool=4, window=16, eval_per_task=True
    )
    res = run_experiment(
        problems[0], store, StrategyConfig(kind="finetune"), GateConfig(), tcfg, 5
    )
    assert [s[0] for s in res.runlog.eval_snapshots] == [0, 1]
    for _, c, t in res.runlog.eval_snapshots:
        assert 0.0 <= c <= 1.0
        assert 0.0 <= t <= 1.0


def test_run_experiment_checkpoint_params(tiny_setup):
    store, problems, _ = tiny_setup
    tcfg = TrainingConfig(epochs=1, batch_size=8, hidden=8, pool=4, save_checkpoints=True)
    res = run_experiment(
        problems[0], store, StrategyConfig(kind="finetune"), GateConfig(), tcfg, 5
    )
    assert set(res.params) == {"w1", "b1", "w2", "b2"}
    assert res.params["w2"].shape == (8, 4)


def test_run_experiment_seeds_logged(tiny_setup):
    store, problems, train = tiny_setup
    res = run_experiment(
        problems[1], store, StrategyConfig(kind="finetune"), GateConfig(), train, 5,
        config_hash="abc123",
    )
    assert res.runlog.seeds["master"] == 5
    assert res.runlog.seeds["experiment"] == 1
    assert res.runlog.config_hash == "abc123"


# ---------------------------------------------------------------------------
# aggregation


def test_sample_std_values():
    assert sample_std([1.0]) == 0.0
    assert abs(sample_std([1.0, 3.0]) - np.sqrt(2.0)) < 1e-15
    assert sample_std([]) == 0.0


def test_aggregate_means_and_stds():
    reports = [_report(0.4, 0.5), _report(0.5, 0.6), _report(0.6, 0.7)]
    s = aggregate(reports)
    assert s.n == 3
    assert abs(s.cil_mean - 0.5) < 1e-15
    assert abs(s.til_mean - 0.6) < 1e-15
    assert abs(s.cil_std - 0.1) < 1e-12
    assert not s.degenerate_std


def test_aggregate_single_report_flags_degenerate_std():
    s = aggregate([_report(0.4, 0.5)])
    assert s.n == 1
    assert s.cil_std == 0.0
    assert s.degenerate_std


def test_aggregate_empty_raises():
    with pytest.raises(AggregationError):
        aggregate([])


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainingConfig(window=1)
    with pytest.raises(ConfigError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainingConfig(optimizer="adam")
