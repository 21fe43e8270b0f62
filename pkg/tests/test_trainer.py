import json

import numpy as np
import pytest
import torch

from ider.data import make_blobs
from ider.errors import ConfigError, SequencingError
from ider.losses import LossConfig
from ider.model import ModelConfig, load_checkpoint
from ider.streams import make_cil_stream
from ider.trainer import (METHODS, TrainConfig, end_of_task, evaluate_task_end, init_state,
                          run_experiment, RunResult, train_task)
from ider.metrics import AccuracyMatrix

MLP = ModelConfig(arch="mlp", width=16)


@pytest.fixture(scope="module")
def blobs():
    return make_blobs(n_classes=6, n_per_class=40, dim=8, seed=0)


def cfg(**kw):
    base = dict(epochs_per_task=2, batch_size=16, buffer_capacity=30, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(method="der")
    with pytest.raises(ConfigError):
        TrainConfig(epochs_per_task=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    assert TrainConfig(loss={"alpha": 0.1}).loss.alpha == 0.1


def test_lr_schedule():
    c = TrainConfig(epochs_per_task=10, learning_rate=1.0)
    assert c.milestones == [6, 9]
    assert [c.lr_at(e) for e in (0, 5, 6, 8, 9)] == pytest.approx([1, 1, 0.1, 0.1, 0.01])


def test_policy_selection():
    assert TrainConfig(method="bfp_id").policy == "class_balanced"
    assert TrainConfig(method="er").policy == "reservoir"
    assert TrainConfig(method="finetune").uses_buffer is False


def test_sequencing_guards(blobs):
    train, _ = blobs
    stream = make_cil_stream(train, 3, 0)
    state = init_state(cfg(), MLP, 6, train.input_shape)
    with pytest.raises(SequencingError):
        train_task(state, stream.tasks[1], train, cfg())
    with pytest.raises(SequencingError):
        end_of_task(state)
    train_task(state, stream.tasks[0], train, cfg())
    with pytest.raises(SequencingError):
        train_task(state, stream.tasks[0], train, cfg())
    end_of_task(state)
    assert state.checkpoint is not None and state.checkpoint.task_id == 0
    assert state.current_task == 1
    with pytest.raises(SequencingError):
        end_of_task(state)


def test_checkpoint_absent_iff_first_task(blobs):
    train, _ = blobs
    stream = make_cil_stream(train, 3, 0)
    state = init_state(cfg(), MLP, 6, train.input_shape)
    for task in stream.tasks:
        assert (state.checkpoint is None) == (state.current_task == 0)
        train_task(state, task, train, cfg())
        end_of_task(state)


def test_stream_count_and_single_offer(blobs):
    train, _ = blobs
    stream = make_cil_stream(train, 3, 0)
    state = init_state(cfg(epochs_per_task=3), MLP, 6, train.input_shape)
    offered = 0
    for task in stream.tasks:
        train_task(state, task, train, cfg(epochs_per_task=3))
        offered += len(task.train_samples)
        assert state.buffer.stream_count == offered
        end_of_task(state)


@pytest.mark.parametrize("method", METHODS)
def test_every_method_runs(blobs, method):
    train, test = blobs
    r = run_experiment(make_cil_stream(train, 3, 0), train, test, cfg(method=method), MLP)
    assert r.acc.completed() == 3
    assert 0 <= r.faa <= 1 and 0 <= r.ece <= 1
    assert r.task_mass is not None and abs(sum(r.task_mass) - 1) < 1e-6


def test_determinism(blobs):
    train, test = blobs
    stream = make_cil_stream(train, 3, 1)
    a = run_experiment(stream, train, test, cfg(method="er_id", seed=4), MLP)
    b = run_experiment(stream, train, test, cfg(method="er_id", seed=4), MLP)
    np.testing.assert_array_equal(a.acc.a, b.acc.a)
    assert a.loss_trace == b.loss_trace
    c = run_experiment(stream, train, test, cfg(method="er_id", seed=5), MLP)
    assert a.loss_trace != c.loss_trace


def test_first_task_identical_across_replay_methods(blobs):
    """With no checkpoint and an empty buffer every two-pass method is plain L_ice."""
    train, test = blobs
    stream = make_cil_stream(train, 2, 0)
    traces = {}
    for method, loss in [("finetune", {}), ("er_ice", {}), ("er_id", {}),
                         ("er_id", {"alpha": 0.0, "beta": 0.0}), ("naive_id", {})]:
        r = run_experiment(stream, train, test, cfg(method=method, loss=loss), MLP)
        traces[(method, tuple(loss))] = [v for t, v in r.loss_trace if t == 0]
    ref = traces[("er_ice", ())]
    assert all(tr == ref for tr in traces.values())


def test_zero_weights_equal_er_ice_control_on_first_task(blobs):
    train, test = blobs
    stream = make_cil_stream(train, 2, 0)
    zero = run_experiment(stream, train, test,
                          cfg(method="er_id", loss=LossConfig(alpha=0, beta=0)), MLP)
    control = run_experiment(stream, train, test, cfg(method="er_ice"), MLP)
    first = [v for t, v in zero.loss_trace if t == 0]
    assert first == [v for t, v in control.loss_trace if t == 0]


def test_evaluation_does_not_mutate(blobs):
    train, test = blobs
    stream = make_cil_stream(train, 2, 0)
    state = init_state(cfg(), MLP, 6, train.input_shape)
    train_task(state, stream.tasks[0], train, cfg())
    weights = {k: v.clone() for k, v in state.net.state_dict().items()}
    rng_state = state.data_rng.bit_generator.state
    gen_state = state.input_gen.get_state().clone()
    buf = state.buffer.entries()[1].copy()
    evaluate_task_end(state, RunResult(0, AccuracyMatrix(2)), stream, test, 0, cfg())
    assert all(torch.equal(weights[k], v) for k, v in state.net.state_dict().items())
    assert state.data_rng.bit_generator.state == rng_state
    assert torch.equal(state.input_gen.get_state(), gen_state)
    np.testing.assert_array_equal(state.buffer.entries()[1], buf)


def test_finetune_forgets(blobs):
    train, test = blobs
    stream = make_cil_stream(train, 2, 0)
    r = run_experiment(stream, train, test, cfg(method="finetune", epochs_per_task=5), MLP)
    assert r.acc.acc(0, 0) - r.acc.acc(0, 1) > 0.3


def test_resume_matches_uninterrupted(blobs, tmp_path):
    train, test = blobs
    stream = make_cil_stream(train, 3, 2)
    full = run_experiment(stream, train, test, cfg(method="er_id"), MLP)
    short = make_cil_stream(train, 3, 2)
    # stop after two tasks by running a truncated stream into the same directory
    from ider.streams import TaskStream
    head = TaskStream(short.tasks[:2], short.protocol, short.seed, short.n_classes)
    run_dir = tmp_path / "run"
    try:
        run_experiment(head, train, test, cfg(method="er_id"), MLP, run_dir=run_dir)
    except Exception:
        pass
    assert (run_dir / "progress.pt").exists() and (run_dir / "buffer_state.pt").exists()
    assert json.loads((run_dir / "partial.json").read_text())["completed_tasks"] == 2
    net, payload = load_checkpoint(run_dir / "checkpoint_task1.pt")
    assert payload["task_id"] == 1
    # the 2-task result matrix is smaller; rebuild one compatible with the full stream
    progress = torch.load(run_dir / "progress.pt", weights_only=False)
    acc = progress["result"]["acc"]
    progress["result"]["acc"] = [row + [None] for row in acc] + [[None] * 3]
    torch.save(progress, run_dir / "progress.pt")
    resumed = run_experiment(stream, train, test, cfg(method="er_id"), MLP, run_dir=run_dir)
    np.testing.assert_array_equal(full.acc.a, resumed.acc.a)
    assert full.loss_trace == resumed.loss_trace
