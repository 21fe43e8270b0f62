"""Per-task training loop, task-boundary snapshots and the experiment driver."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .buffer import ReplayBuffer
from .data import LabeledDataset
from .errors import ConfigError, SequencingError
from .losses import LossConfig, ider_terms, make_projection
from .metrics import (AccuracyMatrix, ConfidenceLog, ece, faa, final_forgetting,
                      idempotence_distances, task_probability_mass)
from .model import (FrozenCheckpoint, LabelConditionedNet, ModelConfig, build_net,
                    save_checkpoint, snapshot)
from .streams import TaskSpec, TaskStream

log = logging.getLogger(__name__)

METHODS = ("finetune", "er", "er_ice", "er_id", "bfp_id", "naive_id")


@dataclass
class TrainConfig:
    method: str = "er_id"
    epochs_per_task: int = 5
    batch_size: int = 32
    replay_batch_size: int | None = None
    learning_rate: float = 0.03
    lr_decay_epochs: list[int] | None = None
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    buffer_capacity: int = 200
    buffer_policy: str | None = None
    eval_batch_size: int = 512
    n_bins: int = 10
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs_per_task < 1:
            raise ConfigError("epochs_per_task must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.buffer_capacity < 1 and self.uses_buffer:
            raise ConfigError("buffer_capacity must be positive for replay methods")

    @property
    def uses_buffer(self) -> bool:
        return self.method != "finetune"

    @property
    def policy(self) -> str:
        if self.buffer_policy:
            return self.buffer_policy
        return "class_balanced" if self.method == "bfp_id" else "reservoir"

    @property
    def milestones(self) -> list[int]:
        if self.lr_decay_epochs is not None:
            return list(self.lr_decay_epochs)
        e = self.epochs_per_task
        return [int(0.6 * e), int(0.9 * e)]

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= m for m in self.milestones)
        return self.learning_rate * self.lr_decay_factor ** drops


@dataclass
class TrainerState:
    net: LabelConditionedNet
    buffer: ReplayBuffer | None
    data_rng: np.random.Generator
    replay_rng: np.random.Generator
    input_gen: torch.Generator
    checkpoint: FrozenCheckpoint | None = None
    projection: torch.nn.Linear | None = None
    current_task: int = 0
    trained: bool = False
    loss_trace: list[tuple[int, float]] = field(default_factory=list)


def init_state(config: TrainConfig, model_config: ModelConfig, n_classes: int,
               input_shape: tuple[int, ...]) -> TrainerState:
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    torch.manual_seed(config.seed)
    net = build_net(model_config, n_classes, input_shape)
    gen = torch.Generator().manual_seed(int(seeds[2].generate_state(1)[0]))
    buffer = None
    if config.uses_buffer:
        buffer = ReplayBuffer(config.buffer_capacity, config.policy,
                              seed=int(seeds[3].generate_state(1)[0]))
    projection = make_projection(net.feat_channels) if config.method == "bfp_id" else None
    return TrainerState(net=net, buffer=buffer, data_rng=np.random.default_rng(seeds[0]),
                        replay_rng=np.random.default_rng(seeds[1]), input_gen=gen,
                        projection=projection)


def _replay(state: TrainerState, k: int):
    bx, by = state.buffer.sample_batch(k, state.replay_rng)
    return torch.from_numpy(bx), torch.from_numpy(by)


def step_terms(state: TrainerState, x, y, config: TrainConfig) -> dict[str, torch.Tensor]:
    """Loss terms for one optimisation step of the configured method."""
    net, method = state.net, config.method
    k = config.replay_batch_size or config.batch_size
    replay = (config.uses_buffer and state.current_task > 0
              and state.buffer is not None and not state.buffer.is_empty())
    if method == "er":
        if not replay:
            return {"total": F.cross_entropy(net(x, None), y)}
        bx, by = _replay(state, k)
        if config.loss.joint_forward:
            ce = F.cross_entropy(net(torch.cat([x, bx]), None), torch.cat([y, by]), reduction="none")
            return {"total": ce[:len(y)].mean() + ce[len(y):].mean()}
        return {"total": F.cross_entropy(net(x, None), y) + F.cross_entropy(net(bx, None), by)}
    if method == "finetune":
        cfg = LossConfig(**{**asdict(config.loss), "alpha": 0.0, "beta": 0.0})
        return ider_terms(net, None, x, y, config=cfg, generator=state.input_gen)
    if method == "er_ice":
        # ER with both cross-entropies replaced by the two-pass loss; no distillation
        cfg = LossConfig(**{**asdict(config.loss), "alpha": 0.0, "beta": 1.0})
        rep_batch = _replay(state, k) if replay else None
        return ider_terms(net, None, x, y, rep_batch=rep_batch, config=cfg,
                          generator=state.input_gen)
    ide_batch = _replay(state, k) if replay else None
    rep_batch = _replay(state, k) if replay else None
    return ider_terms(net, state.checkpoint, x, y, ide_batch, rep_batch, config.loss,
                      state.input_gen, state.projection, naive=method == "naive_id")


def train_task(state: TrainerState, task: TaskSpec, data: LabeledDataset,
               config: TrainConfig) -> TrainerState:
    if task.task_id != state.current_task:
        raise SequencingError(f"expected task {state.current_task}, got {task.task_id}")
    if state.trained:
        raise SequencingError(f"task {task.task_id} already trained; call end_of_task")
    net = state.net
    net.train()
    params = [p for p in net.parameters() if p.requires_grad]
    if state.projection is not None:
        with torch.no_grad():
            state.projection.weight.copy_(torch.eye(net.feat_channels))
        params += list(state.projection.parameters())
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    idx = np.asarray(task.train_samples, dtype=np.int64)
    for epoch in range(config.epochs_per_task):
        for group in opt.param_groups:
            group["lr"] = config.lr_at(epoch)
        order = idx[state.data_rng.permutation(len(idx))]
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            x, y = torch.from_numpy(data.x[b]), torch.from_numpy(data.y[b])
            terms = step_terms(state, x, y, config)
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            state.loss_trace.append((task.task_id, float(terms["total"].detach())))
            if state.buffer is not None and epoch == 0:
                state.buffer.offer_many(data.x[b], data.y[b])
    state.trained = True
    return state


def end_of_task(state: TrainerState) -> TrainerState:
    if not state.trained:
        raise SequencingError("end_of_task called without training the current task")
    state.checkpoint = snapshot(state.net, state.current_task)
    state.current_task += 1
    state.trained = False
    return state


@torch.no_grad()
def predict_logits(net, x: np.ndarray, batch_size: int = 512) -> torch.Tensor:
    was_training = net.training
    net.eval()
    try:
        out = [net(torch.from_numpy(x[i:i + batch_size]), None)
               for i in range(0, len(x), batch_size)]
    finally:
        net.train(was_training)
    return torch.cat(out) if out else torch.zeros(0, net.n_classes)


@dataclass
class RunResult:
    seed: int
    acc: AccuracyMatrix
    wall_clock: list[float] = field(default_factory=list)
    idempotence: list[dict] = field(default_factory=list)
    loss_trace: list[tuple[int, float]] = field(default_factory=list)
    confidence: ConfidenceLog | None = None
    task_mass: list[float] | None = None
    distances_self: np.ndarray | None = None
    distances_cross: np.ndarray | None = None
    n_bins: int = 10

    @property
    def faa(self) -> float:
        return faa(self.acc)

    @property
    def ff(self) -> float | None:
        return final_forgetting(self.acc) if self.acc.T >= 2 else None

    @property
    def ece(self) -> float:
        return ece(self.confidence, self.n_bins)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "acc_matrix": self.acc.to_list(),
            "faa": self.faa,
            "ff": self.ff,
            "ece": self.ece,
            "task_mass": self.task_mass,
            "idempotence": self.idempotence,
            "wall_clock": self.wall_clock,
        }


def _task_test_indices(stream: TaskStream, test: LabeledDataset):
    return [test.indices_of(t.classes) for t in stream.tasks]


def _stats(d: np.ndarray) -> dict:
    if len(d) == 0:
        return {"mean": None, "median": None}
    return {"mean": float(np.mean(d)), "median": float(np.median(d))}


def evaluate_task_end(state: TrainerState, result: RunResult, stream: TaskStream,
                      test: LabeledDataset, t: int, config: TrainConfig):
    """Accuracy on every seen task plus idempotence diagnostics, before the snapshot."""
    per_task = _task_test_indices(stream, test)
    for i in range(t + 1):
        logits = predict_logits(state.net, test.x[per_task[i]], config.eval_batch_size)
        acc = float((logits.argmax(-1).numpy() == test.y[per_task[i]]).mean()) if len(logits) else 0.0
        result.acc.record(i, t, acc)
    seen = test.indices_of(stream.seen_classes(t))
    xs = torch.from_numpy(test.x[seen])
    d_self = idempotence_distances(state.net, xs)
    entry = {"task": t, "self": _stats(d_self)}
    if state.checkpoint is not None:
        d_cross = idempotence_distances(state.net, xs, None, state.checkpoint)
        old = test.indices_of(stream.seen_classes(t - 1))
        d_old = idempotence_distances(state.net, torch.from_numpy(test.x[old]), None,
                                      state.checkpoint)
        entry["cross"] = _stats(d_cross)
        entry["cross_old_classes"] = _stats(d_old)
        result.distances_cross = d_cross
    result.distances_self = d_self
    result.idempotence.append(entry)


def _finalize(state: TrainerState, result: RunResult, stream: TaskStream,
              test: LabeledDataset, config: TrainConfig):
    seen = test.indices_of(stream.seen_classes(len(stream) - 1))
    logits = predict_logits(state.net, test.x[seen], config.eval_batch_size)
    first = stream.first_task_of()
    result.confidence = ConfidenceLog.from_logits(
        logits, test.y[seen], np.array([first[int(c)] for c in test.y[seen]]))
    if not stream.overlapping:
        result.task_mass = task_probability_mass(state.net, torch.from_numpy(test.x[seen]),
                                                 stream).tolist()


def _save_progress(run_dir: Path, state: TrainerState, result: RunResult):
    payload = {
        "net": state.net.state_dict(),
        "projection": None if state.projection is None else state.projection.state_dict(),
        "buffer": None if state.buffer is None else state.buffer.state_dict(),
        "data_rng": state.data_rng.bit_generator.state,
        "replay_rng": state.replay_rng.bit_generator.state,
        "input_gen": state.input_gen.get_state(),
        "current_task": state.current_task,
        "loss_trace": state.loss_trace,
        "result": {
            "acc": result.acc.to_list(), "wall_clock": result.wall_clock,
            "idempotence": result.idempotence,
            "distances_self": result.distances_self,
            "distances_cross": result.distances_cross,
        },
    }
    save_checkpoint(run_dir / f"checkpoint_task{state.current_task - 1}.pt", state.net,
                    task_id=state.current_task - 1)
    if state.buffer is not None:
        torch.save(state.buffer.state_dict(), run_dir / "buffer_state.pt")
    tmp = run_dir / "progress.pt.tmp"
    torch.save(payload, tmp)
    tmp.replace(run_dir / "progress.pt")
    _write_partial(run_dir, state, result)


def _write_partial(run_dir: Path, state: TrainerState, result: RunResult, failed: bool = False):
    partial = {"completed_tasks": state.current_task, "acc_matrix": result.acc.to_list(),
               "wall_clock": result.wall_clock, "idempotence": result.idempotence,
               "failed": failed}
    (run_dir / "partial.json").write_text(json.dumps(partial, indent=2))


def _load_progress(run_dir: Path, state: TrainerState, result: RunResult) -> bool:
    path = run_dir / "progress.pt"
    if not path.exists():
        return False
    payload = torch.load(path, weights_only=False)
    state.net.load_state_dict(payload["net"])
    if payload["projection"] is not None:
        state.projection.load_state_dict(payload["projection"])
    if payload["buffer"] is not None:
        state.buffer = ReplayBuffer.from_state(payload["buffer"])
    state.data_rng.bit_generator.state = payload["data_rng"]
    state.replay_rng.bit_generator.state = payload["replay_rng"]
    state.input_gen.set_state(payload["input_gen"])
    state.current_task = payload["current_task"]
    state.loss_trace = [tuple(e) for e in payload["loss_trace"]]
    if state.current_task > 0:
        state.checkpoint = snapshot(state.net, state.current_task - 1)
    result.acc = AccuracyMatrix.from_list(payload["result"]["acc"])
    result.wall_clock = list(payload["result"]["wall_clock"])
    result.idempotence = list(payload["result"]["idempotence"])
    result.distances_self = payload["result"]["distances_self"]
    result.distances_cross = payload["result"]["distances_cross"]
    return True


def run_experiment(stream: TaskStream, train: LabeledDataset, test: LabeledDataset,
                   config: TrainConfig, model_config: ModelConfig | None = None,
                   run_dir: str | Path | None = None) -> RunResult:
    """Train over the whole stream, evaluating all seen tasks after each one.

    With ``run_dir`` the trainer state is saved after every task and an
    existing ``progress.pt`` there is resumed from.
    """
    model_config = model_config or ModelConfig()
    state = init_state(config, model_config, train.n_classes, train.input_shape)
    result = RunResult(config.seed, AccuracyMatrix(len(stream)), n_bins=config.n_bins)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if _load_progress(run_dir, state, result):
            log.info("resuming seed %d at task %d", config.seed, state.current_task)
    try:
        for task in stream.tasks[state.current_task:]:
            t0 = time.perf_counter()
            train_task(state, task, train, config)
            evaluate_task_end(state, result, stream, test, task.task_id, config)
            end_of_task(state)
            result.wall_clock.append(time.perf_counter() - t0)
            log.info("seed %d task %d: acc %s", config.seed, task.task_id,
                     np.round(result.acc.a[task.task_id, : task.task_id + 1], 3).tolist())
            if run_dir is not None:
                _save_progress(run_dir, state, result)
    except Exception:
        if run_dir is not None:
            _write_partial(run_dir, state, result, failed=True)
        raise
    result.loss_trace = list(state.loss_trace)
    _finalize(state, result, stream, test, config)
    result.state = state
    return result
