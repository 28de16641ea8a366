"""Experience replay, exploration schedule, the training loop, evaluation and
sequential multi-task transfer."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .baselines import DQNModel, ImitationModel, LabeledDataset, dqn_transfer_init
from .checkpoint import model_to_checkpoint
from .maze import MazeEnv, MazeMap, Pose, SensorConfig, optimal_action, reset
from .maze import step as maze_step
from .nn import NonFiniteError, all_finite
from .sf_agent import Batch, SFModel

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "task_id", "mean_reward", "std_reward", "success_ratio", "mean_steps",
                  "loss_sf", "loss_phi", "loss_q", "epsilon", "wall_ms")
MATRIX_COLUMNS = ("pretrain_task", "eval_task", "success_num", "success_den", "mean_reward",
                  "std_reward", "mean_steps", "std_steps")
SUCCESS_THRESHOLD = 0.9


class TrainingHalted(RuntimeError):
    """Training stopped on a non-finite value; a checkpoint was written if possible."""


# --------------------------------------------------------------------------- replay

class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions; uniform sampling with replacement."""

    def __init__(self, capacity: int, state_dim: int, dtype=np.float32):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim), dtype)
        self.next_states = np.zeros((capacity, state_dim), dtype)
        self.actions = np.zeros(capacity, np.int64)
        self.rewards = np.zeros(capacity, dtype)
        self.terminals = np.zeros(capacity, bool)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward, next_state, terminal) -> None:
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminals[i] = terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(self.size, size=n)

    def sample(self, n: int, rng) -> Batch:
        idx = self.sample_indices(n, rng)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminals[idx])

    def reservoir(self, n: int, rng) -> np.ndarray:
        """Up to ``n`` distinct stored states, drawn uniformly."""
        n = min(n, self.size)
        idx = rng.choice(self.size, size=n, replace=False)
        return self.next_states[np.sort(idx)].copy()


# --------------------------------------------------------------------------- schedule

@dataclass
class TrainSchedule:
    total_steps: int = 200_000
    warmup_steps: int = 2_000
    update_every: int = 4
    target_sync_every: int = 250
    eval_every: int = 5_000
    eval_episodes: int = 50
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_anneal_steps: int = 30_000
    gamma: float = 0.95
    batch_size: int = 64
    learning_rate: float = 2.5e-4
    buffer_capacity: int = 50_000
    retained_states: int = 2_048
    stop_after_success: int = 0  # stop once this many consecutive evals reach the threshold

    def __post_init__(self):
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must not exceed epsilon_start")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for f in ("update_every", "target_sync_every", "eval_every", "batch_size", "buffer_capacity"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")

    def epsilon(self, step: int) -> float:
        """Exploration rate before taking env step ``step`` (0-based)."""
        if step < self.warmup_steps:
            return self.epsilon_start
        if self.epsilon_anneal_steps <= 0:
            return self.epsilon_end
        frac = min(1.0, (step - self.warmup_steps) / self.epsilon_anneal_steps)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def n_updates(self, env_steps: int) -> int:
        return max(0, (env_steps - self.warmup_steps) // self.update_every)


@dataclass
class MetricsRow:
    step: int
    task_id: int
    mean_reward: float
    std_reward: float
    success_ratio: float
    mean_steps: float
    loss_sf: float | None = None
    loss_phi: float | None = None
    loss_q: float | None = None
    epsilon: float = 0.0
    wall_ms: float | None = None

    def as_csv(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            out.append("" if v is None else (str(v) if isinstance(v, int) else repr(float(v))))
        return out


def write_metrics(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def steps_to_success(rows, task_id: int | None = None, threshold: float = SUCCESS_THRESHOLD,
                     consecutive: int = 2) -> int | None:
    """First eval step from which ``consecutive`` evaluations in a row reach
    ``threshold`` success; None if that never happens."""
    seq = [(int(_get(r, "step")), float(_get(r, "success_ratio"))) for r in rows
           if task_id is None or int(_get(r, "task_id")) == task_id]
    for i in range(len(seq) - consecutive + 1):
        if all(s >= threshold for _, s in seq[i:i + consecutive]):
            return seq[i][0]
    return None


def _get(row, key):
    return row[key] if isinstance(row, dict) else getattr(row, key)


# --------------------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    successes: int
    episodes: int
    rewards: np.ndarray
    steps: np.ndarray

    @property
    def success_ratio(self) -> float:
        return self.successes / self.episodes

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def std_reward(self) -> float:
        return float(np.std(self.rewards))

    @property
    def mean_steps(self) -> float:
        return float(np.mean(self.steps))

    @property
    def std_steps(self) -> float:
        return float(np.std(self.steps))


def evaluate(policy: Callable[[np.ndarray, list[Pose]], np.ndarray], maze: MazeMap,
             n_episodes: int = 50, max_steps: int = 200, rng=None,
             sensor: SensorConfig = SensorConfig(), history: int = 4) -> EvalResult:
    """Greedy noise-free rollouts from random starts, all episodes in lockstep.

    ``policy(states, poses)`` maps a batch of frame stacks to actions; poses
    are passed only so planner baselines can be scored with the same routine.
    A failed episode counts ``max_steps`` steps.
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    rng = np.random.default_rng(rng)
    env = MazeEnv(maze, sensor, history, slip_prob=0.0, max_steps=max_steps)

    poses = [reset(maze, rng) for _ in range(n_episodes)]
    states = np.stack([env.initial_state(p) for p in poses])
    rewards = np.zeros(n_episodes)
    steps = np.zeros(n_episodes, dtype=np.int64)
    done = np.zeros(n_episodes, bool)
    success = np.zeros(n_episodes, bool)
    d = sensor.frame_dim
    for _ in range(max_steps):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        actions = policy(states[live], [poses[i] for i in live])
        for i, a in zip(live, actions):
            pose, r, term, _ = maze_step(maze, poses[i], int(a))
            poses[i] = pose
            rewards[i] += r
            steps[i] += 1
            states[i, :-d] = states[i, d:]
            states[i, -d:] = env.frame(pose)
            if term:
                done[i] = success[i] = True
    return EvalResult(int(success.sum()), n_episodes, rewards, steps)


def model_policy(model, task: int | None = None):
    def policy(states, poses):
        return model.greedy_actions(states, task) if model.kind == "sf" else model.greedy_actions(states)
    return policy


def oracle_policy(maze: MazeMap):
    def policy(states, poses):
        return np.array([optimal_action(maze, p) for p in poses])
    return policy


def random_policy(rng, n_actions: int = 4):
    rng = np.random.default_rng(rng)

    def policy(states, poses):
        return rng.integers(n_actions, size=len(poses))
    return policy


def param_hash(model) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(model.parameters().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    buffer: ReplayBuffer
    env_steps: int
    n_updates: int
    final_eval: EvalResult | None = None


def _mean_or_none(xs):
    return float(np.mean(xs)) if xs else None


def run_training(model, env: MazeEnv, schedule: TrainSchedule, rng, *, task_id: int = 0,
                 retained: dict[int, np.ndarray] | None = None, eval_seed: int = 0,
                 checkpoint_path=None, record_wall_clock: bool = False,
                 on_eval: Callable[[MetricsRow], None] | None = None) -> TrainResult:
    """Epsilon-greedy interaction with updates every ``update_every`` steps
    after warm-up, target syncs every ``target_sync_every`` updates and a
    greedy evaluation every ``eval_every`` env steps."""
    rng = np.random.default_rng(rng)
    act_rng, sample_rng = rng.spawn(2)
    buffer = ReplayBuffer(schedule.buffer_capacity, env.state_dim)
    rows: list[MetricsRow] = []
    losses: dict[str, list[float]] = {"loss_sf": [], "loss_phi": [], "loss_q": []}
    task = getattr(model, "current_task", 0)
    n_updates = 0
    hits = 0
    t0 = time.perf_counter()
    state, _ = env.reset()
    final = None
    t = 0
    for t in range(1, schedule.total_steps + 1):
        eps = schedule.epsilon(t - 1)
        a = model.select_action(task, state, eps, act_rng)
        res = env.step(a)
        buffer.add(state, a, res.reward, res.state, res.terminal)
        state = res.state
        if res.terminal or res.truncated:
            state, _ = env.reset()

        if t > schedule.warmup_steps and (t - schedule.warmup_steps) % schedule.update_every == 0:
            batch = buffer.sample(schedule.batch_size, sample_rng)
            ret = None
            if retained:
                ret = {i: s[sample_rng.integers(len(s), size=schedule.batch_size)]
                       for i, s in retained.items()}
            try:
                out = model.update(batch, ret)
            except NonFiniteError as e:
                _halt(model, env, checkpoint_path, f"{e} (env step {t})")
            for k, v in out.items():
                if not math.isfinite(v):
                    _halt(model, env, checkpoint_path, f"non-finite {k} at env step {t}")
                losses[k].append(v)
            n_updates += 1
            if n_updates % schedule.target_sync_every == 0:
                model.sync_targets()

        if t % schedule.eval_every == 0:
            final = evaluate(model_policy(model, task), env.maze, schedule.eval_episodes,
                             env.max_steps, eval_seed, env.sensor, env.history)
            row = MetricsRow(t, task_id, final.mean_reward, final.std_reward, final.success_ratio,
                             final.mean_steps, _mean_or_none(losses["loss_sf"]),
                             _mean_or_none(losses["loss_phi"]), _mean_or_none(losses["loss_q"]), eps,
                             (time.perf_counter() - t0) * 1e3 if record_wall_clock else None)
            losses = {k: [] for k in losses}
            rows.append(row)
            log.info("task %d step %d success %.2f reward %.3f", task_id, t, row.success_ratio,
                     row.mean_reward)
            if checkpoint_path is not None:
                model_to_checkpoint(model, env.history, env.sensor.rays).save(checkpoint_path)
            if on_eval is not None:
                on_eval(row)
            hits = hits + 1 if final.success_ratio >= SUCCESS_THRESHOLD else 0
            if schedule.stop_after_success and hits >= schedule.stop_after_success:
                break
    if checkpoint_path is not None:
        model_to_checkpoint(model, env.history, env.sensor.rays).save(checkpoint_path)
    return TrainResult(rows, buffer, t, n_updates, final)


def _halt(model, env, checkpoint_path, message):
    bad = all_finite(model.parameters())
    if bad:
        message += f"; first non-finite parameter: {bad}"
    if checkpoint_path is not None:
        try:
            model_to_checkpoint(model, env.history, env.sensor.rays).save(
                Path(checkpoint_path).with_suffix(".halt.ckpt"))
        except Exception:  # diagnostics must not mask the original failure
            log.exception("could not write halt checkpoint")
    raise TrainingHalted(message)


# --------------------------------------------------------------------------- imitation

def train_imitation(model: ImitationModel, data: LabeledDataset, maze: MazeMap, schedule: TrainSchedule,
                    rng, *, holdout: float = 0.2, eval_seed: int = 0, task_id: int = 0,
                    sensor: SensorConfig = SensorConfig(), history: int = 4, max_steps: int = 200,
                    target_accuracy: float = 0.95):
    """Supervised training on planner labels.

    Updates are placed on the RL step axis (update ``u`` sits at env step
    ``warmup + u * update_every``) so curves line up with the RL learners.
    Returns ``(rows, accuracy_curve, updates_to_target)`` where the curve holds
    ``(update, held_out_accuracy)`` pairs.
    """
    rng = np.random.default_rng(rng)
    n = len(data)
    perm = rng.permutation(n)
    n_test = int(round(holdout * n))
    test, train = perm[:n_test], perm[n_test:]
    n_updates = schedule.n_updates(schedule.total_steps)
    rows, curve = [], []
    reached = None
    hits = 0
    losses = []
    for u in range(1, n_updates + 1):
        idx = train[rng.integers(len(train), size=schedule.batch_size)]
        losses.append(model.update(data.states[idx], data.labels[idx]))
        step = schedule.warmup_steps + u * schedule.update_every
        if u % 50 == 0 or u == n_updates:
            acc = model.accuracy(data.states[test], data.labels[test])
            curve.append((u, acc))
            if reached is None and acc >= target_accuracy:
                reached = u
        if step % schedule.eval_every == 0:
            ev = evaluate(model_policy(model), maze, schedule.eval_episodes, max_steps,
                          eval_seed, sensor, history)
            rows.append(MetricsRow(step, task_id, ev.mean_reward, ev.std_reward, ev.success_ratio,
                                   ev.mean_steps, None, None, _mean_or_none(losses), 0.0, None))
            losses = []
            hits = hits + 1 if ev.success_ratio >= SUCCESS_THRESHOLD else 0
            if schedule.stop_after_success and hits >= schedule.stop_after_success and reached:
                break
    return rows, curve, reached


# --------------------------------------------------------------------------- transfer

@dataclass
class MatrixRow:
    pretrain_task: str
    eval_task: str
    success_num: int
    success_den: int
    mean_reward: float
    std_reward: float
    mean_steps: float
    std_steps: float

    @classmethod
    def from_eval(cls, pretrain: str, eval_task: str, ev: EvalResult) -> "MatrixRow":
        return cls(pretrain, eval_task, ev.successes, ev.episodes, ev.mean_reward, ev.std_reward,
                   ev.mean_steps, ev.std_steps)


def write_matrix(rows: list[MatrixRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATRIX_COLUMNS)
        for r in rows:
            w.writerow([r.pretrain_task, r.eval_task, r.success_num, r.success_den,
                        repr(r.mean_reward), repr(r.std_reward), repr(r.mean_steps), repr(r.std_steps)])


@dataclass
class TransferResult:
    metrics: list[MetricsRow]
    per_task: list[TrainResult]
    matrix: list[MatrixRow]
    model: object = field(repr=False, default=None)


def run_transfer_sequence(tasks: list[tuple[MazeMap, TrainSchedule]], model, transfer_mode: str,
                          seed: int, *, sensor: SensorConfig = SensorConfig(), history: int = 4,
                          slip_prob: float = 0.05, max_steps: int = 200, checkpoint_path=None,
                          record_wall_clock: bool = False, on_task_end=None) -> TransferResult:
    """Train on each map in turn, switching tasks in between.

    ``transfer_mode``: ``transfer`` (SF, copy heads), ``scratch`` (SF, fresh
    head), ``finetune`` / ``fixfeature`` (DQN). After the final task every
    task is re-evaluated on its own map.
    """
    if not tasks:
        raise ValueError("need at least one task")
    all_rows, per_task, matrix = [], [], []
    retained: dict[int, np.ndarray] = {}
    names = [m.name for m, _ in tasks]
    for k, (maze, schedule) in enumerate(tasks):
        if k > 0:
            prev_buffer = per_task[-1].buffer
            if model.kind == "sf":
                retained[model.current_task] = prev_buffer.reservoir(
                    schedule.retained_states, np.random.default_rng([seed, 7, k]))
                model.add_task(copy_init=transfer_mode == "transfer")
            else:
                dqn_transfer_init(model, transfer_mode)
        env = MazeEnv(maze, sensor, history, slip_prob, max_steps, rng=[seed, 1, k])
        res = run_training(model, env, schedule, [seed, 2, k], task_id=k,
                           retained=retained if model.kind == "sf" else None,
                           eval_seed=eval_seed(seed, k), checkpoint_path=checkpoint_path,
                           record_wall_clock=record_wall_clock)
        per_task.append(res)
        all_rows.extend(res.metrics)
        ev = evaluate(model_policy(model, getattr(model, "current_task", None)), maze,
                      schedule.eval_episodes, max_steps, eval_seed(seed, k), sensor, history)
        matrix.append(MatrixRow.from_eval(names[k], names[k], ev))
        if on_task_end is not None:
            on_task_end(k, model)
    if len(tasks) > 1:
        chain = "/".join(names)
        for i, (maze, schedule) in enumerate(tasks[:-1]):
            task = i if model.kind == "sf" else None
            ev = evaluate(model_policy(model, task), maze, schedule.eval_episodes, max_steps,
                          eval_seed(seed, i), sensor, history)
            matrix.append(MatrixRow.from_eval(chain, names[i], ev))
    return TransferResult(all_rows, per_task, matrix, model)


def eval_seed(seed: int, task: int):
    return [seed, 1000 + task]
