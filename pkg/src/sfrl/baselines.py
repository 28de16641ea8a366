"""Comparison learners: DQN (scratch / finetune / fixed-feature transfer) and
a supervised imitation learner trained on planner labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .maze import MazeEnv, MazeMap, optimal_action, reset
from .maze import step as maze_step
from .nn import MLP, Adam, DimensionError, mse_and_grad, softmax_xent_and_grad

FINETUNE = "finetune"
FIX_FEATURE = "fixfeature"


class DQNModel:
    kind = "dqn"

    def __init__(self, state_dim: int, n_actions: int = 4, phi_dim: int = 64,
                 encoder_hidden=(256, 128), q_hidden: int = 256, gamma: float = 0.95,
                 lr: float = 2.5e-4, rng=None, dtype=np.float32):
        self.rng = np.random.default_rng(rng)
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.gamma = gamma
        self.lr = lr
        self.dtype = dtype
        self.encoder = MLP.build([state_dim, *encoder_hidden, phi_dim], self.rng, dtype=dtype)
        self.q_head = MLP.build([phi_dim, q_hidden, n_actions], self.rng, dtype=dtype)
        self.target_encoder = self.encoder.copy()
        self.target_q_head = self.q_head.copy()
        self.freeze_encoder = False
        self.n_updates = 0
        self.n_syncs = 0
        self._build_optimizer()

    def _build_optimizer(self) -> None:
        self.optimizer = Adam(self.trainable(), lr=self.lr)

    def trainable(self) -> dict[str, np.ndarray]:
        out = {f"q_head.{n}": p for n, p in self.q_head.parameters().items()}
        if not self.freeze_encoder:
            out.update({f"encoder.{n}": p for n, p in self.encoder.parameters().items()})
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("encoder", self.encoder), ("q_head", self.q_head),
                            ("target.encoder", self.target_encoder),
                            ("target.q_head", self.target_q_head)):
            out.update({f"{prefix}.{n}": p for n, p in net.parameters().items()})
        return out

    def q_values(self, states: np.ndarray, target: bool = False) -> np.ndarray:
        states = np.asarray(states, dtype=self.dtype)
        if states.shape[-1] != self.state_dim:
            raise DimensionError(f"state dim {states.shape[-1]} != {self.state_dim}")
        single = states.ndim == 1
        x = states[None] if single else states
        enc, head = (self.target_encoder, self.target_q_head) if target else (self.encoder, self.q_head)
        q = head(enc(x))
        return q[0] if single else q

    def greedy_actions(self, states: np.ndarray, task=None) -> np.ndarray:
        return np.argmax(self.q_values(states), axis=-1)

    def select_action(self, task, state, epsilon: float, rng) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(self.n_actions))
        return int(np.argmax(self.q_values(state)))

    def dqn_loss(self, batch):
        """Squared TD error against ``r + gamma * max_a' Q_target(s', a')``."""
        s = np.asarray(batch.states, dtype=self.dtype)
        n = s.shape[0]
        rows = np.arange(n)
        q_next = self.q_values(batch.next_states, target=True).max(axis=1)
        y = batch.rewards + self.gamma * np.where(batch.terminals.astype(bool), 0.0, q_next)
        phi, e_acts = self.encoder.forward(s, keep=True)
        q, h_acts = self.q_head.forward(phi, keep=True)
        loss, g = mse_and_grad(q[rows, batch.actions], y.astype(self.dtype))
        g_q = np.zeros_like(q)
        g_q[rows, batch.actions] = g
        g_phi, hgrads = self.q_head.backward(h_acts, g_q)
        grads = {f"q_head.{k}": v for k, v in hgrads.items()}
        if not self.freeze_encoder:
            _, egrads = self.encoder.backward(e_acts, g_phi, need_input_grad=False)
            grads.update({f"encoder.{k}": v for k, v in egrads.items()})
        return loss, grads

    def update(self, batch, retained=None) -> dict[str, float]:
        loss, grads = self.dqn_loss(batch)
        self.optimizer.step(grads)
        self.n_updates += 1
        return {"loss_q": loss}

    def sync_targets(self) -> None:
        self.target_encoder.assign(self.encoder)
        self.target_q_head.assign(self.q_head)
        self.n_syncs += 1


def dqn_transfer_init(model: DQNModel, mode: str) -> DQNModel:
    """Prepare a trained DQN for a new task, keeping its weights.

    ``finetune`` trains everything; ``fixfeature`` freezes the encoder.
    Optimizer moments are reset.
    """
    mode = mode.lower()
    if mode not in (FINETUNE, FIX_FEATURE):
        raise ValueError(f"unknown DQN transfer mode {mode!r}")
    model.freeze_encoder = mode == FIX_FEATURE
    model.sync_targets()
    model._build_optimizer()
    return model


class ImitationModel:
    kind = "imitation"

    def __init__(self, state_dim: int, n_actions: int = 4, phi_dim: int = 64,
                 encoder_hidden=(256, 128), lr: float = 2.5e-4, rng=None, dtype=np.float32):
        self.rng = np.random.default_rng(rng)
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.dtype = dtype
        self.encoder = MLP.build([state_dim, *encoder_hidden, phi_dim], self.rng, dtype=dtype)
        self.head = MLP.build([phi_dim, n_actions], self.rng, dtype=dtype)
        self.optimizer = Adam(self.parameters(), lr=lr)
        self.n_updates = 0

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{n}": p for n, p in self.encoder.parameters().items()}
        out.update({f"head.{n}": p for n, p in self.head.parameters().items()})
        return out

    def logits(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=self.dtype)
        if states.shape[-1] != self.state_dim:
            raise DimensionError(f"state dim {states.shape[-1]} != {self.state_dim}")
        single = states.ndim == 1
        out = self.head(self.encoder(states[None] if single else states))
        return out[0] if single else out

    def greedy_actions(self, states: np.ndarray, task=None) -> np.ndarray:
        return np.argmax(self.logits(states), axis=-1)

    def imitation_loss(self, states: np.ndarray, labels: np.ndarray):
        states = np.asarray(states, dtype=self.dtype)
        phi, e_acts = self.encoder.forward(states, keep=True)
        logits, h_acts = self.head.forward(phi, keep=True)
        loss, g = softmax_xent_and_grad(logits, np.asarray(labels))
        g_phi, hgrads = self.head.backward(h_acts, g)
        _, egrads = self.encoder.backward(e_acts, g_phi, need_input_grad=False)
        grads = {f"head.{k}": v for k, v in hgrads.items()}
        grads.update({f"encoder.{k}": v for k, v in egrads.items()})
        return loss, grads

    def update(self, states: np.ndarray, labels: np.ndarray) -> float:
        loss, grads = self.imitation_loss(states, labels)
        self.optimizer.step(grads)
        self.n_updates += 1
        return loss

    def accuracy(self, states: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.greedy_actions(states) == labels))


@dataclass
class LabeledDataset:
    states: np.ndarray  # [N, state_dim]
    labels: np.ndarray  # [N]
    poses: list  # ground-truth Pose per record, used for verification only

    def __len__(self) -> int:
        return len(self.labels)


def build_imitation_dataset(env: MazeEnv, n_samples: int, rng) -> LabeledDataset:
    """Frame stacks along planner rollouts from random starts, labelled with
    the planner's action. Requires ground-truth poses, unlike evaluation."""
    rng = np.random.default_rng(rng)
    maze: MazeMap = env.maze
    states = np.empty((n_samples, env.state_dim))
    labels = np.empty(n_samples, dtype=np.int64)
    poses = []
    i = 0
    while i < n_samples:
        pose = reset(maze, rng)
        frames = env.initial_state(pose)
        d = env.sensor.frame_dim
        while i < n_samples:
            a = optimal_action(maze, pose)
            states[i] = frames
            labels[i] = a
            poses.append(pose)
            i += 1
            pose, _, terminal, _ = maze_step(maze, pose, a)
            if terminal:
                break
            frames = np.concatenate([frames[d:], env.frame(pose)])
    return LabeledDataset(states, labels, poses)
