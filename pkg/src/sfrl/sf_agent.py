"""Successor-feature agent with linear cross-task feature maps.

Per task ``i`` the model keeps reward weights ``omega[i]``, a successor head
``psi[i]`` producing one feature-sized vector per action, and a matrix ``B[i]``
mapping current-task features onto that task's features. The encoder and
decoder are shared and keep training across tasks; when a task is retired its
encoder is snapshotted so its features stay available as regression targets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, Adam, DimensionError, mse_and_grad

OUTPUT_MAP = "output"  # Q_i = (B_i psi_i(phi_k, a)) . omega_i
INPUT_MAP = "input"  # Q_i = psi_i(B_i phi_k, a) . omega_i


class ConfigurationError(RuntimeError):
    pass


@dataclass
class TaskHead:
    omega: np.ndarray  # [phi_dim]
    psi: MLP  # phi_dim -> hidden -> n_actions * phi_dim
    B: np.ndarray  # [phi_dim, phi_dim]
    frozen_encoder: MLP | None = None


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray


class SFModel:
    """Encoder/decoder plus per-task successor heads.

    ``multitask_sf`` trains every task's successor head on current-task
    transitions and evaluates old tasks with the output-side map; otherwise old
    heads are kept frozen and old tasks are evaluated with the input-side map
    ``psi_i(B_i phi_k)``, which matches what a frozen head was trained on.
    """

    kind = "sf"

    def __init__(self, state_dim: int, n_actions: int = 4, phi_dim: int = 64,
                 encoder_hidden=(256, 128), decoder_hidden=(128, 256), psi_hidden: int = 256,
                 gamma: float = 0.95, lr: float = 2.5e-4, multitask_sf: bool = False,
                 sf_steps: int = 1, map_weight: float = 1.0, rng=None, dtype=np.float32):
        self.rng = np.random.default_rng(rng)
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.phi_dim = phi_dim
        self.psi_hidden = psi_hidden
        self.gamma = gamma
        self.lr = lr
        self.multitask_sf = multitask_sf
        self.sf_steps = sf_steps  # successor steps per feature step
        self.map_weight = map_weight  # scale of the old-task feature-map terms
        self.dtype = dtype
        self.encoder = MLP.build([state_dim, *encoder_hidden, phi_dim], self.rng, dtype=dtype)
        self.decoder = MLP.build([phi_dim, *decoder_hidden, state_dim], self.rng, dtype=dtype)
        self.tasks: list[TaskHead] = [self._new_head()]
        self.current_task = 0
        self.target_heads: list[MLP] = [self.tasks[0].psi.copy()]
        self.n_syncs = 0
        self.n_updates = 0
        self._build_optimizer()

    # ------------------------------------------------------------------ structure

    def _new_head(self) -> TaskHead:
        psi = MLP.build([self.phi_dim, self.psi_hidden, self.n_actions * self.phi_dim], self.rng,
                        dtype=self.dtype)
        return TaskHead(np.zeros(self.phi_dim, self.dtype), psi,
                        np.eye(self.phi_dim, dtype=self.dtype))

    @property
    def old_task_form(self) -> str:
        return OUTPUT_MAP if self.multitask_sf else INPUT_MAP

    def trainable_sf(self) -> dict[str, np.ndarray]:
        heads = range(len(self.tasks)) if self.multitask_sf else [self.current_task]
        return {f"task{i}.psi.{n}": p for i in heads for n, p in self.tasks[i].psi.parameters().items()}

    def trainable_phi(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{n}": p for n, p in self.encoder.parameters().items()}
        out.update({f"decoder.{n}": p for n, p in self.decoder.parameters().items()})
        out[f"task{self.current_task}.omega"] = self.tasks[self.current_task].omega
        for i in range(self.current_task):
            out[f"task{i}.B"] = self.tasks[i].B
        return out

    def _build_optimizer(self) -> None:
        old = getattr(self, "optimizer", None)
        self.optimizer = Adam({**self.trainable_sf(), **self.trainable_phi()}, lr=self.lr)
        if old is not None:
            # shared arrays (encoder, decoder) keep their moments across a task switch
            for name, st in old.states.items():
                if self.optimizer.params.get(name) is old.params[name]:
                    self.optimizer.states[name] = st

    def parameters(self) -> dict[str, np.ndarray]:
        """Every array in the model, keyed by checkpoint name."""
        out = {f"encoder.{n}": p for n, p in self.encoder.parameters().items()}
        out.update({f"decoder.{n}": p for n, p in self.decoder.parameters().items()})
        for i, t in enumerate(self.tasks):
            out.update({f"task{i}.psi.{n}": p for n, p in t.psi.parameters().items()})
            out[f"task{i}.B"] = t.B
            out[f"task{i}.omega"] = t.omega
            if t.frozen_encoder is not None:
                out.update({f"task{i}.frozen_encoder.{n}": p
                            for n, p in t.frozen_encoder.parameters().items()})
        for i, h in enumerate(self.target_heads):
            out.update({f"target.task{i}.psi.{n}": p for n, p in h.parameters().items()})
        return out

    def _check_task(self, task: int | None) -> int:
        task = self.current_task if task is None else task
        if not 0 <= task < len(self.tasks):
            raise IndexError(f"invalid task index {task}; model has {len(self.tasks)} tasks")
        return task

    # ------------------------------------------------------------------ forward

    def encode(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=self.dtype)
        single = states.ndim == 1
        if states.shape[-1] != self.state_dim:
            raise DimensionError(f"state dim {states.shape[-1]} != encoder input {self.state_dim}")
        phi = self.encoder(states[None] if single else states)
        return phi[0] if single else phi

    def decode(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=self.dtype)
        if phi.shape[-1] != self.phi_dim:
            raise DimensionError(f"feature dim {phi.shape[-1]} != {self.phi_dim}")
        single = phi.ndim == 1
        out = self.decoder(phi[None] if single else phi)
        return out[0] if single else out

    def _head_input(self, task: int, phi: np.ndarray) -> np.ndarray:
        if task != self.current_task and self.old_task_form == INPUT_MAP:
            return phi @ self.tasks[task].B.T
        return phi

    def successor_forward(self, task: int, phi: np.ndarray, target: bool = False) -> np.ndarray:
        """Successor features for every action: ``[N, A, phi_dim]`` (or ``[A, phi_dim]``)."""
        task = self._check_task(task)
        phi = np.asarray(phi, dtype=self.dtype)
        single = phi.ndim == 1
        net = self.target_heads[task] if target else self.tasks[task].psi
        out = net(phi[None] if single else phi).reshape(-1, self.n_actions, self.phi_dim)
        return out[0] if single else out

    def q_from_phi(self, task: int, phi: np.ndarray, target: bool = False) -> np.ndarray:
        task = self._check_task(task)
        head = self.tasks[task]
        psi = self.successor_forward(task, self._head_input(task, phi), target)
        if task != self.current_task and self.old_task_form == OUTPUT_MAP:
            psi = psi @ head.B.T
        return psi @ head.omega

    def q_values(self, task: int | None, states: np.ndarray) -> np.ndarray:
        return self.q_from_phi(self._check_task(task), self.encode(states))

    def greedy_actions(self, states: np.ndarray, task: int | None = None) -> np.ndarray:
        return np.argmax(self.q_values(task, states), axis=-1)

    def select_action(self, task, state, epsilon: float, rng) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(self.n_actions))
        return int(np.argmax(self.q_values(task, state)))

    # ------------------------------------------------------------------ losses

    def sf_td_loss(self, batch: Batch, task: int | None = None):
        """TD loss of one successor head on a transition batch.

        Target: ``phi_s + gamma * psi^-(phi_s', a*)`` with ``a*`` greedy under
        the live head; a terminal next state contributes its own features only.
        Returns ``(loss, grads)``; gradients reach only the head's parameters.
        """
        task = self._check_task(task)
        phi_s = self.encode(batch.states)
        phi_sp = self.encode(batch.next_states)
        n = phi_s.shape[0]
        rows = np.arange(n)
        a_star = np.argmax(self.q_from_phi(task, phi_sp), axis=1)
        boot = self.successor_forward(task, self._head_input(task, phi_sp), target=True)[rows, a_star]
        term = batch.terminals.astype(bool)[:, None]
        y = phi_s + self.gamma * np.where(term, phi_sp, boot)

        head = self.tasks[task].psi
        out, acts = head.forward(self._head_input(task, phi_s), keep=True)
        out = out.reshape(n, self.n_actions, self.phi_dim)
        pred = out[rows, batch.actions]
        loss, g = mse_and_grad(pred, y)
        g_out = np.zeros_like(out)
        g_out[rows, batch.actions] = g
        _, grads = head.backward(acts, g_out.reshape(n, -1), need_input_grad=False)
        return loss, {f"task{task}.psi.{k}": v for k, v in grads.items()}

    def phi_loss(self, states: np.ndarray, rewards: np.ndarray,
                 retained: dict[int, np.ndarray] | None = None):
        """Reward regression + reconstruction on current-task states, plus the
        feature-map regression onto every retired task's frozen features.

        Returns ``(loss, terms, grads)``.
        """
        k = self.current_task
        retained = retained or {}
        head = self.tasks[k]
        states = np.asarray(states, dtype=self.dtype)
        phi, enc_acts = self.encoder.forward(states, keep=True)

        pred_r = phi @ head.omega
        l_r, g_r = mse_and_grad(pred_r, np.asarray(rewards, dtype=self.dtype))
        g_phi = np.outer(g_r, head.omega)
        grads = {f"task{k}.omega": g_r @ phi}

        recon, dec_acts = self.decoder.forward(phi, keep=True)
        l_d, g_d = mse_and_grad(recon, states)
        g_in, dgrads = self.decoder.backward(dec_acts, g_d)
        g_phi = g_phi + g_in
        grads.update({f"decoder.{n}": v for n, v in dgrads.items()})

        _, egrads = self.encoder.backward(enc_acts, g_phi, need_input_grad=False)
        terms = {"reward": l_r, "reconstruction": l_d}
        l_b_total = 0.0
        for i in range(k):
            frozen = self.tasks[i].frozen_encoder
            if frozen is None or i not in retained:
                raise ConfigurationError(f"task {i} needs a frozen encoder and retained states")
            s_i = np.asarray(retained[i], dtype=self.dtype)
            target = frozen(s_i)
            phi_i, acts_i = self.encoder.forward(s_i, keep=True)
            B = self.tasks[i].B
            l_b, g_b = mse_and_grad(phi_i @ B.T, target)
            l_b, g_b = self.map_weight * l_b, self.map_weight * g_b
            grads[f"task{i}.B"] = g_b.T @ phi_i
            _, eg = self.encoder.backward(acts_i, g_b @ B, need_input_grad=False)
            for n_, v in eg.items():
                egrads[n_] = egrads[n_] + v
            terms[f"map{i}"] = l_b
            l_b_total += l_b
        grads.update({f"encoder.{n}": v for n, v in egrads.items()})
        return l_r + l_d + l_b_total, terms, grads

    # ------------------------------------------------------------------ training

    def update(self, batch: Batch, retained: dict[int, np.ndarray] | None = None) -> dict[str, float]:
        """One alternating update: successor step(s), then the feature step."""
        heads = range(len(self.tasks)) if self.multitask_sf else [self.current_task]
        loss_sf = 0.0
        for _ in range(self.sf_steps):
            for i in heads:
                l, g = self.sf_td_loss(batch, i)
                self.optimizer.step(g)
                loss_sf += l / self.sf_steps
        loss_phi, _, g = self.phi_loss(batch.next_states, batch.rewards, retained)
        self.optimizer.step(g)
        self.n_updates += 1
        return {"loss_sf": loss_sf, "loss_phi": loss_phi}

    def sync_targets(self) -> None:
        for live, tgt in zip(self.tasks, self.target_heads):
            tgt.assign(live.psi)
        self.n_syncs += 1

    def add_task(self, copy_init: bool = True) -> int:
        """Retire the current task and start a new one; returns its index.

        With ``copy_init`` the new successor head and reward weights start from
        the previous task's, otherwise the head is freshly initialized and the
        reward weights are zero.
        """
        prev = self.tasks[self.current_task]
        prev.frozen_encoder = self.encoder.copy()
        prev.B = np.eye(self.phi_dim, dtype=self.dtype)
        if copy_init:
            head = TaskHead(prev.omega.copy(), prev.psi.copy(), np.eye(self.phi_dim, dtype=self.dtype))
        else:
            head = self._new_head()
        self.tasks.append(head)
        self.target_heads.append(head.psi.copy())
        self.current_task = len(self.tasks) - 1
        self.sync_targets()
        self._build_optimizer()
        return self.current_task

    def task_has_snapshot(self, i: int) -> bool:
        return self.tasks[i].frozen_encoder is not None
