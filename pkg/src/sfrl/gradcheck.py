"""Finite-difference verification of every training loss on small float64 models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import DQNModel, ImitationModel
from .nn import flatten, grad_check, unflatten_into
from .sf_agent import Batch, SFModel

STATE_DIM = 6
N_ACTIONS = 4
BATCH = 5


@dataclass
class LossCheck:
    name: str
    instances: int
    max_rel_err: float
    passed: bool


def _batch(rng, n=BATCH, state_dim=STATE_DIM) -> Batch:
    return Batch(rng.normal(size=(n, state_dim)), rng.integers(N_ACTIONS, size=n),
                 rng.normal(size=n), rng.normal(size=(n, state_dim)), rng.random(n) < 0.3)


def _sf_model(rng, n_tasks=1, multitask=False) -> SFModel:
    m = SFModel(STATE_DIM, N_ACTIONS, phi_dim=3, encoder_hidden=(7,), decoder_hidden=(7,),
                psi_hidden=6, gamma=0.9, multitask_sf=multitask, rng=rng, dtype=np.float64)
    for p in m.parameters().values():
        if p.ndim == 1:  # give biases and omega non-trivial values
            p[...] = rng.normal(size=p.shape) * 0.3
    for _ in range(n_tasks - 1):
        m.add_task(copy_init=False)
        # let the encoder drift away from the snapshots and the maps away from I
        for p in m.encoder.parameters().values():
            p += rng.normal(size=p.shape) * 0.1
        for t in m.tasks[:-1]:
            t.B += rng.normal(size=t.B.shape) * 0.1
        m.tasks[-1].omega[...] = rng.normal(size=m.phi_dim)
    return m


def _check(params: dict, names: list[str], fn, h, tol):
    """grad_check over the named arrays; ``fn() -> (loss, grads)`` reads them in place."""
    x0 = flatten(params, names)

    def loss_fn(x):
        unflatten_into(x, params, names)
        loss, grads = fn()
        g = np.concatenate([np.asarray(grads.get(n, np.zeros_like(params[n]))).ravel() for n in names])
        return loss, g

    rep = grad_check(loss_fn, x0, h, tol)
    unflatten_into(x0, params, names)
    return rep


def check_sf_td(rng, h=1e-5, tol=1e-3, multitask=False):
    m = _sf_model(rng, n_tasks=2 if multitask else 1, multitask=multitask)
    batch = _batch(rng)
    params = m.parameters()
    names = list(m.trainable_sf())
    heads = range(len(m.tasks)) if multitask else [m.current_task]

    def fn():
        total, grads = 0.0, {}
        for i in heads:
            l, g = m.sf_td_loss(batch, i)
            total += l
            grads.update(g)
        return total, grads
    return _check(params, names, fn, h, tol)


def check_phi(rng, n_tasks=1, h=1e-5, tol=1e-3):
    m = _sf_model(rng, n_tasks=n_tasks)
    states = rng.normal(size=(BATCH, STATE_DIM))
    rewards = rng.normal(size=BATCH)
    retained = {i: rng.normal(size=(BATCH, STATE_DIM)) for i in range(m.current_task)}
    params = m.parameters()
    names = list(m.trainable_phi())

    def fn():
        loss, _, grads = m.phi_loss(states, rewards, retained)
        return loss, grads
    return _check(params, names, fn, h, tol)


def check_dqn(rng, h=1e-5, tol=1e-3):
    m = DQNModel(STATE_DIM, N_ACTIONS, phi_dim=3, encoder_hidden=(7,), q_hidden=6, gamma=0.9,
                 rng=rng, dtype=np.float64)
    for p in m.parameters().values():
        if p.ndim == 1:
            p[...] = rng.normal(size=p.shape) * 0.3
    batch = _batch(rng)
    params = m.parameters()
    names = list(m.trainable())
    return _check(params, names, lambda: m.dqn_loss(batch), h, tol)


def check_imitation(rng, h=1e-5, tol=1e-3):
    m = ImitationModel(STATE_DIM, N_ACTIONS, phi_dim=3, encoder_hidden=(7,), rng=rng, dtype=np.float64)
    for p in m.parameters().values():
        if p.ndim == 1:
            p[...] = rng.normal(size=p.shape) * 0.3
    states = rng.normal(size=(BATCH, STATE_DIM))
    labels = rng.integers(N_ACTIONS, size=BATCH)
    params = m.parameters()
    return _check(params, list(params), lambda: m.imitation_loss(states, labels), h, tol)


SUITE = {
    "sf_td_single_task": lambda rng: check_sf_td(rng),
    "sf_td_multitask": lambda rng: check_sf_td(rng, multitask=True),
    "phi_single_task": lambda rng: check_phi(rng, 1),
    "phi_with_feature_maps": lambda rng: check_phi(rng, 3),
    "dqn_td": check_dqn,
    "imitation_xent": check_imitation,
}


def run_suite(instances: int = 20, tol: float = 1e-3, seed: int = 0) -> list[LossCheck]:
    out = []
    for k, (name, fn) in enumerate(SUITE.items()):
        worst = 0.0
        for i in range(instances):
            rep = fn(np.random.default_rng([seed, k, i]))
            worst = max(worst, rep.max_rel_err)
        out.append(LossCheck(name, instances, worst, worst <= tol))
    return out
