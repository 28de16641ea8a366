"""Post-hoc probing: how much pose information the learned features carry."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .maze import MazeEnv, Pose, optimal_action, reset
from .maze import step as maze_step
from .nn import MLP, Adam, mse_and_grad

MIN_SAMPLES = 100


@dataclass
class PoseFit:
    mean_position_error: float  # cells, held-out
    heading_accuracy: float  # fraction of held-out headings recovered
    chance_position_error: float  # error of always predicting the training mean
    n_train: int
    n_test: int


def collect_trajectories(env: MazeEnv, n_samples: int, rng, explore: float = 0.3):
    """Frame stacks and true poses along noisy planner rollouts from random starts.

    With probability ``explore`` a step takes a random action instead of the
    planner's, so the walk covers poses off the optimal routes.
    """
    rng = np.random.default_rng(rng)
    maze = env.maze
    d = env.sensor.frame_dim
    states = np.empty((n_samples, env.state_dim))
    poses: list[Pose] = []
    while len(poses) < n_samples:
        pose = reset(maze, rng)
        frames = env.initial_state(pose)
        for _ in range(env.max_steps):
            if len(poses) == n_samples:
                break
            states[len(poses)] = frames
            poses.append(pose)
            a = int(rng.integers(4)) if rng.random() < explore else optimal_action(maze, pose)
            pose, _, terminal, _ = maze_step(maze, pose, a)
            if terminal:
                break
            frames = np.concatenate([frames[d:], env.frame(pose)])
    return states, poses


def pose_targets(poses: list[Pose]) -> np.ndarray:
    """``[x, y, sin(theta), cos(theta)]`` per pose, theta measured from North."""
    theta = np.array([p.heading for p in poses]) * (np.pi / 2)
    return np.column_stack([[p.x for p in poses], [p.y for p in poses], np.sin(theta), np.cos(theta)])


def regress_pose(encode, states: np.ndarray, poses: list[Pose], rng, *, epochs: int = 60,
                 batch_size: int = 64, lr: float = 1e-3, holdout: float = 0.2,
                 hidden: tuple[int, int] = (128, 128)) -> PoseFit:
    """Fit a small regressor from frozen features to pose and score it on held-out data.

    ``encode`` maps a batch of states to features (e.g. ``model.encode``); the
    model itself is only read. Positions are standardised for training and the
    error is reported back in cell units.
    """
    n = len(poses)
    if n < MIN_SAMPLES or len(states) != n:
        raise ValueError(f"need at least {MIN_SAMPLES} labelled states with matching poses, got {n}")
    rng = np.random.default_rng(rng)
    feats = np.asarray(encode(np.asarray(states)), dtype=np.float64)
    y = pose_targets(poses)
    perm = rng.permutation(n)
    n_test = max(1, int(round(holdout * n)))
    test, train = perm[:n_test], perm[n_test:]

    f_mu, f_sd = feats[train].mean(0), feats[train].std(0) + 1e-8
    x = (feats - f_mu) / f_sd
    p_mu, p_sd = y[train, :2].mean(0), y[train, :2].std(0) + 1e-8
    t = y.copy()
    t[:, :2] = (y[:, :2] - p_mu) / p_sd

    net = MLP.build([x.shape[1], *hidden, 4], rng)
    opt = Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        order = rng.permutation(train)
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            out, acts = net.forward(x[idx], keep=True)
            _, g = mse_and_grad(out, t[idx])
            _, grads = net.backward(acts, g, need_input_grad=False)
            opt.step(grads)

    pred = net(x[test])
    pos = pred[:, :2] * p_sd + p_mu
    err = np.linalg.norm(pos - y[test, :2], axis=1).mean()
    chance = np.linalg.norm(p_mu - y[test, :2], axis=1).mean()
    heading = np.round(np.arctan2(pred[:, 2], pred[:, 3]) / (np.pi / 2)).astype(int) % 4
    truth = np.array([poses[i].heading for i in test])
    return PoseFit(float(err), float(np.mean(heading == truth)), float(chance), len(train), n_test)
