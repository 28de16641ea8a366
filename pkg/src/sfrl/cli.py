"""Command-line entry points: train, eval, compare, gradcheck, oracle.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime halt or failed check.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .baselines import FINETUNE, FIX_FEATURE, DQNModel, ImitationModel, build_imitation_dataset
from .checkpoint import Checkpoint, CheckpointError, model_from_checkpoint, model_to_checkpoint
from .config import PRESETS, ConfigError, ExperimentConfig, parse_config
from .maze import N_ACTIONS, MapError, MazeEnv, SensorConfig, optimal_steps, resolve_map
from .sf_agent import SFModel
from .training import (
    METRIC_COLUMNS, MatrixRow, MetricsRow, TrainingHalted, eval_seed, evaluate, model_policy,
    oracle_policy, random_policy, read_metrics, run_transfer_sequence, steps_to_success,
    train_imitation, write_matrix, write_metrics,
)

OUTPUT_ROOT_ENV = "SFRL_OUTPUT_ROOT"
log = logging.getLogger("sfrl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- experiments

def build_model(cfg: ExperimentConfig, state_dim: int):
    rng = [cfg.seed, 0]
    if cfg.agent == "sf":
        return SFModel(state_dim, N_ACTIONS, cfg.phi_dim, cfg.encoder_hidden, cfg.decoder_hidden,
                       cfg.head_hidden, cfg.gamma, cfg.learning_rate, cfg.multitask_sf, cfg.sf_steps,
                       rng=rng)
    if cfg.agent.startswith("dqn"):
        return DQNModel(state_dim, N_ACTIONS, cfg.phi_dim, cfg.encoder_hidden, cfg.head_hidden,
                        cfg.gamma, cfg.learning_rate, rng=rng)
    if cfg.agent == "imitation":
        return ImitationModel(state_dim, N_ACTIONS, cfg.phi_dim, cfg.encoder_hidden, cfg.learning_rate,
                              rng=rng)
    return None


def transfer_mode(cfg: ExperimentConfig) -> str:
    if cfg.agent == "sf":
        return "transfer" if cfg.copy_init else "scratch"
    if cfg.agent == "dqn-fixfeature":
        return FIX_FEATURE
    return FINETUNE


def default_output_dir(cfg: ExperimentConfig, label: str | None = None) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    label = label or f"{cfg.agent}-{'-'.join(Path(m).stem for m in cfg.maps)}"
    return root / f"{label}-seed{cfg.seed}"


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the experiment a config describes and write its artifacts into ``out_dir``:
    ``config.txt`` (fully resolved), ``metrics.csv``, ``matrix.csv``,
    ``model.ckpt`` (learning agents only) and ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    mazes = cfg.load_maps()
    sensor = cfg.sensor()
    ckpt = out / "model.ckpt"
    env0 = MazeEnv(mazes[0], sensor, cfg.history)
    model = build_model(cfg, env0.state_dim)
    rows: list[MetricsRow] = []
    matrix: list[MatrixRow] = []

    if cfg.agent in ("sf", "dqn", "dqn-finetune", "dqn-fixfeature"):
        mode = transfer_mode(cfg)
        # later tasks of a transfer start from a trained policy and explore less
        later = cfg.schedule(epsilon_start=cfg.transfer_epsilon_start) if mode != "scratch" else cfg.schedule()
        tasks = [(m, cfg.schedule() if k == 0 else later) for k, m in enumerate(mazes)]
        res = run_transfer_sequence(tasks, model, mode, cfg.seed, sensor=sensor,
                                    history=cfg.history, slip_prob=cfg.slip_prob,
                                    max_steps=cfg.max_steps, checkpoint_path=ckpt,
                                    record_wall_clock=cfg.record_wall_clock)
        rows, matrix = res.metrics, res.matrix
        model_to_checkpoint(model, cfg.history, cfg.rays).save(ckpt)
    elif cfg.agent == "imitation":
        if len(mazes) != 1:
            raise ConfigError("the imitation agent trains on exactly one map")
        data = build_imitation_dataset(env0, cfg.imitation_samples, [cfg.seed, 3])
        rows, curve, reached = train_imitation(model, data, mazes[0], cfg.schedule(), [cfg.seed, 2],
                                               eval_seed=eval_seed(cfg.seed, 0), sensor=sensor,
                                               history=cfg.history, max_steps=cfg.max_steps)
        ev = evaluate(model_policy(model), mazes[0], cfg.eval_episodes, cfg.max_steps,
                      eval_seed(cfg.seed, 0), sensor, cfg.history)
        matrix = [MatrixRow.from_eval(mazes[0].name, mazes[0].name, ev)]
        with open(out / "accuracy.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("update", "heldout_accuracy"))
            w.writerows((u, repr(a)) for u, a in curve)
        model_to_checkpoint(model, cfg.history, cfg.rays).save(ckpt)
    else:
        for k, maze in enumerate(mazes):
            policy = oracle_policy(maze) if cfg.agent == "astar" else random_policy([cfg.seed, 4, k])
            ev = evaluate(policy, maze, cfg.eval_episodes, cfg.max_steps, eval_seed(cfg.seed, k),
                          sensor, cfg.history)
            rows.append(MetricsRow(0, k, ev.mean_reward, ev.std_reward, ev.success_ratio,
                                   ev.mean_steps))
            matrix.append(MatrixRow.from_eval(maze.name, maze.name, ev))

    write_metrics(rows, out / "metrics.csv")
    write_matrix(matrix, out / "matrix.csv")
    summary = _summary(cfg, mazes, rows, matrix)
    (out / "summary.txt").write_text(summary)
    return {"metrics": rows, "matrix": matrix, "model": model, "summary": summary}


def _summary(cfg, mazes, rows, matrix) -> str:
    lines = [f"agent {cfg.agent}, maps {', '.join(m.name for m in mazes)}, seed {cfg.seed}"]
    for k, maze in enumerate(mazes):
        conv = steps_to_success(rows, k)
        lines.append(f"task {k} ({maze.name}): steps to 0.9 success: "
                     f"{conv if conv is not None else 'not reached'}")
    lines.append("")
    lines.append(f"{'pretrain':<16} {'eval':<8} {'success':>8} {'reward':>16} {'steps':>18}")
    for r in matrix:
        lines.append(f"{r.pretrain_task:<16} {r.eval_task:<8} {r.success_num:>5}/{r.success_den:<2} "
                     f"{r.mean_reward:>7.3f} +- {r.std_reward:<5.3f} {r.mean_steps:>8.3f} +- {r.std_steps:<6.3f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- commands

def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    cfg = parse_config(args.config, overrides, args.preset)
    out = Path(cfg.output_dir) if cfg.output_dir else default_output_dir(cfg, args.preset)
    t0 = time.perf_counter()
    result = run_experiment(cfg, out)
    print(result["summary"], end="")
    print(f"artifacts in {out} ({time.perf_counter() - t0:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    sensor = SensorConfig(args.rays or 16, args.fov, args.max_range)
    maze = resolve_map(args.map)
    if args.agent in ("astar", "random"):
        history = args.history or 4
        policy = oracle_policy(maze) if args.agent == "astar" else random_policy([args.seed, 4])
        label = args.agent
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required unless --agent is astar or random")
        ck = Checkpoint.load(args.checkpoint)
        history, rays = ck.meta["history"], ck.meta["rays"]
        for flag, want, have in (("--rays", args.rays, rays), ("--history", args.history, history)):
            if want is not None and want != have:
                raise CheckpointError(f"{flag} {want} does not match the checkpoint ({have})")
        sensor = SensorConfig(rays, args.fov, args.max_range)
        model = model_from_checkpoint(ck)
        if model.state_dim != history * sensor.frame_dim:
            raise CheckpointError(f"checkpoint expects {model.state_dim} inputs, "
                                  f"the sensor produces {history * sensor.frame_dim}")
        task = args.task
        if task is not None and model.kind != "sf":
            raise UsageError("--task applies to SF checkpoints only")
        policy = model_policy(model, task)
        label = Path(args.checkpoint).stem
    ev = evaluate(policy, maze, args.episodes, args.max_steps, args.seed, sensor, history)
    row = MatrixRow.from_eval(label, maze.name, ev)
    print(f"{label} on {maze.name}: success {ev.successes}/{ev.episodes}, "
          f"reward {ev.mean_reward:.3f} +- {ev.std_reward:.3f}, steps {ev.mean_steps:.3f} +- {ev.std_steps:.3f}")
    if args.out:
        write_matrix([row], args.out)
    return 0


def _parse_run(spec: str):
    """``path`` or ``path@task_id``."""
    path, _, task = spec.partition("@")
    return path, (int(task) if task else None)


def cmd_compare(args) -> int:
    runs = []
    for spec in args.csv:
        path, task = _parse_run(spec)
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise UsageError(f"{path}: header {header} is not a metrics file header")
        rows = read_metrics(path)
        if task is None and rows:
            task = max(int(r["task_id"]) for r in rows)  # the last task of a sequence
        rows = [r for r in rows if int(r["task_id"]) == task]
        runs.append((Path(path).parent.name or Path(path).stem, rows, task))
    labels = args.labels.split(",") if args.labels else [r[0] for r in runs]
    if len(labels) != len(runs):
        raise UsageError("--labels needs one label per input")

    steps = sorted({int(r["step"]) for _, rows, _ in runs for r in rows})
    fields = ("success_ratio", "mean_reward", "std_reward")
    header = ["step"] + [f"{lab}:{f}" for lab in labels for f in fields]
    table = []
    for s in steps:
        line = [str(s)]
        for _, rows, _ in runs:
            hit = next((r for r in rows if int(r["step"]) == s), None)
            line += [hit[f] if hit else "" for f in fields]
        table.append(line)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(table)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(table)

    print("\nsteps to 0.9 success (two consecutive evaluations):")
    base = None
    for i, (lab, (_, rows, task)) in enumerate(zip(labels, runs)):
        conv = steps_to_success(rows)
        if i == 0:
            base = conv
        ratio = ""
        if i > 0 and conv is not None and base:
            ratio = f"  ratio to {labels[0]}: {conv / base:.3f}"
        print(f"  {lab} (task {task}): {conv if conv is not None else 'not reached'}{ratio}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.instances, args.tol, args.seed)
    for r in results:
        print(f"{r.name:<24} instances {r.instances:>3}  max rel err {r.max_rel_err:.2e}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 2


def cmd_oracle(args) -> int:
    maze = resolve_map(args.map)
    starts = maze.start_poses()
    lengths = np.array([optimal_steps(maze, p) for p in starts])
    print(maze.to_text(), end="")
    print(f"{maze.name}: {maze.width}x{maze.height}, {len(starts)} start poses")
    print(f"optimal steps over all starts: mean {lengths.mean():.3f}, min {lengths.min()}, "
          f"max {lengths.max()}; expected return {np.mean(1 - 0.04 * (lengths - 1)):.4f}")
    ev = evaluate(oracle_policy(maze), maze, args.episodes, args.max_steps, args.seed)
    print(f"planner on {args.episodes} random starts: success {ev.successes}/{ev.episodes}, "
          f"reward {ev.mean_reward:.3f} +- {ev.std_reward:.3f}, steps {ev.mean_steps:.3f} +- {ev.std_steps:.3f}")
    if args.out:
        write_matrix([MatrixRow.from_eval("astar", maze.name, ev)], args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfrl", description="Successor-feature maze navigation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at each evaluation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run a training experiment")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or the planner) on a map")
    e.add_argument("--checkpoint")
    e.add_argument("--agent", choices=("model", "astar", "random"), default="model")
    e.add_argument("--map", required=True)
    e.add_argument("--task", type=int, help="task head of an SF checkpoint (default: current)")
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--max-steps", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--rays", type=int)
    e.add_argument("--history", type=int)
    e.add_argument("--fov", type=float, default=180.0)
    e.add_argument("--max-range", type=float, default=10.0)
    e.add_argument("--out", help="write the result as a one-row matrix CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="merge learning curves and summarise convergence")
    c.add_argument("csv", nargs="+", help="metrics.csv, optionally suffixed @task_id")
    c.add_argument("--labels", help="comma-separated run labels")
    c.add_argument("--out", help="merged CSV path (default: stdout)")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("oracle", help="planner statistics for a map")
    o.add_argument("--map", required=True)
    o.add_argument("--episodes", type=int, default=50)
    o.add_argument("--max-steps", type=int, default=200)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, MapError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingHalted as e:
        print(f"halted: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
