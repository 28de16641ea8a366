"""
The maze world and its planner
==============================

Load a bundled map, look at what the agent senses, and score the A* planner.
The planner's return obeys a closed form: every step costs 0.04 except the
final one, which pays +1.
"""
import numpy as np

from sfrl.maze import Action, MazeEnv, Pose, builtin_map, observe, shortest_path
from sfrl.training import evaluate, oracle_policy

maze = builtin_map("map1")
print(maze.to_text())

# 16 rays over a half circle, distances scaled by a range of 10 cells
pose = Pose(1, 1, 1)  # top-left corner, facing east
obs = observe(maze, pose)
print("ray distances:", np.round(obs.rays, 2))
print("goal visible on rays:", np.flatnonzero(obs.goal_mask))

# the agent sees the last four readings stacked, oldest first
env = MazeEnv(maze, rng=0)
state, start = env.reset()
print("start", start, "state size", state.shape)

plan = shortest_path(maze, start)
print("plan:", [Action(a).name for a in plan])

ev = evaluate(oracle_policy(maze), maze, n_episodes=50, max_steps=200, rng=0)
print(f"planner: {ev.successes}/{ev.episodes}, reward {ev.mean_reward:.3f} +- {ev.std_reward:.3f}, "
      f"steps {ev.mean_steps:.2f}")
print("1 - 0.04 * (steps - 1) =", round(1 - 0.04 * (ev.mean_steps - 1), 6))
