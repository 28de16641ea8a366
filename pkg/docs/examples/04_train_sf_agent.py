"""
Training the successor-feature agent
====================================

Train from scratch on map1 and print each evaluation as it arrives. Pass a
step budget on the command line to shorten the run (default 200000).
"""
import sys

from sfrl.maze import MazeEnv, builtin_map
from sfrl.sf_agent import SFModel
from sfrl.training import TrainSchedule, run_training, steps_to_success

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
seed = 0

env = MazeEnv(builtin_map("map1"), slip_prob=0.05, rng=[seed, 1])
model = SFModel(env.state_dim, sf_steps=2, rng=[seed, 0])
schedule = TrainSchedule(total_steps=steps, stop_after_success=2)


def show(row):
    print(f"step {row.step:>7}  success {row.success_ratio:.2f}  reward {row.mean_reward:7.3f}  "
          f"loss_sf {row.loss_sf:.4f}  loss_phi {row.loss_phi:.4f}")


result = run_training(model, env, schedule, [seed, 2], on_eval=show)
print("steps to 0.9 success:", steps_to_success(result.metrics))
