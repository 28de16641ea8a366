"""
Do the features know where the agent is?
========================================

Fit a small regressor from frozen features to the true pose, once for a
trained encoder and once for an untrained one. Run 04 first or pass a
checkpoint path; without one a short training run is done here.
"""
import sys

from sfrl.analysis import collect_trajectories, regress_pose
from sfrl.checkpoint import Checkpoint, model_from_checkpoint
from sfrl.maze import MazeEnv, builtin_map
from sfrl.sf_agent import SFModel
from sfrl.training import TrainSchedule, run_training

env = MazeEnv(builtin_map("map1"), rng=0)
if len(sys.argv) > 1:
    trained = model_from_checkpoint(Checkpoint.load(sys.argv[1]))
else:
    trained = SFModel(env.state_dim, sf_steps=2, rng=0)
    run_training(trained, env, TrainSchedule(total_steps=40_000), 1)
untrained = SFModel(env.state_dim, rng=0)

states, poses = collect_trajectories(env, 3000, rng=5)
for name, model in (("trained", trained), ("untrained", untrained)):
    fit = regress_pose(model.encode, states, poses, rng=7)
    print(f"{name:<10} position error {fit.mean_position_error:.2f} cells "
          f"(predicting the mean: {fit.chance_position_error:.2f}), heading accuracy {fit.heading_accuracy:.2f}")
