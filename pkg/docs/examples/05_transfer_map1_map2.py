"""
Transfer from map1 to map2
==========================

map2 is map1 with extra interior walls. The agent learns map1, then starts
map2 from copied successor heads. Afterwards the map1 policy is evaluated
again through the learned feature map; the last table row shows it.
"""
import sys
from dataclasses import replace

from sfrl.maze import MazeEnv, builtin_map
from sfrl.sf_agent import SFModel
from sfrl.training import TrainSchedule, run_transfer_sequence, steps_to_success

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
seed = 0
schedule = TrainSchedule(total_steps=steps, stop_after_success=2)
maps = [builtin_map("map1"), builtin_map("map2")]

model = SFModel(MazeEnv(maps[0]).state_dim, sf_steps=2, rng=[seed, 0])
# map2 starts from a trained policy, so it explores less at first
tasks = [(maps[0], schedule), (maps[1], replace(schedule, epsilon_start=0.3))]
res = run_transfer_sequence(tasks, model, "transfer", seed)

for k in range(len(maps)):
    print(f"task {k}: steps to 0.9 success {steps_to_success(res.metrics, k)}")
for r in res.matrix:
    print(f"{r.pretrain_task:<10} on {r.eval_task}: {r.success_num}/{r.success_den}, "
          f"reward {r.mean_reward:.3f} +- {r.std_reward:.3f}")
