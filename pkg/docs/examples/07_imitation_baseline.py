"""
Imitating the planner
=====================

Supervised learning on planner labels, with the update count mapped onto
the RL step axis so the two kinds of learner can be compared.
"""
from sfrl.baselines import ImitationModel, build_imitation_dataset
from sfrl.maze import MazeEnv, builtin_map
from sfrl.training import TrainSchedule, train_imitation

env = MazeEnv(builtin_map("map1"))
data = build_imitation_dataset(env, 20_000, rng=0)
print("labelled samples:", len(data), "distinct poses:", len(set(data.poses)))

model = ImitationModel(env.state_dim, rng=0)
schedule = TrainSchedule(total_steps=60_000)
rows, curve, reached = train_imitation(model, data, env.maze, schedule, rng=1)
print("updates to 95% held-out accuracy:", reached)
for u, acc in curve[::20]:
    print(f"update {u:>6}  held-out accuracy {acc:.3f}")
for r in rows:
    print(f"step {r.step:>6}  greedy success {r.success_ratio:.2f}")
