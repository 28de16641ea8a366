"""
Successor features on a tiny chain
==================================

With one-hot features the successor features of the greedy policy are rows of
(I - gamma P)^-1, and dotting them with the reward weights gives Q. We train
the successor head with the same TD loss the maze agent uses and compare.
"""
import numpy as np

from sfrl.sf_agent import Batch, SFModel

n, gamma = 6, 0.9
T = np.array([[max(s - 1, 0), min(s + 1, n - 1)] for s in range(n)])  # left, right
R = np.zeros(n)
R[-1] = 1.0

Q = np.zeros((n, 2))
for _ in range(1000):
    Q = R[:, None] + gamma * Q[T].max(-1)
pi = Q.argmax(1)
P = np.eye(n)[T[np.arange(n), pi]]
M = np.linalg.inv(np.eye(n) - gamma * P)

model = SFModel(n, 2, phi_dim=n, encoder_hidden=(), psi_hidden=32, gamma=gamma, lr=1e-2, rng=0,
                dtype=np.float64)
model.encoder.layers[0].weights[...] = np.eye(n)  # phi(s) = one-hot(s)
model.encoder.layers[0].bias[...] = 0
model.tasks[0].omega[...] = R

states = np.repeat(np.eye(n), 2, 0)
batch = Batch(states, np.tile([0, 1], n), np.zeros(2 * n), np.eye(n)[T.ravel()], np.zeros(2 * n, bool))
iters = 20_000
for it in range(iters):
    for st in model.optimizer.states.values():
        st.learning_rate = 1e-2 * 1e-3 ** (it / iters)
    model.optimizer.step(model.sf_td_loss(batch)[1])
    if (it + 1) % 100 == 0:
        model.sync_targets()

psi = model.successor_forward(0, np.eye(n))
print("max |psi - (I - gamma P)^-1|:", np.abs(psi[np.arange(n), pi] - M).max())
print("max |psi . omega - Q|:", np.abs(psi @ R - Q).max())
