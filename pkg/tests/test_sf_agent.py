import numpy as np
import pytest
from scipy import stats

from sfrl.gradcheck import check_phi, check_sf_td
from sfrl.nn import DimensionError
from sfrl.sf_agent import Batch, ConfigurationError, SFModel


def small_model(seed=0, **kw):
    kw.setdefault("phi_dim", 5)
    return SFModel(8, 4, encoder_hidden=(12, 10), decoder_hidden=(10, 12), psi_hidden=16,
                   rng=seed, dtype=np.float64, **kw)


def randomize(m, rng):
    for p in m.parameters().values():
        if p.ndim == 1:
            p[...] = rng.normal(size=p.shape) * 0.5


def rand_batch(rng, n=6, dim=8, terminal_rate=0.3):
    return Batch(rng.normal(size=(n, dim)), rng.integers(4, size=n), rng.normal(size=n),
                 rng.normal(size=(n, dim)), rng.random(n) < terminal_rate)


# --------------------------------------------------------------------------- forward

class TestForward:
    def test_encode_deterministic_and_shape(self):
        m = SFModel(128, rng=0)
        s = np.random.default_rng(1).random(128)
        assert m.encode(s).shape == (64,)
        assert np.array_equal(m.encode(s), m.encode(s.copy()))

    def test_zeroed_weights_give_bias(self):
        m = small_model()
        for layer in m.encoder.layers:
            layer.weights[...] = 0
        m.encoder.layers[-1].bias[...] = np.arange(5)
        rng = np.random.default_rng(0)
        for _ in range(3):
            np.testing.assert_array_equal(m.encode(rng.normal(size=8)), np.arange(5))

    def test_dimension_errors(self):
        m = small_model()
        with pytest.raises(DimensionError):
            m.encode(np.zeros(7))
        with pytest.raises(DimensionError):
            m.decode(np.zeros(4))

    def test_decode_shape(self):
        m = SFModel(128, rng=0)
        assert m.decode(np.zeros(64)).shape == (128,)

    def test_successor_shapes(self):
        m = small_model()
        assert m.successor_forward(0, np.zeros(5)).shape == (4, 5)
        assert m.successor_forward(0, np.zeros((3, 5))).shape == (3, 4, 5)
        with pytest.raises(IndexError):
            m.successor_forward(1, np.zeros(5))

    def test_zero_omega_gives_zero_q(self):
        m = small_model()
        assert not m.q_values(0, np.ones(8)).any()

    def test_current_task_identity(self):
        m = small_model()
        rng = np.random.default_rng(2)
        randomize(m, rng)
        s = rng.normal(size=(5, 8))
        psi = m.successor_forward(0, m.encode(s))
        np.testing.assert_array_equal(m.q_values(0, s), psi @ m.tasks[0].omega)

    def test_scaling_omega(self):
        m = small_model()
        rng = np.random.default_rng(3)
        randomize(m, rng)
        s = rng.normal(size=(20, 8))
        q = m.q_values(0, s)
        m.tasks[0].omega *= 3.0
        np.testing.assert_allclose(m.q_values(0, s), 3.0 * q, rtol=1e-12)
        assert np.array_equal(m.greedy_actions(s), np.argmax(q, 1))

    def test_output_map_form(self):
        m = small_model(multitask_sf=True)
        rng = np.random.default_rng(4)
        randomize(m, rng)
        m.add_task()
        randomize(m, rng)
        m.tasks[0].B[...] = rng.normal(size=(5, 5))
        s = rng.normal(size=(7, 8))
        phi = m.encode(s)
        psi = m.successor_forward(0, phi)
        expected = np.einsum("ij,naj->nai", m.tasks[0].B, psi) @ m.tasks[0].omega
        np.testing.assert_allclose(m.q_values(0, s), expected, rtol=1e-12, atol=1e-12)

    def test_input_map_form(self):
        m = small_model()
        rng = np.random.default_rng(5)
        randomize(m, rng)
        m.add_task()
        m.tasks[0].B[...] = rng.normal(size=(5, 5))
        s = rng.normal(size=(7, 8))
        mapped = m.encode(s) @ m.tasks[0].B.T
        expected = m.successor_forward(0, mapped) @ m.tasks[0].omega
        np.testing.assert_allclose(m.q_values(0, s), expected, rtol=1e-12, atol=1e-12)

    def test_forms_agree_with_identity_map(self):
        rng = np.random.default_rng(6)
        qs = []
        for multitask in (False, True):
            m = small_model(seed=1, multitask_sf=multitask)
            randomize(m, np.random.default_rng(0))
            m.add_task()
            qs.append(m.q_values(0, rng.normal(size=(4, 8)) * 0 + 1))
        np.testing.assert_allclose(qs[0], qs[1], rtol=1e-12)


# --------------------------------------------------------------------------- action selection

class TestSelectAction:
    def test_epsilon_one_uniform(self):
        m = small_model()
        rng = np.random.default_rng(0)
        s = np.ones(8)
        counts = np.bincount([m.select_action(0, s, 1.0, rng) for _ in range(10_000)], minlength=4)
        assert stats.chisquare(counts).pvalue > 1e-3

    def _q_model(self, q):
        m = small_model()
        head = m.tasks[0].psi.layers[-1]
        head.weights[...] = 0
        head.bias[...] = 0
        # psi[a] = q[a] * e_0 and omega = e_0, so Q = q
        head.bias.reshape(4, 5)[:, 0] = q
        m.tasks[0].omega[...] = np.eye(5)[0]
        return m

    def test_greedy_argmax(self):
        m = self._q_model([0, 1, 0, 0])
        assert m.select_action(0, np.ones(8), 0.0, np.random.default_rng(0)) == 1

    def test_greedy_ties_lowest_index(self):
        m = self._q_model([0.5, 0.5, 0.5, 0.5])
        assert m.select_action(0, np.ones(8), 0.0, np.random.default_rng(0)) == 0
        m = self._q_model([0, 2, 2, 1])
        assert m.select_action(0, np.ones(8), 0.0, np.random.default_rng(0)) == 1


# --------------------------------------------------------------------------- losses

class TestSFTDLoss:
    def test_gamma_zero_target_is_phi(self):
        m = small_model(gamma=0.0)
        rng = np.random.default_rng(0)
        randomize(m, rng)
        b = rand_batch(rng)
        loss, _ = m.sf_td_loss(b)
        pred = m.successor_forward(0, m.encode(b.states))[np.arange(6), b.actions]
        assert loss == pytest.approx(np.mean((pred - m.encode(b.states)) ** 2), rel=1e-12)

    def test_terminal_target_ignores_successor_head(self):
        # a terminal next state contributes its own features but no bootstrap
        m = small_model(gamma=0.7)
        rng = np.random.default_rng(1)
        randomize(m, rng)
        b = rand_batch(rng, terminal_rate=1.1)
        loss_a, _ = m.sf_td_loss(b)
        m.target_heads[0].layers[-1].bias[...] += 100.0
        loss_b, _ = m.sf_td_loss(b)
        assert loss_a == loss_b
        phi_s, phi_sp = m.encode(b.states), m.encode(b.next_states)
        pred = m.successor_forward(0, phi_s)[np.arange(6), b.actions]
        assert loss_a == pytest.approx(np.mean((pred - phi_s - 0.7 * phi_sp) ** 2), rel=1e-12)

    def test_bootstrap_uses_target_head_and_live_argmax(self):
        m = small_model(gamma=0.5)
        rng = np.random.default_rng(2)
        randomize(m, rng)
        b = rand_batch(rng, terminal_rate=0.0)
        m.target_heads[0].layers[-1].bias[...] += rng.normal(size=20)
        phi_s, phi_sp = m.encode(b.states), m.encode(b.next_states)
        a_star = np.argmax(m.successor_forward(0, phi_sp) @ m.tasks[0].omega, 1)
        boot = m.successor_forward(0, phi_sp, target=True)[np.arange(6), a_star]
        pred = m.successor_forward(0, phi_s)[np.arange(6), b.actions]
        loss, _ = m.sf_td_loss(b)
        assert loss == pytest.approx(np.mean((pred - phi_s - 0.5 * boot) ** 2), rel=1e-12)

    def test_gradients_only_for_current_head(self):
        m = small_model()
        m.add_task()
        _, grads = m.sf_td_loss(rand_batch(np.random.default_rng(0)))
        assert grads and all(k.startswith("task1.psi.") for k in grads)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck(self, seed):
        assert check_sf_td(np.random.default_rng(seed)).max_rel_err <= 1e-3
        assert check_sf_td(np.random.default_rng(seed), multitask=True).max_rel_err <= 1e-3


class TestPhiLoss:
    def test_single_task_has_two_terms(self):
        m = small_model()
        rng = np.random.default_rng(0)
        randomize(m, rng)
        s, r = rng.normal(size=(6, 8)), rng.normal(size=6)
        loss, terms, grads = m.phi_loss(s, r)
        assert set(terms) == {"reward", "reconstruction"}
        assert loss == pytest.approx(terms["reward"] + terms["reconstruction"])
        phi = m.encode(s)
        assert terms["reward"] == pytest.approx(np.mean((r - phi @ m.tasks[0].omega) ** 2))
        assert terms["reconstruction"] == pytest.approx(np.mean((s - m.decode(phi)) ** 2))
        assert not any(k.endswith(".B") for k in grads)

    def test_missing_snapshot_raises(self):
        m = small_model()
        m.add_task()
        with pytest.raises(ConfigurationError):
            m.phi_loss(np.zeros((2, 8)), np.zeros(2), {})

    def test_gradients_skip_frozen_encoder(self):
        m = small_model()
        m.add_task()
        rng = np.random.default_rng(0)
        _, _, grads = m.phi_loss(rng.normal(size=(4, 8)), rng.normal(size=4), {0: rng.normal(size=(4, 8))})
        assert "task0.B" in grads and "task1.omega" in grads
        assert not any("frozen" in k or "psi" in k for k in grads)

    def test_self_transfer_map_stays_identity(self):
        m = small_model()
        m.add_task()
        rng = np.random.default_rng(1)
        retained = {0: rng.normal(size=(16, 8))}
        _, terms, _ = m.phi_loss(rng.normal(size=(16, 8)), np.zeros(16), retained)
        assert terms["map0"] == 0.0
        before = m.encoder.copy()
        for _ in range(20):
            _, _, g = m.phi_loss(retained[0], np.zeros(16), retained)
            m.optimizer.step({k: v for k, v in g.items() if not k.startswith("encoder")})
        np.testing.assert_allclose(m.tasks[0].B, np.eye(5), atol=1e-12)
        assert np.array_equal(m.encoder.layers[0].weights, before.layers[0].weights)

    def test_linear_reward_world_fits(self):
        rng = np.random.default_rng(2)
        m = SFModel(8, 4, phi_dim=8, encoder_hidden=(), decoder_hidden=(), lr=1e-2, rng=0,
                    dtype=np.float64)
        w = rng.normal(size=8)
        s = rng.normal(size=(64, 8))
        r = s @ w
        first = m.phi_loss(s, r)[1]["reward"]
        for _ in range(3000):
            _, _, g = m.phi_loss(s, r)
            m.optimizer.step(g)
        assert m.phi_loss(s, r)[1]["reward"] < 1e-4 * first

    def test_reconstruction_improves_on_toy_world(self):
        from sfrl.maze import MazeEnv, load_map

        env = MazeEnv(load_map("#####\n#..G#\n#####"), rng=0)
        s = np.stack([env.initial_state(p) for p in env.maze.start_poses()])
        m = SFModel(env.state_dim, rng=0, lr=1e-3)
        first = m.phi_loss(s, np.zeros(len(s)))[1]["reconstruction"]
        for _ in range(300):
            m.optimizer.step(m.phi_loss(s, np.zeros(len(s)))[2])
        assert m.phi_loss(s, np.zeros(len(s)))[1]["reconstruction"] < 0.1 * first

    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck(self, seed):
        assert check_phi(np.random.default_rng(seed), 1).max_rel_err <= 1e-3
        assert check_phi(np.random.default_rng(seed), 3).max_rel_err <= 1e-3


# --------------------------------------------------------------------------- tabular oracle

def tabular_sr_run(gamma=0.9, n=6, iters=20_000):
    """Deterministic 6-state chain, two actions, reward on the last state."""
    nA = 2
    T = np.array([[max(s - 1, 0), min(s + 1, n - 1)] for s in range(n)])
    R = np.zeros(n)
    R[-1] = 1.0
    Q = np.zeros((n, nA))
    for _ in range(2000):
        Q = R[:, None] + gamma * Q[T].max(-1)
    pi = Q.argmax(1)
    P = np.zeros((n, n))
    P[np.arange(n), T[np.arange(n), pi]] = 1
    M = np.linalg.inv(np.eye(n) - gamma * P)

    m = SFModel(n, nA, phi_dim=n, encoder_hidden=(), psi_hidden=32, gamma=gamma, lr=1e-2, rng=0,
                dtype=np.float64)
    m.encoder.layers[0].weights[...] = np.eye(n)
    m.encoder.layers[0].bias[...] = 0
    m.tasks[0].omega[...] = R
    states = np.repeat(np.eye(n), nA, 0)
    batch = Batch(states, np.tile(np.arange(nA), n), np.zeros(n * nA), np.eye(n)[T.ravel()],
                  np.zeros(n * nA, bool))
    for it in range(iters):
        lr = 1e-2 * 1e-3 ** (it / iters)
        for st in m.optimizer.states.values():
            st.learning_rate = lr
        m.optimizer.step(m.sf_td_loss(batch)[1])
        if (it + 1) % 100 == 0:
            m.sync_targets()
    psi = m.successor_forward(0, np.eye(n))
    return psi, pi, M, Q, R


def test_tabular_successor_representation():
    psi, pi, M, Q, R = tabular_sr_run()
    assert np.abs(psi[np.arange(6), pi] - M).max() <= 1e-3
    assert np.abs(psi @ R - Q).max() <= 1e-3


# --------------------------------------------------------------------------- transfer mechanics

class TestAddTask:
    def _trained(self):
        m = small_model()
        randomize(m, np.random.default_rng(0))
        return m

    @pytest.mark.parametrize("multitask", [False, True])
    def test_old_task_unchanged_at_switch(self, multitask):
        m = small_model(multitask_sf=multitask)
        randomize(m, np.random.default_rng(0))
        s = np.random.default_rng(1).normal(size=(50, 8))
        q_before = m.q_values(0, s)
        m.add_task(copy_init=False)
        np.testing.assert_array_equal(m.q_values(0, s), q_before)
        assert np.array_equal(m.greedy_actions(s, 0), np.argmax(q_before, 1))

    def test_copy_init_copies_head_and_weights(self):
        m = self._trained()
        s = np.random.default_rng(1).normal(size=(10, 8))
        q = m.q_values(0, s)
        k = m.add_task(copy_init=True)
        assert k == 1 and m.current_task == 1 and len(m.tasks) == 2
        np.testing.assert_array_equal(m.q_values(1, s), q)
        assert m.tasks[1].psi.layers[0].weights is not m.tasks[0].psi.layers[0].weights

    def test_fresh_head_independent(self):
        m = self._trained()
        m.add_task(copy_init=False)
        assert not np.allclose(m.tasks[1].psi.layers[0].weights, m.tasks[0].psi.layers[0].weights)
        assert not m.tasks[1].omega.any()

    def test_snapshots_and_identity(self):
        m = self._trained()
        m.add_task()
        m.add_task()
        assert [m.task_has_snapshot(i) for i in range(3)] == [True, True, False]
        for t in m.tasks:
            np.testing.assert_array_equal(t.B, np.eye(5))
        np.testing.assert_array_equal(m.tasks[1].frozen_encoder.layers[0].weights,
                                      m.encoder.layers[0].weights)

    def test_current_map_stays_identity_through_updates(self):
        m = small_model()
        rng = np.random.default_rng(0)
        m.add_task()
        retained = {0: rng.normal(size=(32, 8))}
        for _ in range(25):
            b = rand_batch(rng, n=16)
            m.update(b, retained)
            np.testing.assert_array_equal(m.tasks[m.current_task].B, np.eye(5))
        assert not np.allclose(m.tasks[0].B, np.eye(5))
        frozen = m.tasks[0].frozen_encoder.layers[0].weights.copy()
        m.update(rand_batch(rng, n=16), retained)
        np.testing.assert_array_equal(m.tasks[0].frozen_encoder.layers[0].weights, frozen)

    def test_targets_follow_live_only_on_sync(self):
        m = small_model()
        rng = np.random.default_rng(0)
        randomize(m, rng)
        m.sync_targets()
        phi = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(m.successor_forward(0, phi), m.successor_forward(0, phi, target=True))
        for _ in range(5):
            m.update(rand_batch(rng))
        assert not np.allclose(m.successor_forward(0, phi), m.successor_forward(0, phi, target=True))
        n = m.n_syncs
        m.sync_targets()
        assert m.n_syncs == n + 1
        np.testing.assert_array_equal(m.successor_forward(0, phi), m.successor_forward(0, phi, target=True))


# --------------------------------------------------------------------------- update cadence

@pytest.mark.parametrize("sf_steps", [1, 2, 3])
def test_update_step_counts(sf_steps):
    m = small_model(sf_steps=sf_steps)
    m.update(rand_batch(np.random.default_rng(0)))
    st = m.optimizer.states
    assert st["task0.psi.L0.W"].step_count == sf_steps
    assert st["encoder.L0.W"].step_count == 1 and st["task0.omega"].step_count == 1
    assert m.n_updates == 1


def test_add_task_keeps_shared_moments():
    m = small_model()
    rng = np.random.default_rng(0)
    for _ in range(3):
        m.update(rand_batch(rng))
    enc = m.optimizer.states["encoder.L0.W"]
    m.add_task()
    assert m.optimizer.states["encoder.L0.W"] is enc and enc.step_count == 3
    assert m.optimizer.states["task1.psi.L0.W"].step_count == 0
    assert m.optimizer.states["task0.B"].step_count == 0
