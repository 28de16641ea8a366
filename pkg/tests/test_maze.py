from collections import deque

import numpy as np
import pytest

from sfrl.maze import (
    FREE, GOAL, WALL, Action, MapError, MazeEnv, Pose, SensorConfig, builtin_map, load_map,
    load_map_file, observe, optimal_action, optimal_steps, reset, shortest_path, step,
)

SMALL = "#####\n#...#\n#.#.#\n#..G#\n#####\n"


# --------------------------------------------------------------------------- helpers / oracles

def move(maze, pose, a):
    """Independent transition rule for the planner oracle (no rewards)."""
    if a == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading - 1) % 4)
    if a == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading + 1) % 4)
    dx, dy = [(0, -1), (1, 0), (0, 1), (-1, 0)][pose.heading]
    if maze.cells[pose.y + dy, pose.x + dx] == WALL:
        return pose
    return Pose(pose.x + dx, pose.y + dy, pose.heading)


def bfs_distances(maze):
    """Distance-to-goal for every pose by BFS over the forward graph from every pose."""
    poses = [Pose(x, y, h) for y in range(maze.height) for x in range(maze.width)
             if maze.cells[y, x] != WALL for h in range(4)]
    preds = {p: [] for p in poses}
    for p in poses:
        if maze.cells[p.y, p.x] == GOAL:
            continue
        for a in (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT):
            preds[move(maze, p, a)].append(p)
    dist = {p: 0 for p in poses if maze.cells[p.y, p.x] == GOAL}
    q = deque(dist)
    while q:
        p = q.popleft()
        for pr in preds[p]:
            if pr not in dist:
                dist[pr] = dist[p] + 1
                q.append(pr)
    return dist


def random_map(rng, size=9, density=0.3):
    while True:
        cells = np.full((size, size), WALL, np.int8)
        inner = rng.random((size - 2, size - 2)) >= density
        cells[1:-1, 1:-1] = np.where(inner, FREE, WALL)
        free = np.argwhere(cells == FREE)
        if len(free) < 4:
            continue
        gy, gx = free[rng.integers(len(free))]
        cells[gy, gx] = GOAL
        # wall off whatever the goal cannot reach so the map is valid
        seen = np.zeros_like(cells, bool)
        seen[gy, gx] = True
        stack = [(gy, gx)]
        while stack:
            y, x = stack.pop()
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if cells[y + dy, x + dx] == FREE and not seen[y + dy, x + dx]:
                    seen[y + dy, x + dx] = True
                    stack.append((y + dy, x + dx))
        cells[(cells == FREE) & ~seen] = WALL
        if (cells == FREE).sum() >= 3:
            text = "\n".join("".join("#.G"[[WALL, FREE, GOAL].index(c)] for c in row) for row in cells)
            return load_map(text)


# --------------------------------------------------------------------------- load_map

class TestLoadMap:
    def test_goal_only_map_rejected(self):
        with pytest.raises(MapError, match="unreachable"):
            load_map("###\n#G#\n###")

    def test_valid_small_map(self):
        m = load_map(SMALL)
        assert (m.width, m.height) == (5, 5)
        assert m.goal == (3, 3)
        assert len(m.free_cells()) == 7

    def test_walled_off_region(self):
        with pytest.raises(MapError, match="unreachable"):
            load_map("######\n#.#..#\n###.G#\n######")

    def test_ragged_rows(self):
        with pytest.raises(MapError, match="ragged"):
            load_map("#####\n#..G#\n####")

    @pytest.mark.parametrize("text", ["#####\n#...#\n#####", "#####\n#G.G#\n#####"])
    def test_goal_count(self, text):
        with pytest.raises(MapError, match="exactly one goal"):
            load_map(text)

    def test_open_border(self):
        with pytest.raises(MapError, match="open border"):
            load_map("#####\n#..G.\n#####")

    def test_unknown_character(self):
        with pytest.raises(MapError, match="unknown"):
            load_map("#####\n#.xG#\n#####")

    def test_trailing_newline_optional(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text(SMALL.rstrip("\n"))
        assert load_map_file(p).to_text() == SMALL

    @pytest.mark.parametrize("name", ["map1", "map2", "map3", "map4"])
    def test_builtin_maps_valid(self, name):
        m = builtin_map(name)
        assert 9 <= m.width <= 13 and 9 <= m.height <= 13
        assert load_map(m.to_text()).to_text() == m.to_text()

    def test_map2_adds_walls_to_map1(self):
        a, b = builtin_map("map1").cells, builtin_map("map2").cells
        assert a.shape == b.shape
        assert np.all(b[a == WALL] == WALL) and (b == WALL).sum() > (a == WALL).sum()
        assert builtin_map("map1").goal == builtin_map("map2").goal

    def test_map4_moves_goal_and_obstacles(self):
        a, b = builtin_map("map3"), builtin_map("map4")
        assert a.goal != b.goal
        assert np.any((a.cells == WALL) != (b.cells == WALL))


# --------------------------------------------------------------------------- reset / step

class TestReset:
    def test_deterministic(self):
        m = load_map(SMALL)
        assert reset(m, 5) == reset(m, 5)
        e1, e2 = MazeEnv(m, rng=3), MazeEnv(m, rng=3)
        s1, p1 = e1.reset()
        s2, p2 = e2.reset()
        assert p1 == p2 and np.array_equal(s1, s2)

    def test_uniform_within_5_sigma(self):
        m = load_map("#####\n#..G#\n#####")
        rng = np.random.default_rng(0)
        n = 10_000
        counts = {}
        for _ in range(n):
            p = reset(m, rng)
            counts[p] = counts.get(p, 0) + 1
        assert len(counts) == 8
        mu, sd = n / 8, np.sqrt(n * (1 / 8) * (7 / 8))
        assert all(abs(c - mu) <= 5 * sd for c in counts.values())

    def test_never_on_goal(self):
        m = builtin_map("map1")
        rng = np.random.default_rng(1)
        assert all(m[p.x, p.y] == FREE for p in (reset(m, rng) for _ in range(2000)))

    def test_initial_state_replicates_frame(self):
        env = MazeEnv(builtin_map("map1"), rng=0)
        s, pose = env.reset()
        d = env.sensor.frame_dim
        assert s.shape == (4 * d,)
        for i in range(4):
            assert np.array_equal(s[i * d:(i + 1) * d], env.frame(pose))


class TestStep:
    m = load_map(SMALL)

    def test_stand(self):
        p = Pose(1, 1, 1)
        assert step(self.m, p, Action.STAND) == (p, -0.04, False, False)

    def test_turns(self):
        p = Pose(1, 1, 0)
        assert step(self.m, p, Action.TURN_LEFT)[:2] == (Pose(1, 1, 3), -0.04)
        assert step(self.m, p, Action.TURN_RIGHT)[:2] == (Pose(1, 1, 1), -0.04)

    def test_forward_free(self):
        assert step(self.m, Pose(1, 1, 1), Action.FORWARD) == (Pose(2, 1, 1), -0.04, False, False)

    def test_forward_into_wall(self):
        pose, r, term, coll = step(self.m, Pose(1, 1, 0), Action.FORWARD)
        assert pose == Pose(1, 1, 0) and coll and not term
        assert r == pytest.approx(-1.0, abs=1e-12)

    def test_forward_into_goal(self):
        assert step(self.m, Pose(2, 3, 1), Action.FORWARD) == (Pose(3, 3, 1), 1.0, True, False)

    def test_turn_left_four_times(self):
        p, total = Pose(1, 1, 2), 0.0
        for _ in range(4):
            p, r, _, _ = step(self.m, p, Action.TURN_LEFT)
            total += r
        assert p == Pose(1, 1, 2)
        assert total == pytest.approx(-0.16, abs=1e-12)

    def test_slip_degrades_to_stand(self):
        p = Pose(1, 1, 1)
        rng = np.random.default_rng(0)
        outs = [step(self.m, p, Action.FORWARD, 1.0, rng)[0] for _ in range(20)]
        assert all(o == p for o in outs)

    def test_never_enters_wall(self):
        m = builtin_map("map2")
        rng = np.random.default_rng(0)
        p = reset(m, rng)
        for _ in range(5000):
            p, _, term, _ = step(m, p, int(rng.integers(4)), 0.1, rng)
            assert m[p.x, p.y] != WALL
            if term:
                p = reset(m, rng)

    @pytest.mark.parametrize("mean_steps,reported", [(5.640, 0.814), (10.120, 0.635)])
    def test_return_identity_reproduces_reported_rows(self, mean_steps, reported):
        assert round(1 - 0.04 * (mean_steps - 1), 3) == reported

    def test_optimal_episode_return(self):
        m = builtin_map("map1")
        for start in m.start_poses()[::7]:
            p, ret, n = start, 0.0, 0
            for a in shortest_path(m, start):
                p, r, term, coll = step(m, p, a)
                ret += r
                n += 1
                assert not coll
            assert term
            assert ret == pytest.approx(1 - 0.04 * (n - 1), abs=1e-12)

    def test_env_truncates(self):
        env = MazeEnv(load_map(SMALL), max_steps=3, rng=0)
        env.reset(Pose(1, 1, 0))
        results = [env.step(Action.STAND) for _ in range(3)]
        assert [r.truncated for r in results] == [False, False, True]
        assert not any(r.terminal for r in results)

    def test_frame_stack_shifts(self):
        env = MazeEnv(load_map(SMALL), rng=0)
        s0, _ = env.reset(Pose(1, 1, 0))
        res = env.step(Action.TURN_RIGHT)
        d = env.sensor.frame_dim
        assert np.array_equal(res.state[:-d], s0[d:])
        assert np.array_equal(res.state[-d:], env.frame(Pose(1, 1, 1)))

    def test_deterministic_without_slip(self):
        def run(seed):
            env = MazeEnv(builtin_map("map1"), rng=seed)
            env.reset()
            rng = np.random.default_rng(seed)
            return [env.step(int(rng.integers(4))).state.tobytes() for _ in range(300)]
        assert run(4) == run(4)


# --------------------------------------------------------------------------- observe

class TestObserve:
    def test_adjacent_wall_centre_ray(self):
        # the centre ray leaves the cell centre and meets the wall face half a cell away
        m = load_map(SMALL)
        obs = observe(m, Pose(1, 1, 0), rays=3, fov=90, max_range=10)
        assert obs.rays[1] == pytest.approx(0.5 / 10)

    def test_wall_one_free_cell_away(self):
        m = load_map("#####\n#...#\n#...#\n#..G#\n#####")
        obs = observe(m, Pose(1, 3, 0), rays=3, fov=90, max_range=10)
        assert obs.rays[1] == pytest.approx(2.5 / 10)

    def test_range_clamped(self):
        m = load_map("#" * 15 + "\n#" + "." * 12 + "G#\n" + "#" * 15)
        obs = observe(m, Pose(1, 1, 1), rays=3, fov=10, max_range=4)
        assert obs.rays[1] == 1.0
        assert obs.goal_mask[1] == 0.0  # goal beyond range

    def test_goal_ahead(self):
        m = load_map(SMALL)
        obs = observe(m, Pose(1, 3, 1), rays=3, fov=90)
        assert obs.goal_mask[1] == 1.0
        assert obs.goal_mask[0] == 0.0  # left ray points into the wall above

    def test_goal_behind_wall_not_seen(self):
        m = load_map("#######\n#.....#\n#.###.#\n#..#.G#\n#######")
        obs = observe(m, Pose(1, 3, 1), rays=3, fov=20)
        assert obs.goal_mask[1] == 0.0

    def test_four_fold_symmetry(self):
        text = "#######\n#.....#\n#.#.#.#\n#..G..#\n#.#.#.#\n#.....#\n#######"
        m = load_map(text)
        c = 3
        for x, y in m.free_cells():
            for h in range(4):
                rx, ry = c - (y - c), c + (x - c)  # quarter turn clockwise about the goal
                a = observe(m, Pose(x, y, h))
                b = observe(m, Pose(rx, ry, (h + 1) % 4))
                np.testing.assert_allclose(a.rays, b.rays, atol=1e-12)
                np.testing.assert_array_equal(a.goal_mask, b.goal_mask)

    def test_pure_and_bounded(self):
        m = builtin_map("map3")
        for p in m.start_poses()[::5]:
            a, b = observe(m, p), observe(m, p)
            assert np.array_equal(a.flat(), b.flat())
            assert np.all((a.rays >= 0) & (a.rays <= 1))
            assert set(np.unique(a.goal_mask)) <= {0.0, 1.0}

    def test_frame_dim(self):
        assert SensorConfig().frame_dim == 32
        assert MazeEnv(builtin_map("map1")).state_dim == 128


# --------------------------------------------------------------------------- planner

class TestPlanner:
    def test_facing_goal(self):
        m = load_map(SMALL)
        assert shortest_path(m, Pose(2, 3, 1)) == [Action.FORWARD]
        assert optimal_action(m, Pose(2, 3, 1)) == Action.FORWARD

    def test_adjacent_facing_away(self):
        m = load_map(SMALL)
        plan = shortest_path(m, Pose(2, 3, 3))
        assert len(plan) == 3 and plan[-1] == Action.FORWARD

    def test_goal_behind_turns_left(self):
        m = load_map("#######\n#.....#\n#.#G#.#\n#.#.#.#\n#.....#\n#######")
        # one cell below the goal facing south, corridor dead-ends at the goal
        assert optimal_action(m, Pose(3, 3, 2)) == Action.TURN_LEFT

    def test_a_star_matches_bfs_on_random_maps(self):
        rng = np.random.default_rng(2024)
        for _ in range(20):
            m = random_map(rng)
            dist = bfs_distances(m)
            for p in m.start_poses():
                assert len(shortest_path(m, p)) == dist[p]

    def test_tie_break_matches_ordered_bfs(self):
        rng = np.random.default_rng(7)
        order = (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)
        for _ in range(5):
            m = random_map(rng)
            dist = bfs_distances(m)
            for p in m.start_poses():
                expected = next(a for a in order if dist.get(move(m, p, a), -1) == dist[p] - 1)
                assert optimal_action(m, p) == expected

    def test_transposition_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            m = random_map(rng)
            t = m.transposed()
            for p in m.start_poses():
                assert len(shortest_path(m, p)) == len(shortest_path(t, Pose(p.y, p.x, 3 - p.heading)))

    def test_closed_loop_rollout(self):
        m = load_map("#######\n#...#.#\n#.#...#\n#.#.#.#\n#...#G#\n#.#...#\n#######")
        dist = bfs_distances(m)
        for start in m.start_poses():
            p, n, term = start, 0, False
            while not term:
                p, _, term, _ = step(m, p, optimal_action(m, p))
                n += 1
                assert n <= dist[start]
            assert n == dist[start] == optimal_steps(m, start)
