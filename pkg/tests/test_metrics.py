import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apsnav import metrics as mx
from apsnav import navigator as nv
from apsnav import world as wd


def traj(nodes, terminated="stop"):
    return nv.Trajectory(tuple(nodes), tuple([0] * (len(nodes) - 1)) + (0,),
                         None, terminated)


class TestEpisodeMetrics:
    def test_perfect_episode(self, small_world, small_episodes):
        pair = small_episodes[0]
        t = traj(pair.path.nodes)
        ne, osr, sr, spl = mx.episode_metrics(small_world, t, pair.path.end,
                                              pair.path.length)
        assert ne == 0.0 and sr == 1 and osr == 1 and spl == 1.0

    def test_spl_half_when_traveled_doubles(self):
        # straight 10 m corridor walked with a 5 m detour pattern
        pos = np.array([[0.0, 0.0], [2.5, 0.0], [5.0, 0.0]])
        g = wd.NavGraph.from_arrays("c", 0, wd.TRAIN_SEEN, pos,
                                    [(0, 1), (1, 2)], [0] * 3, [0] * 3)
        t = traj([0, 1, 0, 1, 2])  # traveled 10, shortest 5
        ne, osr, sr, spl = mx.episode_metrics(g, t, 2, 5.0)
        assert sr == 1
        assert abs(spl - 0.5) <= 1e-12

    def test_near_miss_gives_osr_not_sr(self):
        pos = np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 0.0], [4.0, 2.0],
                        [4.0, 4.0], [6.0, 4.0]])
        edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]
        g = wd.NavGraph.from_arrays("m", 0, wd.TRAIN_SEEN, pos, edges,
                                    [0] * 6, [0] * 6)
        # goal node 2; agent passes within 2 m (node 3) then stops 5+ m away
        t = traj([3, 4, 5])
        ne, osr, sr, spl = mx.episode_metrics(g, t, 2, 4.0)
        assert osr == 1 and sr == 0 and spl == 0.0
        assert ne > 3.0

    def test_empty_trajectory_rejected(self, small_world):
        t = nv.Trajectory((), (), None, "stop")
        with pytest.raises(ValueError):
            mx.episode_metrics(small_world, t, 0, 1.0)

    def test_nonpositive_shortest_rejected(self, small_world):
        with pytest.raises(ValueError):
            mx.episode_metrics(small_world, traj([0]), 0, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 8))
    def test_ordering_invariants_random_walks(self, seed, length):
        g = wd.generate_world(2, 24, wd.TRAIN_SEEN)
        rng = np.random.default_rng(seed)
        nodes = [int(rng.integers(g.num_nodes))]
        for _ in range(length):
            nodes.append(g.adj[nodes[-1]][int(rng.integers(g.degree(nodes[-1])))])
        goal = int(rng.integers(g.num_nodes))
        shortest = max(g.euclid(nodes[0], goal), 1.5)
        ne, osr, sr, spl = mx.episode_metrics(g, traj(nodes), goal, shortest)
        assert 0.0 <= spl <= sr <= osr <= 1
        assert ne >= 0.0


class TestEvaluate:
    def test_oracle_policy_perfect(self, small_world, small_episodes):
        rec = mx.evaluate_oracle(small_episodes,
                                 {small_world.env_id: small_world})
        assert rec.sr == 1.0 and rec.spl == 1.0 and rec.ne == 0.0
        assert rec.osr == 1.0

    def test_never_move_policy_scores_zero(self, small_world, small_episodes):
        rows = []
        for pair in small_episodes:
            t = nv.Trajectory((pair.path.start,), (0,), None, "stop")
            rows.append(mx.episode_metrics(small_world, t, pair.path.end,
                                           pair.path.length))
        assert all(sr == 0 for _, _, sr, _ in rows)

    def test_aggregate_equals_mean_of_episodes(self, small_world,
                                               small_episodes, overfit_nav):
        wmap = {small_world.env_id: small_world}
        rec = mx.evaluate(overfit_nav, small_episodes, wmap)
        rows = []
        for pair in small_episodes:
            t = nv.rollout(overfit_nav, small_world, pair.path.start,
                           pair.path.end, pair.instruction, nv.GREEDY, 10)
            rows.append(mx.episode_metrics(small_world, t, pair.path.end,
                                           pair.path.length))
        arr = np.array(rows)
        assert abs(rec.ne - arr[:, 0].mean()) <= 1e-12
        assert abs(rec.osr - arr[:, 1].mean()) <= 1e-12
        assert abs(rec.sr - arr[:, 2].mean()) <= 1e-12
        assert abs(rec.spl - arr[:, 3].mean()) <= 1e-12

    def test_deterministic(self, small_world, small_episodes, overfit_nav):
        wmap = {small_world.env_id: small_world}
        r1 = mx.evaluate(overfit_nav, small_episodes, wmap)
        r2 = mx.evaluate(overfit_nav, small_episodes, wmap)
        assert r1 == r2

    def test_trace_export(self, small_world, small_episodes, overfit_nav):
        traces = []
        mx.evaluate(overfit_nav, small_episodes[:3],
                    {small_world.env_id: small_world}, traces=traces)
        assert len(traces) == 3
        assert all("nodes" in t and t["env"] == small_world.env_id
                   for t in traces)

    def test_empty_rejected(self, overfit_nav):
        with pytest.raises(ValueError):
            mx.evaluate(overfit_nav, [], {})


class TestCrossEvaluate:
    def test_matrix_shape_and_memorized_diagonal(self, small_world,
                                                 small_episodes, overfit_nav):
        wmap = {small_world.env_id: small_world}
        other = nv.new_navigator(nv.PANORAMIC, 99)
        nav_ids, ds_names, sr = mx.cross_evaluate(
            [("overfit", overfit_nav), ("fresh", other)],
            [("own", small_episodes), ("own2", small_episodes[:5])], wmap)
        assert sr.shape == (2, 2)
        assert nav_ids == ["overfit", "fresh"]
        assert sr[0, 0] == 1.0  # memorized set
