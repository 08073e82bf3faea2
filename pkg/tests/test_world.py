import math

import numpy as np
import pytest

from apsnav import world as w


def brute_force_shortest(g, a, b):
    """Exhaustive simple-path enumeration; min by (length, node sequence)."""
    best = None
    stack = [(a, (a,), 0.0)]
    while stack:
        node, path, length = stack.pop()
        if best is not None and length > best[0]:
            continue
        if node == b:
            cand = (length, path)
            if best is None or cand < best:
                best = cand
            continue
        for v in g.adj[node]:
            if v not in path:
                stack.append((v, path + (v,), length + g.edge_length(node, v)))
    return best


def line_graph(landmarks, spacing=2.0):
    """Nodes along +x at the given spacing; landmarks = [(color, noun), ...]."""
    n = len(landmarks)
    pos = np.array([[i * spacing, 0.0] for i in range(n)])
    edges = [(i, i + 1) for i in range(n - 1)]
    colors = [c for c, _ in landmarks]
    nouns = [m for _, m in landmarks]
    return w.NavGraph.from_arrays("test-line", 0, w.TRAIN_SEEN, pos, edges,
                                  colors, nouns)


class TestGeneration:
    def test_deterministic(self):
        g1 = w.generate_world(1, 8, w.TRAIN_SEEN)
        g2 = w.generate_world(1, 8, w.TRAIN_SEEN)
        assert np.array_equal(g1.positions, g2.positions)
        assert g1.adj == g2.adj
        assert np.array_equal(g1.features, g2.features)

    def test_seeds_differ(self):
        g1 = w.generate_world(1, 16, w.TRAIN_SEEN)
        g2 = w.generate_world(2, 16, w.TRAIN_SEEN)
        assert set(g1.edges()) != set(g2.edges())

    def test_connected_and_invariants(self):
        for seed in range(1, 21):
            g = w.generate_world(seed, 8 + seed % 8, w.TRAIN_SEEN)
            # BFS reaches every node
            seen = {0}
            frontier = [0]
            while frontier:
                u = frontier.pop()
                for v in g.adj[u]:
                    if v not in seen:
                        seen.add(v)
                        frontier.append(v)
            assert len(seen) == g.num_nodes
            for u, v in g.edges():
                assert w.EDGE_MIN <= g.edge_length(u, v) <= w.EDGE_MAX
            assert max(g.degree(u) for u in range(g.num_nodes)) <= w.M_PATCHES

    def test_node_count_floor(self):
        with pytest.raises(ValueError):
            w.generate_world(1, 7, w.TRAIN_SEEN)


class TestStep:
    def test_two_node_transition(self):
        g = line_graph([(0, 0), (1, 1)])
        assert w.step(g, 0, 0) == 1

    def test_step_reverse_returns(self):
        g = w.generate_world(3, 12, w.TRAIN_SEEN)
        for u in range(g.num_nodes):
            for a, v in enumerate(g.adj[u]):
                back = g.adj[v].index(u)
                assert w.step(g, v, back) == u

    def test_replay_recorded_path(self):
        g = w.generate_world(1, 24, w.TRAIN_SEEN)
        rng = np.random.default_rng(0)
        pairs = w.valid_episode_endpoints(g, 4, 4)
        a, b = pairs[int(rng.integers(len(pairs)))]
        p = w.shortest_path(g, a, b)
        node = p.start
        for act in p.actions:
            node = w.step(g, node, act)
        assert node == p.end

    def test_bad_action_rejected(self):
        g = line_graph([(0, 0), (1, 1)])
        with pytest.raises(ValueError):
            w.step(g, 0, 5)


class TestFeatures:
    def test_color_one_hot(self):
        g = line_graph([(3, 5), (1, 2)])
        f = w.features(g, 0)
        assert np.array_equal(f[0, 0:8], np.eye(8)[3])
        assert np.array_equal(f[0, 8:16], np.eye(8)[5])

    def test_patch_zero_heading_encoding(self):
        g = line_graph([(0, 0), (1, 1)])
        f = w.features(g, 0)
        assert np.allclose(f[0, 16:20], [0.0, 1.0, 0.0, 1.0])

    def test_repeat_query_bit_identical(self):
        g1 = w.generate_world(4, 10, w.VAL_UNSEEN)
        g2 = w.generate_world(4, 10, w.VAL_UNSEEN)
        assert np.array_equal(w.features(g1, 3), w.features(g2, 3))

    def test_invalid_node(self):
        g = line_graph([(0, 0), (1, 1)])
        with pytest.raises(ValueError):
            w.features(g, 9)


class TestShortestPath:
    def test_adjacent_single_edge(self):
        g = line_graph([(0, 0)] * 3)
        p = w.shortest_path(g, 0, 1)
        assert p.nodes == (0, 1)

    def test_matches_brute_force_small_worlds(self):
        for seed in range(1, 21):
            g = w.generate_world(seed, 8 + seed % 3, w.TRAIN_SEEN)
            rng = np.random.default_rng(seed)
            for _ in range(5):
                a, b = rng.choice(g.num_nodes, size=2, replace=False)
                got = w.shortest_path(g, int(a), int(b))
                length, nodes = brute_force_shortest(g, int(a), int(b))
                assert got.nodes == nodes
                assert abs(got.length - length) < 1e-9

    def test_triangle_direct_edge_wins(self):
        # two 2.0 m legs vs a direct 3.9 m edge
        y = math.sqrt(4.0 - 1.95 ** 2)
        pos = np.array([[0.0, 0.0], [3.9, 0.0], [1.95, y]])
        g = w.NavGraph.from_arrays("tri", 0, w.TRAIN_SEEN, pos,
                                   [(0, 1), (0, 2), (1, 2)], [0] * 3, [0] * 3)
        p = w.shortest_path(g, 0, 1)
        assert p.nodes == (0, 1)
        assert abs(p.length - 3.9) < 1e-12

    def test_same_endpoints_rejected(self):
        g = line_graph([(0, 0), (1, 1)])
        with pytest.raises(ValueError):
            w.shortest_path(g, 1, 1)


class TestShortestPathTransform:
    def test_idempotent_on_shortest(self):
        g = w.generate_world(1, 16, w.TRAIN_SEEN)
        p = w.shortest_path(g, 0, g.num_nodes - 1)
        assert w.shortest_path_transform(g, p).nodes == p.nodes

    def test_back_and_forth_collapses(self):
        g = line_graph([(0, 0)] * 4)
        p = w.Path.from_nodes(g, [0, 1, 0, 1])
        t = w.shortest_path_transform(g, p)
        assert t.nodes == (0, 1)

    def test_random_walks_never_lengthen(self):
        g = w.generate_world(1, 24, w.TRAIN_SEEN)
        rng = np.random.default_rng(7)
        for _ in range(50):
            nodes = [int(rng.integers(g.num_nodes))]
            for _ in range(6):
                nodes.append(g.adj[nodes[-1]][int(rng.integers(g.degree(nodes[-1])))])
            p = w.Path.from_nodes(g, nodes)
            if p.start == p.end:
                continue
            t = w.shortest_path_transform(g, p)
            assert (t.start, t.end) == (p.start, p.end)
            assert t.length <= p.length + 1e-12

    def test_unseen_split_rejected(self):
        g = w.generate_world(41, 12, w.VAL_UNSEEN)
        p = w.shortest_path(g, 0, g.adj[0][0])
        with pytest.raises(w.PolicyViolationError):
            w.shortest_path_transform(g, p)

    def test_degenerate_cycle_rejected(self):
        g = line_graph([(0, 0)] * 3)
        p = w.Path.from_nodes(g, [0, 1, 0])
        with pytest.raises(w.DegeneratePathError):
            w.shortest_path_transform(g, p)


class TestOracleInstruction:
    def test_straight_path_to_red_door(self):
        g = line_graph([(7, 7), (5, 5), (0, 0)])  # end node: red door
        p = w.Path.from_nodes(g, [0, 1, 2])
        instr = w.oracle_instruction(g, p)
        assert instr.words() == ["forward", "forward", "to", "the", "red",
                                 "door", "stop", "<eos>"]
        assert instr.provenance == "oracle"

    def test_single_left_turn_to_blue_table(self):
        pos = np.array([[0.0, 0.0], [0.0, 2.0]])
        g = w.NavGraph.from_arrays("t", 0, w.TRAIN_SEEN, pos, [(0, 1)],
                                   [0, 2], [0, 1])  # node 1: blue table
        p = w.Path.from_nodes(g, [0, 1])
        instr = w.oracle_instruction(g, p)
        assert instr.words() == ["left", "to", "the", "blue", "table",
                                 "stop", "<eos>"]

    def test_right_turn(self):
        pos = np.array([[0.0, 0.0], [0.0, -2.0]])
        g = w.NavGraph.from_arrays("t", 0, w.TRAIN_SEEN, pos, [(0, 1)],
                                   [1, 3], [2, 4])
        p = w.Path.from_nodes(g, [0, 1])
        assert w.oracle_instruction(g, p).words()[0] == "right"

    def test_deterministic(self):
        g = w.generate_world(2, 16, w.TRAIN_SEEN)
        p = w.shortest_path(g, 0, g.num_nodes - 1)
        assert w.oracle_instruction(g, p) == w.oracle_instruction(g, p)

    def test_length_cap_holds_on_long_walks(self):
        g = w.generate_world(2, 24, w.TRAIN_SEEN)
        rng = np.random.default_rng(1)
        nodes = [0]
        for _ in range(10):
            nodes.append(g.adj[nodes[-1]][int(rng.integers(g.degree(nodes[-1])))])
        instr = w.oracle_instruction(g, w.Path.from_nodes(g, nodes))
        assert len(instr.tokens) <= w.MAX_INSTRUCTION_LEN


class TestTeacherAction:
    def test_stop_at_goal(self):
        g = line_graph([(0, 0)] * 3)
        assert w.teacher_action(g, 1, 1) == g.degree(1)

    def test_adjacent_gives_connecting_edge(self):
        g = line_graph([(0, 0)] * 3)
        a = w.teacher_action(g, 0, 1)
        assert g.adj[0][a] == 1

    def test_matches_brute_force_next_hop(self):
        for seed in range(1, 11):
            g = w.generate_world(seed, 9, w.TRAIN_SEEN)
            for node in range(g.num_nodes):
                for goal in range(g.num_nodes):
                    if node == goal:
                        continue
                    a = w.teacher_action(g, node, goal)
                    _, nodes = brute_force_shortest(g, node, goal)
                    assert g.adj[node][a] == nodes[1]

    def test_following_teacher_reaches_goal(self):
        g = w.generate_world(5, 20, w.TRAIN_SEEN)
        for node in range(g.num_nodes):
            goal = (node * 7 + 3) % g.num_nodes
            cur, steps = node, 0
            while cur != goal:
                cur = w.step(g, cur, w.teacher_action(g, cur, goal))
                steps += 1
                assert steps <= g.num_nodes
            assert w.teacher_action(g, cur, goal) == g.degree(cur)


class TestEpisodesAndIO:
    def test_endpoint_filter(self):
        g = w.generate_world(1, 24, w.TRAIN_SEEN)
        for a, b in w.valid_episode_endpoints(g)[:50]:
            assert g.euclid(a, b) > w.SUCCESS_RADIUS
            assert 4 <= w.shortest_path(g, a, b).hops <= 6

    def test_world_file_roundtrip(self, tmp_path):
        g = w.generate_world(9, 14, w.TEST_UNSEEN)
        f = tmp_path / "w.world"
        w.write_world(g, f)
        g2 = w.read_world(f)
        assert g2.env_id == g.env_id and g2.split == g.split
        assert np.array_equal(g2.positions, g.positions)
        assert g2.adj == g.adj
        assert np.array_equal(g2.features, g.features)

    def test_pairs_file_roundtrip(self, tmp_path):
        g = w.generate_world(1, 24, w.TRAIN_SEEN)
        rng = np.random.default_rng(0)
        paths = w.sample_dataset_paths(g, 5, rng)
        pairs = w.make_episodes(g, paths, instructions_per_path=2)
        f = tmp_path / "pairs.jsonl"
        w.write_pairs(pairs, f)
        back = w.read_pairs(f, {g.env_id: g})
        assert back == pairs

    def test_instruction_invariants(self):
        with pytest.raises(ValueError):
            w.Instruction((4, 5), "oracle")  # missing <eos>
        with pytest.raises(ValueError):
            w.Instruction((99, w.EOS), "oracle")
