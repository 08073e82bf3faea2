import numpy as np
import pytest

from apsnav import metrics as mx
from apsnav import navigator as nv
from apsnav import nncore as nn
from apsnav import world as wd


@pytest.fixture(scope="module")
def nav(small_world):
    return nv.new_navigator(nv.PANORAMIC, 1)


class TestEncodeInstruction:
    def test_single_token(self, nav):
        instr = wd.Instruction((wd.EOS,), "oracle")
        ctx = nv.encode_instruction(nav, instr)
        assert ctx.dims[0] == 1

    def test_deterministic(self, nav):
        instr = wd.Instruction((4, 5, 6, wd.EOS), "oracle")
        a = nv.encode_instruction(nav, instr)
        b = nv.encode_instruction(nav, instr)
        assert np.array_equal(a.data, b.data)

    def test_permuted_tokens_change_context(self, nav):
        a = nv.encode_instruction(nav, wd.Instruction((4, 5, 6, wd.EOS), "oracle"))
        b = nv.encode_instruction(nav, wd.Instruction((6, 5, 4, wd.EOS), "oracle"))
        assert np.max(np.abs(a.data - b.data)) > 1e-6


class TestDecodeStep:
    def test_distribution_covers_degree_plus_one(self, nav, small_world):
        g = small_world
        instr = wd.Instruction((4, wd.EOS), "oracle")
        ctx = nv.encode_instruction(nav, instr)
        for node in range(0, g.num_nodes, 5):
            probs, _ = nv.decode_step(nav, g, node, nv.init_state(nav), ctx)
            assert probs.dims == (g.degree(node) + 1,)
            assert abs(probs.data.sum() - 1.0) <= 1e-9

    def test_no_collapse_at_init(self, small_world):
        g = small_world
        node = next(n for n in range(g.num_nodes) if g.degree(n) == 3)
        instr = wd.Instruction((4, 5, wd.EOS), "oracle")
        for seed in range(100):
            m = nv.new_navigator(nv.PANORAMIC, seed)
            probs, _ = nv.decode_step(m, g, node, nv.init_state(m),
                                      nv.encode_instruction(m, instr))
            assert np.all(probs.data >= 0.05)
            assert np.all(probs.data <= 0.6)

    def test_deterministic_without_dropout(self, nav, small_world):
        instr = wd.Instruction((7, 8, wd.EOS), "oracle")
        ctx = nv.encode_instruction(nav, instr)
        p1, _ = nv.decode_step(nav, small_world, 0, nv.init_state(nav), ctx)
        p2, _ = nv.decode_step(nav, small_world, 0, nv.init_state(nav), ctx)
        assert np.array_equal(p1.data, p2.data)


class TestRollout:
    def test_greedy_deterministic(self, nav, small_world, small_episodes):
        pair = small_episodes[0]
        t1 = nv.rollout(nav, small_world, pair.path.start, pair.path.end,
                        pair.instruction, nv.GREEDY, 10)
        t2 = nv.rollout(nav, small_world, pair.path.start, pair.path.end,
                        pair.instruction, nv.GREEDY, 10)
        assert t1.nodes == t2.nodes and t1.actions == t2.actions

    def test_step_cap_one(self, nav, small_world, small_episodes):
        pair = small_episodes[0]
        traj = nv.rollout(nav, small_world, pair.path.start, pair.path.end,
                          pair.instruction, nv.GREEDY, 1)
        assert len(traj.actions) <= 1

    def test_step_cap_must_be_positive(self, nav, small_world, small_episodes):
        pair = small_episodes[0]
        with pytest.raises(ValueError):
            nv.rollout(nav, small_world, pair.path.start, pair.path.end,
                       pair.instruction, nv.GREEDY, 0)

    def test_student_forcing_supervises_stop_at_goal(self, nav, small_world):
        g = small_world
        goal = g.adj[0][0]
        instr = wd.Instruction((wd.TOKEN_ID["stop"], wd.EOS), "oracle")
        rng = np.random.default_rng(0)
        traj = nv.rollout(nav, g, 0, goal, instr, nv.STUDENT_FORCING, 10, rng)
        for node, loss in zip(traj.nodes, traj.step_losses):
            if node == goal:
                # the teacher for this step is the stop action
                assert loss.item() >= 0.0
        assert all(np.isfinite(l.item()) and l.item() >= 0.0
                   for l in traj.step_losses)

    def test_losses_finite_nonnegative(self, nav, small_world, small_episodes):
        rng = np.random.default_rng(5)
        for pair in small_episodes[:5]:
            traj = nv.rollout(nav, small_world, pair.path.start, pair.path.end,
                              pair.instruction, nv.STUDENT_FORCING, 10, rng,
                              train=True)
            loss = nn.mean_scalars(traj.step_losses)
            assert np.isfinite(loss.item()) and loss.item() >= 0.0

    def test_trajectory_replay_consistent(self, nav, small_world, small_episodes):
        pair = small_episodes[1]
        traj = nv.rollout(nav, small_world, pair.path.start, pair.path.end,
                          pair.instruction, nv.GREEDY, 10)
        node = traj.nodes[0]
        replay = [node]
        for a in traj.actions:
            if a == small_world.degree(node):
                break
            node = wd.step(small_world, node, a)
            replay.append(node)
        assert tuple(replay) == traj.nodes


class TestLearnability:
    def test_overfit_smoke_panoramic(self, small_world, small_episodes, overfit_nav):
        rec = mx.evaluate(overfit_nav, small_episodes,
                          {small_world.env_id: small_world})
        assert rec.sr == 1.0

    def test_overfit_trajectory_reaches_goal(self, small_world, small_episodes,
                                             overfit_nav):
        for pair in small_episodes:
            traj = nv.rollout(overfit_nav, small_world, pair.path.start,
                              pair.path.end, pair.instruction, nv.GREEDY, 10)
            assert small_world.euclid(traj.nodes[-1], pair.path.end) <= 3.0

    def test_flavors_share_rollout_contract(self, small_world, small_episodes):
        pair = small_episodes[0]
        for flavor in nv.FLAVORS:
            m = nv.new_navigator(flavor, 2)
            traj = nv.rollout(m, small_world, pair.path.start, pair.path.end,
                              pair.instruction, nv.GREEDY, 10)
            assert traj.terminated_by in ("stop", "step-cap")
            rng = np.random.default_rng(1)
            traj = nv.rollout(m, small_world, pair.path.start, pair.path.end,
                              pair.instruction, nv.STUDENT_FORCING, 10, rng)
            assert traj.step_losses


class TestCheckpointRoundtrip:
    def test_save_load_bit_identical(self, tmp_path, small_world, small_episodes):
        nav = nv.new_navigator(nv.VISUOMOTOR, 7)
        path = tmp_path / "nav.ckpt"
        nv.save_navigator(path, nav)
        nav2, _ = nv.load_navigator(path)
        assert nav2.flavor == nv.VISUOMOTOR
        assert nav2.params.equal_bits(nav.params)
        pair = small_episodes[0]
        t1 = nv.rollout(nav, small_world, pair.path.start, pair.path.end,
                        pair.instruction, nv.GREEDY, 10)
        t2 = nv.rollout(nav2, small_world, pair.path.start, pair.path.end,
                        pair.instruction, nv.GREEDY, 10)
        assert t1.nodes == t2.nodes
