import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghpmdp.envs import (
    CartpoleParams,
    PointRobotParams,
    cartpole,
    cartpole_step,
    early_termination,
    make_task_split,
    manifest_text,
    parse_manifest,
    pointrobot,
    pointrobot_step,
    read_manifest,
    sample_task,
    write_manifest,
)
from ghpmdp.envs.tasks import TOY_TASKS, TaskDescriptor, pointrobot_task


def rot90(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


class TestCartpole:
    def test_hanging_equilibrium(self):
        s = cartpole.observe(0.0, 0.0, np.pi, 0.0)
        params = CartpoleParams(pole_length=0.7)
        cur = s
        for _ in range(50):
            cur, _, done = cartpole_step(cur, np.zeros(1), params)
            assert not done
        np.testing.assert_allclose(cur, s, atol=1e-12)

    @pytest.mark.parametrize("length", [0.5, 0.7])
    def test_energy_conserved(self, length):
        x, xd, th, thd = 0.0, 0.3, 0.4, -1.0
        e0 = cartpole.mechanical_energy(xd, th, thd, length)
        obs = cartpole.observe(x, xd, th, thd)
        params = CartpoleParams(pole_length=length)
        energies = []
        for _ in range(200):
            obs, _, _ = cartpole_step(obs, np.zeros(1), params)
            _, xd, th, thd = cartpole.split_obs(obs)
            energies.append(cartpole.mechanical_energy(xd, th, thd, length))
        assert np.max(np.abs(np.array(energies) - e0)) < 0.01 * e0

    def test_reward_zero_only_at_goal(self):
        params = CartpoleParams(pole_length=0.5, goal_x=0.8)
        # tip x = x + l sin(theta); theta = pi/2 puts it at x + 0.5
        at_goal = cartpole.observe(0.3, 0.0, np.pi / 2, 0.0)
        assert cartpole.reward_from_obs(at_goal, params) == pytest.approx(0.0, abs=1e-24)
        for x in (-1.0, 0.0, 0.29, 0.31, 2.0):
            assert cartpole.reward_from_obs(cartpole.observe(x, 0.0, np.pi / 2, 0.0), params) < 0
        off = cartpole.observe(0.0, 0.0, np.pi / 2, 0.0)
        assert cartpole.reward_from_obs(off, params) == pytest.approx(-(0.3**2))

    def test_action_scale_and_clip(self):
        s = cartpole.observe(0.0, 0.0, np.pi, 0.0)
        weak, _, _ = cartpole_step(s, np.array([1.0]), CartpoleParams(action_scale=0.5))
        strong, _, _ = cartpole_step(s, np.array([0.5]), CartpoleParams(action_scale=1.0))
        np.testing.assert_allclose(weak, strong, atol=1e-15)
        clipped, _, _ = cartpole_step(s, np.array([5.0]), CartpoleParams())
        one, _, _ = cartpole_step(s, np.array([1.0]), CartpoleParams())
        assert clipped.tobytes() == one.tobytes()

    def test_never_terminates(self):
        rng = np.random.default_rng(0)
        states = rng.normal(size=(100, 5)) * 100
        assert not early_termination("cartpole", states).any()

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            CartpoleParams(pole_length=0.0)
        with pytest.raises(ValueError):
            CartpoleParams(action_scale=-1.0)

    def test_graph_matches_numpy(self):
        rng = np.random.default_rng(1)
        obs = np.stack([cartpole.observe(*rng.normal(size=4)) for _ in range(6)])
        acts = rng.uniform(-1, 1, (6, 1))
        out = cartpole.predict_graph(obs, acts, 0.8, 0.7).value
        ref, _, _ = cartpole_step(obs, acts, CartpoleParams(action_scale=0.8, pole_length=0.7))
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestPointRobot:
    def test_crippled_thruster_ignored(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=4)
        for leg in range(4):
            a = np.zeros(4)
            a[leg] = 0.9
            params = PointRobotParams(crippled_actuator=leg, goal_direction=3)
            moved, _, _ = pointrobot_step(s, a, params)
            still, _, _ = pointrobot_step(s, np.zeros(4), params)
            assert moved.tobytes() == still.tobytes()

    def test_reward_along_goal(self):
        for d in range(8):
            g = pointrobot.goal_vector(d)
            # choose a state whose next velocity is exactly g (zero action, undo drag)
            v0 = g / (1.0 - pointrobot.DT * pointrobot.DRAG / pointrobot.MASS)
            nxt, r, _ = pointrobot_step(np.r_[0.0, 0.0, v0], np.zeros(4), PointRobotParams(goal_direction=d))
            np.testing.assert_allclose(nxt[2:], g, atol=1e-12)
            assert r == pytest.approx(1.0)
            perp = rot90(g) / (1.0 - pointrobot.DT * pointrobot.DRAG / pointrobot.MASS)
            _, r, _ = pointrobot_step(np.r_[0.0, 0.0, perp], np.zeros(4), PointRobotParams(goal_direction=d))
            assert r == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-5, 5), min_size=4, max_size=4),
        st.lists(st.floats(-1, 1), min_size=4, max_size=4),
        st.integers(0, 7),
        st.sampled_from([None, 0, 1, 2, 3]),
    )
    def test_rotation_equivariance(self, state, action, direction, leg):
        s, a = np.array(state), np.array(action)
        nxt, r, done = pointrobot_step(s, a, PointRobotParams(leg, direction))
        s_rot = np.r_[rot90(s[:2]), rot90(s[2:])]
        a_rot = np.roll(a, 1)  # thruster k now points where k+1 did
        leg_rot = None if leg is None else (leg + 1) % 4
        nxt_r, r_r, done_r = pointrobot_step(s_rot, a_rot, PointRobotParams(leg_rot, (direction + 2) % 8))
        np.testing.assert_allclose(nxt_r, np.r_[rot90(nxt[:2]), rot90(nxt[2:])], atol=1e-12)
        assert r_r == pytest.approx(r, abs=1e-12)
        assert done_r == done

    def test_termination_agrees_with_env(self):
        rng = np.random.default_rng(3)
        states = np.c_[rng.uniform(-12, 12, (10_000, 2)), rng.normal(size=(10_000, 2))]
        acts = rng.uniform(-1, 1, (10_000, 4))
        nxt, _, done = pointrobot_step(states, acts, PointRobotParams(1, 2))
        np.testing.assert_array_equal(done, early_termination("pointrobot", nxt))
        assert done.any() and (~done).any()
        # scalar env path agrees too
        env = TaskDescriptor("pointrobot", "t", {"crippled_actuator": 1, "goal_direction": 2}).make_env()
        for i in range(0, 10_000, 500):
            env.reset()
            env.state = states[i].copy()
            _, _, d = env.step(acts[i])
            assert d == bool(done[i])

    def test_observation_layout_task_independent(self):
        obs = {pointrobot_task(l, d).make_env().reset().tobytes() for l in range(4) for d in range(8)}
        assert len(obs) == 1
        cp = {TaskDescriptor("cartpole", f"c{i}", dict(h)).make_env().reset().tobytes() for i, h in enumerate(TOY_TASKS)}
        assert len(cp) == 1

    def test_env_truncation(self):
        env = pointrobot_task(0, 0).make_env()
        env.reset()
        for _ in range(pointrobot.EPISODE_LENGTH - 1):
            env.step(np.zeros(4))
        assert not env.truncated
        env.step(np.zeros(4))
        assert env.truncated

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            PointRobotParams(crippled_actuator=4)
        with pytest.raises(ValueError):
            PointRobotParams(goal_direction=8)


class TestSplits:
    @pytest.mark.parametrize("seed", range(10))
    def test_counts_coverage_disjoint(self, seed):
        split = make_task_split("pointrobot", np.random.default_rng(seed))
        train, weak, strong = ({(t.hidden["crippled_actuator"], t.hidden["goal_direction"]) for t in split[k]}
                               for k in ("train", "weak", "strong"))
        assert (len(train), len(weak), len(strong)) == (12, 5, 4)
        assert not (train & weak or train & strong or weak & strong)
        assert {l for l, _ in train} == {0, 1, 2, 3}
        assert {d for _, d in train} == {0, 2, 3, 4, 5, 6, 7}
        assert all(d != 1 for _, d in weak)
        assert strong == {(l, 1) for l in range(4)}
        assert all(t.split == k for k in split for t in split[k])

    def test_holdout_configurable(self):
        split = make_task_split("pointrobot", np.random.default_rng(0), holdout_direction=6)
        assert {t.hidden["goal_direction"] for t in split["strong"]} == {6}
        assert all(t.hidden["goal_direction"] != 6 for t in split["train"] + split["weak"])

    def test_deterministic(self):
        a = make_task_split("pointrobot", np.random.default_rng(7))
        b = make_task_split("pointrobot", np.random.default_rng(7))
        assert a == b
        assert manifest_text("pointrobot", 7, a) == manifest_text("pointrobot", 7, b)

    def test_toy_tasks(self):
        split = make_task_split("cartpole", np.random.default_rng(0))
        assert sorted(t.hidden["pole_length"] for t in split["train"]) == [0.5, 0.7]
        assert split["weak"] == [] and split["strong"] == []

    def test_sample_task(self):
        rng = np.random.default_rng(1)
        split = make_task_split("pointrobot", rng)
        seen = set()
        for _ in range(12):
            t = sample_task("pointrobot", "train", rng, split, exclude=seen)
            assert t in split["train"] and t.task_id not in seen
            seen.add(t.task_id)
        with pytest.raises(LookupError):
            sample_task("pointrobot", "train", rng, split, exclude=seen)
        with pytest.raises(ValueError):
            sample_task("cartpole", "weak", rng)
        strong = sample_task("pointrobot", "strong", rng, split)
        assert strong.hidden["goal_direction"] not in {t.hidden["goal_direction"] for t in split["train"]}

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            make_task_split("ant", np.random.default_rng(0))
        with pytest.raises(ValueError):
            early_termination("ant", np.zeros((1, 4)))


class TestManifest:
    def test_round_trip(self, tmp_path):
        split = make_task_split("pointrobot", np.random.default_rng(3))
        path = tmp_path / "manifest.txt"
        write_manifest(path, "pointrobot", 3, split)
        family, seed, tasks = read_manifest(path)
        assert (family, seed) == ("pointrobot", 3)
        assert tasks == split
        assert manifest_text(family, seed, tasks) == path.read_text()

    def test_cartpole_round_trip(self):
        split = make_task_split("cartpole", np.random.default_rng(0))
        assert parse_manifest(manifest_text("cartpole", 0, split))[2] == split

    def test_version_mismatch(self):
        text = manifest_text("pointrobot", 0, make_task_split("pointrobot", np.random.default_rng(0)))
        with pytest.raises(ValueError, match="version"):
            parse_manifest(text.replace("version 1", "version 2"))

    def test_garbage(self):
        with pytest.raises(ValueError):
            parse_manifest("version 1\nfamily pointrobot\nbogus line\n")
        with pytest.raises(ValueError):
            parse_manifest("# empty\n")
