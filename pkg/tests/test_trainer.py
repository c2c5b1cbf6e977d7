import numpy as np
import pytest

from vnelab.embedding import EmbeddingSolution
from vnelab.netmodel import (ResourceVector, ScenarioConfig, SubstrateState,
                             generate_waxman)
from vnelab.policy import Policy, PolicyConfig
from vnelab.tensor import Adam, ParamStore, Tensor
from vnelab.trainer import (ContractViolation, CurriculumState, EmbeddingEnv,
                            PolicySet, PolicySolver, StepRecord, TrainConfig,
                            Trajectory, collect_rollouts, compute_advantages,
                            fine_tune, inner_loop_adapt, meta_update,
                            ppo_loss, ppo_update, run_episode,
                            split_by_task, split_support_query,
                            task_query_gradient, train)
from conftest import path_substrate, simple_vnr, uniform_substrate


def star_vnr(n, demand=10.0, bw=20.0):
    from vnelab.netmodel import VirtualNetworkRequest
    links = [(0, i) for i in range(1, n)]
    return VirtualNetworkRequest(
        0, [ResourceVector(demand, demand, demand)] * n, links,
        {tuple(sorted(l)): bw for l in links}, 0.0, 100.0)


def tiny_cfg(**kw):
    scenario = kw.pop("scenario", ScenarioConfig(
        count=4, arrival_rate=0.05, size_range=(2, 3),
        node_demand_range=(0, 10), link_demand_range=(0, 10)))
    base = dict(scenario=scenario, meta_iterations=1, finetune_iterations=0,
                hidden=8, gcn_layers=1, ppo_epochs=2, minibatch=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestEnv:
    def test_intermediate_placement_reward(self):
        pn = uniform_substrate(6, [(i, j) for i in range(6)
                                   for j in range(i + 1, 6)])
        env = EmbeddingEnv(SubstrateState(pn), star_vnr(4))
        reward, done = env.step(1, 0)
        assert reward == 0.25 and not done

    def test_routing_failure_restores_substrate(self):
        pn = path_substrate(3, bw=10.0)
        state = SubstrateState(pn)
        snapshot = state.copy()
        env = EmbeddingEnv(state, simple_vnr())  # link demand 20 > bw 10
        reward, done = env.step(0, 0)
        assert (reward, done) == (0.5, False)
        reward, done = env.step(1, 2)
        assert (reward, done) == (-0.5, True)
        assert state.equals(snapshot)
        assert not env.accepted

    def test_terminal_reward_is_revenue_cost_ratio(self):
        pn = path_substrate(3)
        env = EmbeddingEnv(SubstrateState(pn), simple_vnr())
        env.step(0, 0)
        reward, done = env.step(1, 1)
        # one-hop path: revenue 40, cost 40, ratio exactly 1
        assert (reward, done) == (1.0, True)
        assert env.accepted and env.partial.r2c() == 1.0

    def test_detour_lowers_terminal_reward(self):
        pn = path_substrate(3)
        env = EmbeddingEnv(SubstrateState(pn), simple_vnr())
        env.step(0, 0)
        reward, done = env.step(1, 2)  # two hops: cost 20 + 40 = 60
        assert done and abs(reward - 40.0 / 60.0) <= 1e-12

    def test_double_placement_rejected(self):
        pn = path_substrate(3)
        env = EmbeddingEnv(SubstrateState(pn), simple_vnr())
        env.step(0, 0)
        with pytest.raises(ContractViolation):
            env.step(0, 1)

    def test_step_after_done_rejected(self):
        pn = path_substrate(3)
        env = EmbeddingEnv(SubstrateState(pn), simple_vnr())
        env.step(0, 0)
        env.step(1, 1)
        with pytest.raises(ContractViolation):
            env.step(1, 2)


class TestRunEpisode:
    def _policy(self, **kw):
        return Policy(PolicyConfig(hidden=8, gcn_layers=1, **kw), seed=9)

    def test_infeasible_vnr_yields_pseudo_step(self):
        pn = path_substrate(4, cap=5.0)  # demand 10 cannot fit anywhere
        state = SubstrateState(pn)
        traj, sol = run_episode(self._policy(), state, simple_vnr(), "greedy",
                                np.random.default_rng(0))
        assert sol is None and not traj.accepted
        assert len(traj.steps) == 1
        step = traj.steps[0]
        assert not step.has_action and step.done
        assert step.reward == -0.5
        assert state.equals(SubstrateState(pn))

    def test_accepting_episode_reward_schema(self):
        pn = uniform_substrate(8, [(i, j) for i in range(8)
                                   for j in range(i + 1, 8)])
        state = SubstrateState(pn)
        vnr = star_vnr(4)
        traj, sol = run_episode(self._policy(), state, vnr, "sample",
                                np.random.default_rng(4))
        assert traj.accepted and sol is not None
        assert traj.rewards[:-1] == [0.25] * (len(traj.steps) - 1)
        assert traj.rewards[-1] == pytest.approx(sol.r2c())
        assert traj.final_r2c == pytest.approx(sol.r2c())

    def test_uni_mode_follows_fixed_ordering(self):
        from vnelab.heuristics import nrm_ordering
        pn = uniform_substrate(8, [(i, j) for i in range(8)
                                   for j in range(i + 1, 8)])
        vnr = star_vnr(3)
        policy = self._policy(action_mode="uni", uni_order="nrm")
        traj, sol = run_episode(policy, SubstrateState(pn), vnr, "greedy",
                                np.random.default_rng(0))
        assert traj.accepted
        assert [s.nv for s in traj.steps] == list(nrm_ordering(vnr))

    def test_solver_adapter_and_determinism(self):
        pn = generate_waxman(12, 20, seed=5)
        cfg = ScenarioConfig(count=6, arrival_rate=0.05, size_range=(2, 4),
                             node_demand_range=(0, 10),
                             link_demand_range=(0, 10))
        pol = self._policy()
        t1, l1 = collect_rollouts(pol, pn, cfg, seed=17)
        t2, l2 = collect_rollouts(pol, pn, cfg, seed=17)
        assert len(t1) == 6
        assert [t.accepted for t in t1] == [t.accepted for t in t2]
        assert [t.rewards for t in t1] == [t.rewards for t in t2]
        assert l1.arrived_count == 6


def _fake_traj(rewards, values, size=2):
    steps = [StepRecord(None, 0, 0, 0.0, v, r, i == len(rewards) - 1)
             for i, (r, v) in enumerate(zip(rewards, values))]
    return Trajectory(0, size, steps=steps)


class TestAdvantages:
    def test_zero_values_lambda_one_gives_discounted_returns(self):
        traj = _fake_traj([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        steps = compute_advantages([traj], gamma=0.5, gae_lambda=1.0,
                                   normalize=False)
        assert steps[0].advantage == pytest.approx(1 + 0.5 * 2 + 0.25 * 3)
        assert steps[2].advantage == pytest.approx(3.0)
        assert steps[0].ret == steps[0].advantage

    def test_single_step_is_reward_minus_value(self):
        steps = compute_advantages([_fake_traj([2.0], [0.5])],
                                   normalize=False)
        assert steps[0].advantage == pytest.approx(1.5)
        assert steps[0].ret == pytest.approx(2.0)

    def test_matches_naive_recursion(self, rng):
        gamma, lam = 0.99, 0.95
        trajs = []
        for _ in range(4):
            n = int(rng.integers(1, 6))
            trajs.append(_fake_traj(list(rng.normal(size=n)),
                                    list(rng.normal(size=n))))
        expected = []
        for t in trajs:
            r = [s.reward for s in t.steps]
            v = [s.value for s in t.steps]
            adv = [0.0] * len(r)
            for i in reversed(range(len(r))):
                nxt_v = v[i + 1] if i + 1 < len(r) else 0.0
                nxt_a = adv[i + 1] if i + 1 < len(r) else 0.0
                adv[i] = r[i] + gamma * nxt_v - v[i] + gamma * lam * nxt_a
            expected.extend(adv)
        steps = compute_advantages(trajs, gamma, lam, normalize=False)
        assert np.allclose([s.advantage for s in steps], expected)

    def test_normalization(self):
        trajs = [_fake_traj([1.0, -1.0, 2.0], [0.0, 0.0, 0.0])]
        steps = compute_advantages(trajs)
        a = np.array([s.advantage for s in steps])
        assert abs(a.mean()) <= 1e-8 and abs(a.std() - 1.0) <= 1e-6


def _collect_real_steps(seed=2, count=6):
    pn = generate_waxman(10, 16, seed=8)
    cfg = tiny_cfg(scenario=ScenarioConfig(
        count=count, arrival_rate=0.05, size_range=(2, 3),
        node_demand_range=(0, 10), link_demand_range=(0, 10)))
    policy = Policy(cfg.policy_config(), seed=seed)
    trajs, _ = collect_rollouts(policy, pn, cfg.scenario, seed=seed)
    steps = compute_advantages(trajs, cfg.gamma, cfg.gae_lambda)
    return policy, steps, cfg, trajs


class TestPPO:
    def test_first_pass_ratio_is_one(self):
        policy, steps, cfg, _ = _collect_real_steps()
        _, stats = ppo_loss(policy.params, steps, cfg)
        assert 0.999 <= stats["mean_ratio"] <= 1.001

    def test_clipping_arithmetic(self):
        policy, steps, cfg, _ = _collect_real_steps()
        step = next(s for s in steps if s.has_action)
        base_logp = step.log_prob
        other = [s for s in steps if s is not step and not s.has_action][:0]

        step.advantage = 1.0
        step.log_prob = base_logp - np.log(1.5)  # forces ratio = 1.5
        loss_a, stats = ppo_loss(policy.params, [step], cfg)
        assert stats["mean_ratio"] == pytest.approx(1.5, rel=1e-9)
        step.log_prob = base_logp - np.log(1.2)  # exactly at the clip edge
        loss_b, _ = ppo_loss(policy.params, [step], cfg)
        # surrogate is clipped at 1.2 in both cases, so losses coincide
        assert loss_a.data == pytest.approx(loss_b.data, rel=1e-9)

    def test_loss_gradcheck(self):
        policy, steps, cfg, _ = _collect_real_steps()
        params = policy.params
        steps = steps[:3]
        name = "high_w2"
        w = params[name]
        params.zero_grad()
        loss, _ = ppo_loss(params, steps, cfg)
        loss.backward()
        analytic = w.grad.copy()
        h = 1e-5
        fd = np.zeros_like(w.data)
        for i in range(w.data.shape[0]):
            orig = w.data[i, 0]
            w.data[i, 0] = orig + h
            fp = ppo_loss(params, steps, cfg)[0].data
            w.data[i, 0] = orig - h
            fm = ppo_loss(params, steps, cfg)[0].data
            w.data[i, 0] = orig
            fd[i, 0] = (fp - fm) / (2 * h)
        denom = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-8)
        assert np.abs(analytic - fd).max() / denom <= 1e-4

    def test_update_changes_params_and_stays_finite(self):
        policy, steps, cfg, _ = _collect_real_steps()
        before = {n: t.data.copy() for n, t in policy.params.items()}
        stats = ppo_update(policy.params, steps, cfg)
        assert 0.999 <= stats["first_epoch_mean_ratio"] <= 1.001
        policy.params.assert_finite()
        assert any(not np.array_equal(before[n], t.data)
                   for n, t in policy.params.items())

    def test_empty_batch_rejected(self):
        policy, _, cfg, _ = _collect_real_steps()
        with pytest.raises(ValueError):
            ppo_update(policy.params, [], cfg)


class TestMeta:
    def test_support_query_split(self):
        trajs = [_fake_traj([1.0], [0.0]) for _ in range(5)]
        support, query = split_support_query(trajs)
        assert support == trajs[::2] and query == trajs[1::2]
        s1, q1 = split_support_query(trajs[:1])
        assert s1 == q1 == trajs[:1]

    def test_zero_inner_rate_keeps_phi(self):
        policy, _, cfg, trajs = _collect_real_steps()
        cfg.alpha = 0.0
        theta, _ = inner_loop_adapt(policy.params, trajs, cfg,
                                    rng=np.random.default_rng(0))
        for n, t in policy.params.items():
            assert np.array_equal(theta[n].data, t.data)

    def test_inner_loop_leaves_phi_untouched(self):
        policy, _, cfg, trajs = _collect_real_steps()
        before = {n: t.data.copy() for n, t in policy.params.items()}
        theta, _ = inner_loop_adapt(policy.params, trajs, cfg,
                                    rng=np.random.default_rng(0))
        for n, t in policy.params.items():
            assert np.array_equal(before[n], t.data)
        assert any(not np.array_equal(theta[n].data, before[n])
                   for n in before)

    def test_meta_update_zero_gradient_noop(self):
        p = ParamStore()
        p.add("w", np.array([1.0, 2.0]))
        meta_update(p, [{"w": np.zeros(2)}], beta=0.5)
        assert np.array_equal(p["w"].data, [1.0, 2.0])
        meta_update(p, [], beta=0.5)
        assert np.array_equal(p["w"].data, [1.0, 2.0])

    def test_meta_update_closed_form(self):
        # two tasks with gradients g1, g2: w <- w - beta * (g1 + g2) / 2
        p = ParamStore()
        p.add("w", np.array([3.0]))
        meta_update(p, [{"w": np.array([2.0])}, {"w": np.array([4.0])}],
                    beta=0.1)
        assert p["w"].data[0] == pytest.approx(3.0 - 0.1 * 3.0)

    def test_query_gradient_keys(self):
        policy, _, cfg, trajs = _collect_real_steps()
        g = task_query_gradient(policy.params, trajs, cfg)
        assert set(g) == set(policy.params.names())
        assert all(np.isfinite(v).all() for v in g.values())


class TestCurriculum:
    def test_grows_below_threshold(self):
        cur = CurriculumState(n_tasks=5, threshold=2.0)
        cur.observe_entropy(1, 1.5)
        assert cur.step()
        assert cur.tasks == [1, 2]

    def test_holds_above_threshold(self):
        cur = CurriculumState(n_tasks=5, threshold=2.0)
        cur.observe_entropy(1, 3.0)
        assert not cur.step()
        assert cur.tasks == [1]

    def test_saturated_task_list_stops(self):
        cur = CurriculumState(n_tasks=2, threshold=2.0, tasks=[1, 2])
        cur.observe_entropy(2, 0.1)
        assert not cur.step()
        assert cur.tasks == [1, 2]

    def test_moving_average(self):
        cur = CurriculumState(n_tasks=3, threshold=2.0, ma_factor=0.9)
        cur.observe_entropy(1, 4.0)
        cur.observe_entropy(1, 2.0)
        assert cur.entropy_ma[1] == pytest.approx(0.9 * 4.0 + 0.1 * 2.0)


class TestTrainModes:
    def test_single_mode_one_policy(self):
        pn = generate_waxman(10, 16, seed=8)
        res = train(pn, tiny_cfg(training_mode="single"))
        assert res.policy_set.by_size == {}
        assert all(e["phase"] == "single" for e in res.log)
        assert res.policy_set.policy_for(7) is res.policy_set.meta

    def test_multi_mode_one_policy_per_size(self):
        pn = generate_waxman(10, 16, seed=8)
        res = train(pn, tiny_cfg(training_mode="multi"))
        assert sorted(res.policy_set.by_size) == [2, 3]

    def test_meta_mode_curriculum_starts_with_first_task(self):
        pn = generate_waxman(10, 16, seed=8)
        res = train(pn, tiny_cfg(training_mode="meta", meta_iterations=2,
                                 scenario=ScenarioConfig(
                                     count=8, arrival_rate=0.05,
                                     size_range=(2, 4),
                                     node_demand_range=(0, 10),
                                     link_demand_range=(0, 10))))
        meta_entries = [e for e in res.log if e["phase"] == "meta"]
        assert meta_entries
        first_it = [e for e in meta_entries if e["iteration"] == 0]
        assert all(e["tasks_active"][0] == 1 for e in first_it)
        assert first_it[0]["tasks_active"] == [1]

    def test_curriculum_off_trains_all_tasks_immediately(self):
        pn = generate_waxman(10, 16, seed=8)
        res = train(pn, tiny_cfg(training_mode="meta", curriculum=False,
                                 scenario=ScenarioConfig(
                                     count=8, arrival_rate=0.05,
                                     size_range=(2, 4),
                                     node_demand_range=(0, 10),
                                     link_demand_range=(0, 10))))
        first_it = [e for e in res.log
                    if e["phase"] == "meta" and e["iteration"] == 0]
        assert first_it and first_it[0]["tasks_active"] == [1, 2, 3]

    def test_config_contradiction_rejected(self):
        with pytest.raises(ValueError):
            tiny_cfg(training_mode="single", curriculum=True).validate()


class TestFineTune:
    def test_zero_budget_copies_meta(self):
        pn = generate_waxman(10, 16, seed=8)
        cfg = tiny_cfg()
        meta = Policy(cfg.policy_config(), seed=1)
        by_size = fine_tune(meta, pn, cfg.scenario, [2, 3], 0, cfg)
        for size, pol in by_size.items():
            for n, t in meta.params.items():
                assert np.array_equal(pol.params[n].data, t.data)

    def test_budget_adapts_each_size(self):
        pn = generate_waxman(10, 16, seed=8)
        cfg = tiny_cfg()
        meta = Policy(cfg.policy_config(), seed=1)
        log = []
        by_size = fine_tune(meta, pn, cfg.scenario, [3], 2, cfg, log=log)
        assert any(not np.array_equal(by_size[3].params[n].data, t.data)
                   for n, t in meta.params.items())
        assert [e["iteration"] for e in log] == [0, 1]
        assert all(e["size"] == 3 for e in log)

    def test_policy_set_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        ps = PolicySet(Policy(cfg.policy_config(), seed=1),
                       {2: Policy(cfg.policy_config(), seed=2)})
        ps.save(str(tmp_path / "set"))
        loaded = PolicySet.load(str(tmp_path / "set"))
        assert sorted(loaded.by_size) == [2]
        for n, t in ps.meta.params.items():
            assert np.array_equal(loaded.meta.params[n].data, t.data)
        assert loaded.policy_for(2) is loaded.by_size[2]
        assert loaded.policy_for(9) is loaded.meta


def test_split_by_task():
    trajs = [_fake_traj([1.0], [0.0], size=s) for s in (2, 4, 2, 3)]
    by = split_by_task(trajs, min_size=2)
    assert sorted(by) == [1, 2, 3]
    assert len(by[1]) == 2 and by[2] == [trajs[3]] and by[3] == [trajs[1]]
