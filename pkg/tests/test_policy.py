import math

import numpy as np
import pytest

import vnelab.tensor as T
from vnelab.embedding import EmbeddingSolution, feasible_host_mask, place_node
from vnelab.netmodel import ResourceVector, SubstrateState
from vnelab.policy import (BilevelDistribution, Policy, PolicyConfig,
                           build_features, distribution_entropy, encode,
                           evaluate_value, high_level_distribution,
                           init_params, low_level_distribution, select_level)
from conftest import random_tiny_instance, simple_vnr, uniform_substrate


def ring(n, cap=100.0, bw=50.0):
    links = [(i, (i + 1) % n) for i in range(n)]
    return uniform_substrate(n, links, cap, bw)


def fresh(pn, vnr):
    return SubstrateState(pn), EmbeddingSolution(vnr)


class TestFeatures:
    def test_bandwidth_aggregates(self):
        vnr = simple_vnr(demands=[ResourceVector(10, 10, 10)] * 3,
                         links=[(0, 1), (0, 2)],
                         bw={(0, 1): 30.0, (0, 2): 10.0})
        pn = ring(4)
        state, partial = fresh(pn, vnr)
        feats = build_features(state, vnr, partial)
        # node 0 sees bandwidths {30, 10}: max 30, mean 20, sum 40, all /100
        assert np.allclose(feats.x_v[0, 3:6], [0.30, 0.20, 0.40])
        assert np.allclose(feats.x_v[1, 3:6], [0.30, 0.30, 0.30])
        assert np.allclose(feats.x_v[:, 0:3], 0.10)

    def test_flag_columns_track_partial_mapping(self):
        pn = ring(5)
        vnr = simple_vnr()
        state, partial = fresh(pn, vnr)
        feats = build_features(state, vnr, partial)
        assert not feats.x_v[:, 6].any() and not feats.x_p[:, 6].any()
        assert place_node(state, partial, 0, 3) is None
        feats = build_features(state, vnr, partial)
        assert feats.x_v[:, 6].tolist() == [1.0, 0.0]
        assert feats.x_p[:, 6].tolist() == [0, 0, 0, 1.0, 0]
        assert feats.placed_mask.tolist() == [True, False]

    def test_substrate_resources_reflect_availability(self):
        pn = ring(4)
        vnr = simple_vnr(demands=[ResourceVector(40, 10, 0)] * 2)
        state, partial = fresh(pn, vnr)
        place_node(state, partial, 0, 1)
        feats = build_features(state, vnr, partial)
        assert np.allclose(feats.x_p[1, 0:3], [0.60, 0.90, 1.00])
        assert np.allclose(feats.x_p[0, 0:3], 1.0)

    def test_isolated_virtual_node_zero_aggregates(self):
        vnr = simple_vnr(demands=[ResourceVector(5, 5, 5)] * 3,
                         links=[(0, 1)], bw={(0, 1): 20.0})
        state, partial = fresh(ring(4), vnr)
        feats = build_features(state, vnr, partial)
        assert np.array_equal(feats.x_v[2, 3:6], [0, 0, 0])


class TestEncoder:
    def test_zero_gnn_weights_reduce_to_input_mlp(self, rng):
        cfg = PolicyConfig(hidden=16, gcn_layers=2)
        params = init_params(cfg, seed=3)
        for k in range(cfg.gcn_layers):
            params[f"enc_p_gcn{k}_w"].data[:] = 0.0
            params[f"enc_p_gcn{k}_b"].data[:] = 0.0
        x = rng.uniform(size=(5, 7))
        adj = T.normalized_adjacency(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
        z = encode(params, "enc_p", x, adj, cfg.gcn_layers)
        mlp = T.relu(T.linear(T.Tensor(x), params["enc_p_mlp_w"],
                              params["enc_p_mlp_b"]))
        assert np.allclose(z.data, mlp.data)

    def test_output_shape(self, rng):
        cfg = PolicyConfig(hidden=128, gcn_layers=3)
        params = init_params(cfg, seed=0)
        x = rng.uniform(size=(6, 7))
        adj = T.normalized_adjacency(6, [(i, i + 1) for i in range(5)])
        z = encode(params, "enc_v", x, adj, cfg.gcn_layers)
        assert z.shape == (6, 128)

    def test_permutation_equivariance(self, rng):
        cfg = PolicyConfig(hidden=8, gcn_layers=2)
        params = init_params(cfg, seed=7)
        n = 6
        links = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 3)]
        x = rng.uniform(size=(n, 7))
        perm = rng.permutation(n)
        plinks = [(int(perm[u]), int(perm[v])) for u, v in links]
        z = encode(params, "enc_v", x, T.normalized_adjacency(n, links),
                   cfg.gcn_layers)
        zp = encode(params, "enc_v", x[np.argsort(perm)],
                    T.normalized_adjacency(n, plinks), cfg.gcn_layers)
        assert np.allclose(z.data, zp.data[perm], atol=1e-10)


class TestDistributions:
    def _setup(self, seed=11, hidden=16):
        cfg = PolicyConfig(hidden=hidden, gcn_layers=2)
        policy = Policy(cfg, seed=seed)
        pn = ring(6)
        vnr = simple_vnr(demands=[ResourceVector(10, 10, 10)] * 3,
                         links=[(0, 1), (1, 2)],
                         bw={(0, 1): 20.0, (1, 2): 20.0})
        state, partial = fresh(pn, vnr)
        feats = policy.features(state, vnr, partial)
        z_v, z_p = policy.encode_both(feats)
        return policy, state, vnr, partial, feats, z_v, z_p

    def test_high_normalized_and_masked(self):
        policy, state, vnr, partial, feats, z_v, z_p = self._setup()
        place_node(state, partial, 1, 0)
        feats = policy.features(state, vnr, partial)
        z_v, z_p = policy.encode_both(feats)
        probs = policy.high_dist(z_v, z_p, feats).data.reshape(-1)
        assert abs(probs.sum() - 1.0) <= 1e-9
        assert probs[1] == 0.0
        assert (probs[[0, 2]] > 0).all()

    def test_single_unplaced_node_is_certain(self):
        policy, state, vnr, partial, feats, z_v, z_p = self._setup()
        place_node(state, partial, 0, 0)
        place_node(state, partial, 2, 3)
        feats = policy.features(state, vnr, partial)
        z_v, z_p = policy.encode_both(feats)
        probs = policy.high_dist(z_v, z_p, feats).data.reshape(-1)
        assert probs.tolist() == [0.0, 1.0, 0.0]

    def test_low_support_matches_feasibility_oracle(self, rng):
        cfg = PolicyConfig(hidden=8, gcn_layers=1)
        policy = Policy(cfg, seed=5)
        for _ in range(25):
            pn, vnr = random_tiny_instance(rng, tight=True)
            state, partial = fresh(pn, vnr)
            mask = feasible_host_mask(state, vnr, 0, partial)
            if not mask.any():
                continue
            feats = policy.features(state, vnr, partial)
            z_v, z_p = policy.encode_both(feats)
            probs = policy.low_dist(z_v, z_p, 0, mask).data.reshape(-1)
            assert abs(probs.sum() - 1.0) <= 1e-9
            assert np.array_equal(probs > 0, mask)

    def test_symmetric_ring_uniform_low_distribution(self):
        # identical substrate nodes on a vertex-transitive graph get equal
        # scores, so the masked softmax must come out exactly uniform
        policy, state, vnr, partial, feats, z_v, z_p = self._setup()
        mask = np.ones(6, dtype=bool)
        probs = policy.low_dist(z_v, z_p, 0, mask).data.reshape(-1)
        assert np.allclose(probs, 1 / 6, atol=1e-9)

    def test_joint_distribution_normalized(self):
        policy, state, vnr, partial, feats, z_v, z_p = self._setup()
        high = policy.high_dist(z_v, z_p, feats).data.reshape(-1)
        total = 0.0
        for nv in range(vnr.node_count):
            mask = feasible_host_mask(state, vnr, nv, partial)
            low = policy.low_dist(z_v, z_p, nv, mask).data.reshape(-1)
            total += high[nv] * low.sum()
        assert abs(total - 1.0) <= 1e-8


class TestSelection:
    def test_greedy_takes_argmax(self, rng):
        assert select_level(np.array([0.1, 0.63, 0.27]), "greedy", rng) == 1

    def test_greedy_tie_breaks_to_lowest_index(self, rng):
        assert select_level(np.array([0.4, 0.4, 0.2]), "greedy", rng) == 0

    def test_sampling_frequencies(self):
        rng = np.random.default_rng(99)
        p = np.array([0.2, 0.3, 0.5])
        n = 10_000
        draws = np.array([select_level(p, "sample", rng) for _ in range(n)])
        for i, pi in enumerate(p):
            freq = (draws == i).mean()
            sigma = math.sqrt(pi * (1 - pi) / n)
            assert abs(freq - pi) <= 3 * sigma


class TestValue:
    def test_zero_head_gives_zero(self):
        cfg = PolicyConfig(hidden=8, gcn_layers=1)
        policy = Policy(cfg, seed=2)
        policy.params["critic_val_w2"].data[:] = 0.0
        policy.params["critic_val_b2"].data[:] = 0.0
        vnr = simple_vnr()
        state, partial = fresh(ring(5), vnr)
        assert policy.value(policy.features(state, vnr, partial)) == 0.0

    def test_value_finite_and_deterministic(self):
        cfg = PolicyConfig(hidden=16, gcn_layers=2)
        policy = Policy(cfg, seed=4)
        vnr = simple_vnr()
        state, partial = fresh(ring(5), vnr)
        feats = policy.features(state, vnr, partial)
        v1, v2 = policy.value(feats), policy.value(feats)
        assert math.isfinite(v1) and v1 == v2

    def test_value_gradcheck(self):
        cfg = PolicyConfig(hidden=6, gcn_layers=1)
        params = init_params(cfg, seed=8)
        vnr = simple_vnr()
        state, partial = fresh(ring(4), vnr)
        feats = build_features(state, vnr, partial)
        w = params["critic_val_w1"]

        def forward():
            return evaluate_value(params, feats, cfg.gcn_layers)

        params.zero_grad()
        forward().backward()
        analytic = w.grad.copy()
        h = 1e-5
        fd = np.zeros_like(w.data)
        for i in range(w.data.shape[0]):
            for j in range(w.data.shape[1]):
                orig = w.data[i, j]
                w.data[i, j] = orig + h
                fp = forward().item()
                w.data[i, j] = orig - h
                fm = forward().item()
                w.data[i, j] = orig
                fd[i, j] = (fp - fm) / (2 * h)
        denom = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-8)
        assert np.abs(analytic - fd).max() / denom <= 1e-4


class TestEntropy:
    def test_uniform_bilevel(self):
        d = BilevelDistribution(high=np.full(4, 0.25), low=np.full(8, 0.125))
        assert abs(d.entropy() - (math.log(4) + math.log(8))) <= 1e-12
        assert abs(d.entropy() - 3.4657) <= 1e-4

    def test_point_mass_zero(self):
        assert distribution_entropy(np.array([0.0, 1.0, 0.0])) == 0.0

    def test_matches_naive_formula(self, rng):
        p = rng.dirichlet(np.ones(9))
        naive = -sum(pi * math.log(pi) for pi in p)
        assert abs(distribution_entropy(p) - naive) <= 1e-12


def test_checkpoint_round_trip(tmp_path):
    cfg = PolicyConfig(hidden=12, gcn_layers=2, action_mode="uni",
                       uni_order="id")
    policy = Policy(cfg, seed=21)
    path = str(tmp_path / "policy.npz")
    policy.save(path, {"episodes": 42})
    loaded = Policy.load(path)
    assert loaded.cfg == cfg
    for name in policy.params.names():
        assert np.array_equal(loaded.params[name].data,
                              policy.params[name].data)

    vnr = simple_vnr()
    state, partial = fresh(ring(5), vnr)
    f1 = policy.features(state, vnr, partial)
    f2 = loaded.features(state, vnr, partial)
    za, zb = policy.encode_both(f1)[0], loaded.encode_both(f2)[0]
    assert np.array_equal(za.data, zb.data)


def test_config_validation():
    with pytest.raises(ValueError):
        Policy(PolicyConfig(action_mode="tri"))
    with pytest.raises(ValueError):
        Policy(PolicyConfig(uni_order="random"))
