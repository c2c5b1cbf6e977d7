"""Actor-critic for embedding: feature construction, GCN encoders with
residual, hierarchical bilevel decoder, value head."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .embedding import EmbeddingSolution, feasible_host_mask
from .netmodel import SubstrateState, VirtualNetworkRequest
from .tensor import ParamStore, Tensor

N_FEATURES = 7


@dataclass
class PolicyConfig:
    hidden: int = 128
    gcn_layers: int = 3
    norm_const: float = 100.0  # capacity upper bound used to scale features
    action_mode: str = "bi"    # "bi" or "uni"
    uni_order: str = "nrm"     # ordering source in uni mode: "id" or "nrm"

    def validate(self):
        if self.action_mode not in ("bi", "uni"):
            raise ValueError(f"bad action_mode {self.action_mode}")
        if self.uni_order not in ("id", "nrm"):
            raise ValueError(f"bad uni_order {self.uni_order}")


@dataclass
class FeatureMatrices:
    """Inputs of one decision step: 7-column node matrices plus masks.

    Masks are captured at build time so that policy evaluation (and PPO
    log-prob recomputation) never needs to touch the live substrate state.
    """
    x_v: np.ndarray            # (|Nv|, 7)
    x_p: np.ndarray            # (|Np|, 7)
    a_v: np.ndarray            # normalized adjacency of the VNR
    a_p: np.ndarray            # normalized adjacency of the substrate
    placed_mask: np.ndarray    # bool (|Nv|,), True = already placed
    host_masks: Dict[int, np.ndarray] = field(default_factory=dict)


def _bw_aggregates(node_count: int, adjacency, bw: np.ndarray) -> np.ndarray:
    """(max, mean, sum) of incident link bandwidth per node; zeros if isolated."""
    out = np.zeros((node_count, 3))
    for n in range(node_count):
        incident = [bw[li] for _, li in adjacency[n]]
        if incident:
            arr = np.array(incident)
            out[n] = (arr.max(), arr.mean(), arr.sum())
    return out


def build_features(state: SubstrateState, vnr: VirtualNetworkRequest,
                   partial: EmbeddingSolution, norm_const: float = 100.0,
                   a_v: Optional[np.ndarray] = None,
                   a_p: Optional[np.ndarray] = None) -> FeatureMatrices:
    """7-feature matrices for both graphs, scaled by the capacity bound."""
    pn = state.network
    n_v, n_p = vnr.node_count, pn.node_count
    x_v = np.zeros((n_v, N_FEATURES))
    x_v[:, 0:3] = vnr.demand_array / norm_const
    x_v[:, 3:6] = _bw_aggregates(n_v, vnr.adjacency, vnr.bw_array) / norm_const
    placed = np.zeros(n_v, dtype=bool)
    for nv in partial.node_map:
        placed[nv] = True
    x_v[:, 6] = placed

    x_p = np.zeros((n_p, N_FEATURES))
    x_p[:, 0:3] = state.avail / norm_const
    x_p[:, 3:6] = _bw_aggregates(n_p, pn.adjacency, state.avail_bw) / norm_const
    selected = np.zeros(n_p, dtype=bool)
    for np_id in partial.node_map.values():
        selected[np_id] = True
    x_p[:, 6] = selected

    if a_v is None:
        a_v = T.normalized_adjacency(n_v, vnr.links)
    if a_p is None:
        a_p = T.normalized_adjacency(n_p, pn.links)
    return FeatureMatrices(x_v, x_p, a_v, a_p, placed)


def init_params(cfg: PolicyConfig, seed: int) -> ParamStore:
    """Actor and critic parameters, uniform fan-in init."""
    rng = np.random.default_rng(seed)
    params = ParamStore()
    h = cfg.hidden

    def encoder(prefix: str):
        params.add(f"{prefix}_mlp_w", T.uniform_init(rng, N_FEATURES, (N_FEATURES, h)))
        params.add(f"{prefix}_mlp_b", T.uniform_init(rng, N_FEATURES, (1, h)))
        for k in range(cfg.gcn_layers):
            params.add(f"{prefix}_gcn{k}_w", T.uniform_init(rng, h, (h, h)))
            params.add(f"{prefix}_gcn{k}_b", T.uniform_init(rng, h, (1, h)))

    def score_mlp(prefix: str, in_dim: int):
        params.add(f"{prefix}_w1", T.uniform_init(rng, in_dim, (in_dim, h)))
        params.add(f"{prefix}_b1", T.uniform_init(rng, in_dim, (1, h)))
        params.add(f"{prefix}_w2", T.uniform_init(rng, h, (h, 1)))
        params.add(f"{prefix}_b2", T.uniform_init(rng, h, (1, 1)))

    encoder("enc_v")
    encoder("enc_p")
    score_mlp("high", h)
    score_mlp("low", h)
    encoder("critic_v")
    encoder("critic_p")
    score_mlp("critic_val", 2 * h)
    return params


def encode(params: ParamStore, prefix: str, x: np.ndarray, norm_adj: np.ndarray,
           n_layers: int) -> Tensor:
    """Z = GNN(MLP(X), A) + MLP(X) (residual)."""
    initial = T.relu(T.linear(Tensor(x), params[f"{prefix}_mlp_w"],
                              params[f"{prefix}_mlp_b"]))
    hcur = initial
    for k in range(n_layers):
        hcur = T.gcn_layer(hcur, norm_adj, params[f"{prefix}_gcn{k}_w"],
                           params[f"{prefix}_gcn{k}_b"])
    return T.add(hcur, initial)


def _score(params: ParamStore, prefix: str, x: Tensor) -> Tensor:
    hidden = T.relu(T.linear(x, params[f"{prefix}_w1"], params[f"{prefix}_b1"]))
    return T.linear(hidden, params[f"{prefix}_w2"], params[f"{prefix}_b2"])


def high_level_distribution(params: ParamStore, z_v: Tensor, z_p: Tensor,
                            placed_mask: np.ndarray) -> Tensor:
    """Scores = MLP(Z_v + GMP(Z_p)); softmax over unplaced virtual nodes."""
    scores = _score(params, "high", T.add(z_v, T.mean_rows(z_p)))
    return T.masked_softmax(scores, ~placed_mask.reshape(-1, 1))


def low_level_distribution(params: ParamStore, z_p: Tensor, z_v: Tensor,
                           chosen_nv: int, host_mask: np.ndarray) -> Tensor:
    """Scores = MLP(Z_p + GMP(Z_v) + z_nv); softmax over feasible hosts."""
    ctx = T.add(T.mean_rows(z_v), T.gather_rows(z_v, [chosen_nv]))
    scores = _score(params, "low", T.add(z_p, ctx))
    return T.masked_softmax(scores, host_mask.reshape(-1, 1))


def evaluate_value(params: ParamStore, feats: FeatureMatrices,
                   n_layers: int) -> Tensor:
    """Critic: MLP(concat(GMP(enc_v), GMP(enc_p))), own encoder parameters."""
    z_v = encode(params, "critic_v", feats.x_v, feats.a_v, n_layers)
    z_p = encode(params, "critic_p", feats.x_p, feats.a_p, n_layers)
    pooled = T.concat([T.mean_rows(z_v), T.mean_rows(z_p)], axis=1)
    return T.pick(_score(params, "critic_val", pooled), 0)


def distribution_entropy(probs: np.ndarray) -> float:
    p = probs.reshape(-1)
    support = p > 0
    return float(-(p[support] * np.log(p[support])).sum())


@dataclass
class BilevelDistribution:
    high: np.ndarray
    low: np.ndarray

    def entropy(self) -> float:
        """H(pi^H) + H(pi^L), natural log, masked entries contribute 0."""
        return distribution_entropy(self.high) + distribution_entropy(self.low)


def select_level(probs: np.ndarray, mode: str, rng) -> int:
    p = probs.reshape(-1)
    if mode == "greedy":
        return int(np.argmax(p))  # argmax returns the lowest index on ties
    return int(rng.choice(len(p), p=p / p.sum()))


class Policy:
    """Bundles parameters with the forward passes used at decision time."""

    def __init__(self, cfg: PolicyConfig, params: Optional[ParamStore] = None,
                 seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def norm_adj(self, graph) -> np.ndarray:
        # memoized on the graph instance: id()-keyed caches can serve stale
        # entries once a graph is garbage collected and its id is reused
        cached = getattr(graph, "_norm_adj", None)
        if cached is None:
            cached = T.normalized_adjacency(graph.node_count, graph.links)
            graph._norm_adj = cached
        return cached

    def features(self, state: SubstrateState, vnr: VirtualNetworkRequest,
                 partial: EmbeddingSolution) -> FeatureMatrices:
        return build_features(state, vnr, partial, self.cfg.norm_const,
                              a_v=self.norm_adj(vnr), a_p=self.norm_adj(state.network))

    def encode_both(self, feats: FeatureMatrices) -> Tuple[Tensor, Tensor]:
        z_v = encode(self.params, "enc_v", feats.x_v, feats.a_v, self.cfg.gcn_layers)
        z_p = encode(self.params, "enc_p", feats.x_p, feats.a_p, self.cfg.gcn_layers)
        return z_v, z_p

    def high_dist(self, z_v: Tensor, z_p: Tensor, feats: FeatureMatrices) -> Tensor:
        return high_level_distribution(self.params, z_v, z_p, feats.placed_mask)

    def low_dist(self, z_v: Tensor, z_p: Tensor, nv: int,
                 host_mask: np.ndarray) -> Tensor:
        return low_level_distribution(self.params, z_p, z_v, nv, host_mask)

    def value(self, feats: FeatureMatrices) -> float:
        return evaluate_value(self.params, feats, self.cfg.gcn_layers).item()

    def save(self, path: str, extra_manifest: Optional[dict] = None):
        manifest = asdict(self.cfg)
        manifest.update(extra_manifest or {})
        T.save_params(self.params, path, manifest)

    @staticmethod
    def load(path: str) -> "Policy":
        params, manifest = T.load_params(path)
        cfg = PolicyConfig(
            hidden=int(manifest.get("hidden", 128)),
            gcn_layers=int(manifest.get("gcn_layers", 3)),
            norm_const=float(manifest.get("norm_const", 100.0)),
            action_mode=manifest.get("action_mode", "bi"),
            uni_order=manifest.get("uni_order", "nrm"))
        return Policy(cfg, params=params)
