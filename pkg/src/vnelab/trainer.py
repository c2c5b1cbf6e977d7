"""Bidirectional-action environment, PPO, meta-training with curriculum
scheduling, and fine-tuning to size-specific policies."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .embedding import (EmbeddingSolution, _route_pending, feasible_host_mask,
                        finalize, place_node, release)
from .heuristics import id_ordering, nrm_ordering
from .netmodel import (PhysicalNetwork, ScenarioConfig, SubstrateState,
                       VirtualNetworkRequest, sample_vnr_stream)
from .policy import (FeatureMatrices, Policy, PolicyConfig,
                     distribution_entropy, evaluate_value, select_level)
from .simkernel import MetricsLedger, run_simulation
from .tensor import Adam, EmptySupportError, ParamStore, Tensor


class ContractViolation(RuntimeError):
    pass


class EmbeddingEnv:
    """One VNR embedding episode over a live substrate state.

    Rejection is atomic: any failure rolls the substrate back to exactly the
    state at episode start (other VNRs' reservations untouched).
    """

    def __init__(self, state: SubstrateState, vnr: VirtualNetworkRequest):
        self.state = state
        self.vnr = vnr
        self.partial = EmbeddingSolution(vnr)
        self.done = False
        self.accepted = False

    @property
    def step_reward_unit(self) -> float:
        return 1.0 / self.vnr.node_count

    def step(self, nv: int, np_id: int) -> Tuple[float, bool]:
        """Apply one bidirectional action.  Returns (reward, done)."""
        if self.done:
            raise ContractViolation("step after episode end")
        if nv in self.partial.node_map:
            raise ContractViolation(f"virtual node {nv} already placed")
        reason = place_node(self.state, self.partial, nv, np_id)
        if reason is not None:
            raise ContractViolation(f"masked action reached env: {reason}")
        if not _route_pending(self.state, self.partial):
            self.reject()
            return -self.step_reward_unit, True
        if len(self.partial.node_map) == self.vnr.node_count:
            finalize(self.partial)
            self.done = True
            self.accepted = True
            return self.partial.r2c(), True
        return self.step_reward_unit, False

    def reject(self):
        release(self.state, self.partial)
        self.done = True
        self.accepted = False


@dataclass
class StepRecord:
    feats: FeatureMatrices
    nv: int
    np_id: int
    log_prob: float
    value: float
    reward: float
    done: bool
    has_action: bool = True
    entropy: float = 0.0
    advantage: float = 0.0
    ret: float = 0.0


@dataclass
class Trajectory:
    vnr_id: int
    size: int
    steps: List[StepRecord] = field(default_factory=list)
    accepted: bool = False
    final_r2c: float = 0.0

    @property
    def rewards(self) -> List[float]:
        return [s.reward for s in self.steps]


LOGP_EPS = 1e-20


def _log_pick(dist: Tensor, index: int) -> Tensor:
    return T.log(T.add(T.pick(dist, index), LOGP_EPS))


def run_episode(policy: Policy, state: SubstrateState,
                vnr: VirtualNetworkRequest, mode: str, rng,
                record: bool = True,
                compute_values: bool = True
                ) -> Tuple[Trajectory, Optional[EmbeddingSolution]]:
    """Roll one VNR through the bidirectional-action MDP with the policy."""
    env = EmbeddingEnv(state, vnr)
    traj = Trajectory(vnr.id, vnr.node_count)
    ordering = None
    if policy.cfg.action_mode == "uni":
        ordering = (nrm_ordering(vnr) if policy.cfg.uni_order == "nrm"
                    else id_ordering(vnr))
    step_idx = 0
    while not env.done:
        feats = policy.features(state, vnr, env.partial)
        value = policy.value(feats) if compute_values else 0.0
        z_v, z_p = policy.encode_both(feats)
        ent_h = 0.0
        logp = 0.0
        if ordering is not None:
            nv = ordering[step_idx]
        else:
            pi_h = policy.high_dist(z_v, z_p, feats)
            nv = select_level(pi_h.data, mode, rng)
            logp += float(np.log(pi_h.data.reshape(-1)[nv] + LOGP_EPS))
            ent_h = distribution_entropy(pi_h.data)
        host_mask = feasible_host_mask(state, vnr, nv, env.partial)
        if not host_mask.any():
            # no feasible host: the environment rejects the VNR; logged as a
            # terminal record without an action
            env.reject()
            if record:
                traj.steps.append(StepRecord(feats, nv, -1, 0.0, value,
                                             -env.step_reward_unit, True,
                                             has_action=False))
            break
        feats.host_masks[nv] = host_mask
        pi_l = policy.low_dist(z_v, z_p, nv, host_mask)
        np_id = select_level(pi_l.data, mode, rng)
        logp += float(np.log(pi_l.data.reshape(-1)[np_id] + LOGP_EPS))
        entropy = ent_h + distribution_entropy(pi_l.data)
        reward, done = env.step(nv, np_id)
        if record:
            traj.steps.append(StepRecord(feats, nv, np_id, logp, value, reward,
                                         done, entropy=entropy))
        step_idx += 1
    traj.accepted = env.accepted
    traj.final_r2c = env.partial.r2c() if env.accepted else 0.0
    return traj, (env.partial if env.accepted else None)


class PolicySolver:
    """Solver-protocol adapter; optionally records trajectories."""

    def __init__(self, policy: Policy, mode: str = "greedy",
                 rng=None, record: bool = False):
        self.policy = policy
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.record = record
        self.trajectories: List[Trajectory] = []

    def solve(self, state, vnr):
        traj, solution = run_episode(self.policy, state, vnr, self.mode,
                                     self.rng, record=self.record,
                                     compute_values=self.record)
        if self.record:
            self.trajectories.append(traj)
        return solution


def collect_rollouts(policy: Policy, pn: PhysicalNetwork,
                     scenario: ScenarioConfig, seed: int,
                     mode: str = "sample"
                     ) -> Tuple[List[Trajectory], MetricsLedger]:
    """Run one full online simulation with the policy as solver, recording
    trajectories.  Deterministic given seed."""
    vnrs = sample_vnr_stream(scenario, seed)
    solver = PolicySolver(policy, mode=mode,
                          rng=np.random.default_rng(seed + 1), record=True)
    ledger = run_simulation(pn, vnrs, solver, verify=False)
    return solver.trajectories, ledger


def compute_advantages(trajectories: Sequence[Trajectory], gamma: float = 0.99,
                       gae_lambda: float = 0.95,
                       normalize: bool = True) -> List[StepRecord]:
    """Generalized advantage estimation per episode; advantages normalized
    across the whole update batch.  Returns the flattened step list."""
    steps: List[StepRecord] = []
    for traj in trajectories:
        adv = 0.0
        next_value = 0.0
        for s in reversed(traj.steps):
            delta = s.reward + gamma * next_value - s.value
            adv = delta + gamma * gae_lambda * adv
            s.advantage = adv
            s.ret = adv + s.value
            next_value = s.value
        steps.extend(traj.steps)
    if normalize and steps:
        a = np.array([s.advantage for s in steps])
        mean, std = a.mean(), a.std()
        for s in steps:
            s.advantage = (s.advantage - mean) / (std + 1e-8)
    return steps


@dataclass
class TrainConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    meta_iterations: int = 20
    finetune_iterations: int = 10
    training_mode: str = "meta"      # meta | single | multi
    action_mode: str = "bi"          # bi | uni
    uni_order: str = "nrm"
    curriculum: Optional[bool] = None  # defaults: on for meta, off otherwise
    entropy_threshold: float = 2.0   # curriculum threshold (delta)
    entropy_ma_factor: float = 0.9
    alpha: float = 0.001             # inner / task learning rate
    beta: float = 0.001              # outer / meta learning rate
    clip_epsilon: float = 0.2
    ppo_epochs: int = 10
    minibatch: int = 128
    gamma: float = 0.99
    gae_lambda: float = 0.95
    vf_coef: float = 0.5
    entropy_coef: float = 0.0
    hidden: int = 128
    gcn_layers: int = 3
    norm_const: float = 100.0
    seed: int = 0

    def validate(self):
        if self.training_mode not in ("meta", "single", "multi"):
            raise ValueError(f"bad training_mode {self.training_mode}")
        if self.action_mode not in ("bi", "uni"):
            raise ValueError(f"bad action_mode {self.action_mode}")
        if self.curriculum and self.training_mode != "meta":
            raise ValueError("curriculum scheduling requires training_mode=meta")
        self.scenario.validate()

    def use_curriculum(self) -> bool:
        if self.curriculum is None:
            return self.training_mode == "meta"
        return self.curriculum

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(hidden=self.hidden, gcn_layers=self.gcn_layers,
                            norm_const=self.norm_const,
                            action_mode=self.action_mode,
                            uni_order=self.uni_order)


@dataclass
class CurriculumState:
    """Training task list (contiguous prefix of task indices) plus entropy
    moving averages.  Task i corresponds to VNR size min_size + i - 1."""
    n_tasks: int
    threshold: float
    ma_factor: float = 0.9
    tasks: List[int] = field(default_factory=lambda: [1])
    entropy_ma: Dict[int, float] = field(default_factory=dict)

    def observe_entropy(self, task: int, value: float):
        prev = self.entropy_ma.get(task)
        self.entropy_ma[task] = (value if prev is None
                                 else self.ma_factor * prev
                                 + (1 - self.ma_factor) * value)

    def step(self) -> bool:
        """Append the next task when the largest active task's entropy
        moving average has dropped below the threshold."""
        k = max(self.tasks)
        ent = self.entropy_ma.get(k)
        if ent is not None and ent < self.threshold and k < self.n_tasks:
            self.tasks.append(k + 1)
            return True
        return False


def task_index(size: int, min_size: int) -> int:
    return size - min_size + 1


def task_size(index: int, min_size: int) -> int:
    return min_size + index - 1


def split_by_task(trajectories: Sequence[Trajectory],
                  min_size: int) -> Dict[int, List[Trajectory]]:
    out: Dict[int, List[Trajectory]] = {}
    for traj in trajectories:
        out.setdefault(task_index(traj.size, min_size), []).append(traj)
    return out


def _step_log_prob(params: ParamStore, step: StepRecord, cfg: TrainConfig
                   ) -> Tuple[Tensor, float]:
    """Recompute log pi(a|s) for a stored step under the given parameters."""
    from .policy import encode, high_level_distribution, low_level_distribution
    feats = step.feats
    z_v = encode(params, "enc_v", feats.x_v, feats.a_v, cfg.gcn_layers)
    z_p = encode(params, "enc_p", feats.x_p, feats.a_p, cfg.gcn_layers)
    entropy = 0.0
    terms = []
    if cfg.action_mode == "bi":
        pi_h = high_level_distribution(params, z_v, z_p, feats.placed_mask)
        terms.append(_log_pick(pi_h, step.nv))
        entropy += distribution_entropy(pi_h.data)
    pi_l = low_level_distribution(params, z_p, z_v, step.nv,
                                  feats.host_masks[step.nv])
    terms.append(_log_pick(pi_l, step.np_id))
    entropy += distribution_entropy(pi_l.data)
    logp = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return logp, entropy


def ppo_loss(params: ParamStore, steps: Sequence[StepRecord],
             cfg: TrainConfig) -> Tuple[Tensor, dict]:
    """Clipped-surrogate PPO loss (negated objective) plus critic loss."""
    surr_terms = []
    value_terms = []
    ratios = []
    entropies = []
    for s in steps:
        if s.has_action:
            logp, ent = _step_log_prob(params, s, cfg)
            ratio = T.exp(T.add(logp, -s.log_prob))
            clipped = T.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
            surr = T.minimum(T.mul(ratio, s.advantage), T.mul(clipped, s.advantage))
            surr_terms.append(surr)
            ratios.append(float(ratio.data))
            entropies.append(ent)
        v = evaluate_value(params, s.feats, cfg.gcn_layers)
        value_terms.append(T.square(T.add(v, -s.ret)))

    def _mean(terms):
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return T.mul(total, 1.0 / len(terms))

    loss = T.mul(_mean(value_terms), cfg.vf_coef)
    if surr_terms:
        loss = T.add(loss, T.mul(_mean(surr_terms), -1.0))
    stats = {
        "mean_ratio": float(np.mean(ratios)) if ratios else 1.0,
        "mean_entropy": float(np.mean(entropies)) if entropies else 0.0,
        "loss": float(loss.data),
    }
    return loss, stats


def ppo_update(params: ParamStore, steps: Sequence[StepRecord],
               cfg: TrainConfig, optimizer: Optional[Adam] = None,
               rng=None) -> dict:
    """Repeat-pass minibatch PPO update with Adam.  Returns stats including
    the first-epoch mean ratio and last-epoch mean entropy."""
    if not steps:
        raise ValueError("empty batch")
    if optimizer is None:
        optimizer = Adam(params, lr=cfg.alpha)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    stats = {"first_epoch_mean_ratio": None, "mean_entropy": 0.0,
             "last_loss": 0.0, "n_steps": len(steps)}
    idx = np.arange(len(steps))
    for epoch in range(cfg.ppo_epochs):
        rng.shuffle(idx)
        epoch_ratios = []
        epoch_entropies = []
        for start in range(0, len(idx), cfg.minibatch):
            mb = [steps[i] for i in idx[start:start + cfg.minibatch]]
            params.zero_grad()
            loss, mb_stats = ppo_loss(params, mb, cfg)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite PPO loss at epoch {epoch}: {mb_stats}")
            loss.backward()
            optimizer.step()
            epoch_ratios.append(mb_stats["mean_ratio"])
            epoch_entropies.append(mb_stats["mean_entropy"])
            stats["last_loss"] = mb_stats["loss"]
        if epoch == 0:
            stats["first_epoch_mean_ratio"] = float(np.mean(epoch_ratios))
        stats["mean_entropy"] = float(np.mean(epoch_entropies))
    return stats


def split_support_query(trajectories: List[Trajectory]
                        ) -> Tuple[List[Trajectory], List[Trajectory]]:
    """50/50 episode split; with a single episode both halves coincide."""
    support = trajectories[::2]
    query = trajectories[1::2]
    if not query:
        query = support
    return support, query


def inner_loop_adapt(phi: ParamStore, task_trajectories: List[Trajectory],
                     cfg: TrainConfig, rng=None) -> Tuple[ParamStore, dict]:
    """theta_i = deep copy of phi, updated by PPO on the task's support split."""
    support, _ = split_support_query(task_trajectories)
    steps = compute_advantages(support, cfg.gamma, cfg.gae_lambda)
    theta = phi.copy()
    stats = ppo_update(theta, steps, cfg, rng=rng)
    return theta, stats


def task_query_gradient(theta: ParamStore, query: List[Trajectory],
                        cfg: TrainConfig) -> Dict[str, np.ndarray]:
    """Gradient of the PPO objective of the adapted policy on its query
    split (first-order meta-gradient)."""
    steps = compute_advantages(query, cfg.gamma, cfg.gae_lambda)
    theta.zero_grad()
    loss, _ = ppo_loss(theta, steps, cfg)
    loss.backward()
    return {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for n, t in theta.items()}


def meta_update(phi: ParamStore, task_gradients: List[Dict[str, np.ndarray]],
                beta: float, optimizer: Optional[Adam] = None) -> None:
    """Outer-loop step on the averaged task gradient.

    With an optimizer the averaged gradient is fed through it (both loops use
    Adam); without one a plain gradient step phi <- phi - beta * avg is taken.
    """
    if not task_gradients:
        return
    if optimizer is None:
        for n, t in phi.items():
            avg = sum(g[n] for g in task_gradients) / len(task_gradients)
            t.data -= beta * avg
    else:
        phi.zero_grad()
        for n, t in phi.items():
            t.grad = sum(g[n] for g in task_gradients) / len(task_gradients)
        optimizer.step()
    phi.assert_finite()


class PolicySet:
    """Meta-policy plus size-indexed fine-tuned policies with dispatch."""

    def __init__(self, meta: Policy, by_size: Optional[Dict[int, Policy]] = None):
        self.meta = meta
        self.by_size = by_size or {}

    def policy_for(self, size: int) -> Policy:
        return self.by_size.get(size, self.meta)

    def solve(self, state, vnr):
        solver = PolicySolver(self.policy_for(vnr.node_count), mode="greedy")
        return solver.solve(state, vnr)

    def save(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        self.meta.save(os.path.join(out_dir, "meta.npz"))
        manifest = {"sizes": sorted(self.by_size)}
        for size, pol in self.by_size.items():
            pol.save(os.path.join(out_dir, f"theta_{size}.npz"))
        with open(os.path.join(out_dir, "policy_set.json"), "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)

    @staticmethod
    def load(out_dir: str) -> "PolicySet":
        meta = Policy.load(os.path.join(out_dir, "meta.npz"))
        with open(os.path.join(out_dir, "policy_set.json")) as fh:
            manifest = json.load(fh)
        by_size = {int(s): Policy.load(os.path.join(out_dir, f"theta_{s}.npz"))
                   for s in manifest["sizes"]}
        return PolicySet(meta, by_size)


@dataclass
class TrainResult:
    policy_set: PolicySet
    log: List[dict]
    episode_stats: List[dict] = field(default_factory=list)
    trajectories: List[Trajectory] = field(default_factory=list)


def _scenario_for_size(scenario: ScenarioConfig, size: int) -> ScenarioConfig:
    import dataclasses
    return dataclasses.replace(scenario, size_range=(size, size))


def fine_tune(meta_policy: Policy, pn: PhysicalNetwork,
              scenario: ScenarioConfig, sizes: Sequence[int],
              iterations: int, cfg: TrainConfig,
              log: Optional[List[dict]] = None,
              keep_trajectories: Optional[List[Trajectory]] = None
              ) -> Dict[int, Policy]:
    """Adapt the meta-policy to each requested size via inner loops only."""
    by_size: Dict[int, Policy] = {}
    for size in sizes:
        theta = meta_policy.params.copy()
        pol = Policy(cfg.policy_config(), params=theta)
        optimizer = Adam(theta, lr=cfg.alpha)
        rng = np.random.default_rng(cfg.seed + 7919 * size)
        for it in range(iterations):
            trajs, _ = collect_rollouts(pol, pn, _scenario_for_size(scenario, size),
                                        seed=cfg.seed + 104729 * size + it)
            if keep_trajectories is not None:
                keep_trajectories.extend(trajs)
            steps = compute_advantages(trajs, cfg.gamma, cfg.gae_lambda)
            stats = ppo_update(theta, steps, cfg, optimizer=optimizer, rng=rng)
            if log is not None:
                log.append({"phase": "fine-tune", "size": size, "iteration": it,
                            "mean_reward": float(np.mean(
                                [sum(t.rewards) for t in trajs])),
                            "entropy": stats["mean_entropy"],
                            "accept_rate": float(np.mean(
                                [t.accepted for t in trajs]))})
        by_size[size] = pol
    return by_size


def train(pn: PhysicalNetwork, cfg: TrainConfig) -> TrainResult:
    """Full training orchestration (Algorithm: collect, split by size, inner
    loops over active tasks, meta update, curriculum step, then fine-tuning).

    training_mode "single" trains one policy with plain PPO; "multi" trains
    one policy per size from scratch; "meta" is the full method.
    """
    cfg.validate()
    min_size, max_size = cfg.scenario.size_range
    n_tasks = max_size - min_size + 1
    log: List[dict] = []
    all_trajs: List[Trajectory] = []
    rng = np.random.default_rng(cfg.seed)

    if cfg.training_mode == "single":
        policy = Policy(cfg.policy_config(), seed=cfg.seed)
        optimizer = Adam(policy.params, lr=cfg.alpha)
        for it in range(cfg.meta_iterations):
            trajs, ledger = collect_rollouts(policy, pn, cfg.scenario,
                                             seed=cfg.seed + it)
            all_trajs.extend(trajs)
            steps = compute_advantages(trajs, cfg.gamma, cfg.gae_lambda)
            stats = ppo_update(policy.params, steps, cfg, optimizer=optimizer,
                               rng=rng)
            log.append({"phase": "single", "iteration": it, "task": None,
                        "tasks_active": None,
                        "mean_reward": float(np.mean([sum(t.rewards) for t in trajs])),
                        "entropy": stats["mean_entropy"],
                        "first_epoch_mean_ratio": stats["first_epoch_mean_ratio"],
                        "accept_rate": float(np.mean([t.accepted for t in trajs]))})
        return TrainResult(PolicySet(policy), log, trajectories=all_trajs)

    if cfg.training_mode == "multi":
        meta = Policy(cfg.policy_config(), seed=cfg.seed)  # untrained fallback
        by_size: Dict[int, Policy] = {}
        for size in range(min_size, max_size + 1):
            pol = Policy(cfg.policy_config(), seed=cfg.seed + size)
            optimizer = Adam(pol.params, lr=cfg.alpha)
            for it in range(cfg.meta_iterations):
                trajs, _ = collect_rollouts(pol, pn,
                                            _scenario_for_size(cfg.scenario, size),
                                            seed=cfg.seed + 31 * size + it)
                all_trajs.extend(trajs)
                steps = compute_advantages(trajs, cfg.gamma, cfg.gae_lambda)
                stats = ppo_update(pol.params, steps, cfg, optimizer=optimizer,
                                   rng=rng)
                log.append({"phase": "multi", "iteration": it, "task": size,
                            "mean_reward": float(np.mean(
                                [sum(t.rewards) for t in trajs])),
                            "entropy": stats["mean_entropy"],
                            "accept_rate": float(np.mean(
                                [t.accepted for t in trajs]))})
            by_size[size] = pol
        return TrainResult(PolicySet(meta, by_size), log, trajectories=all_trajs)

    # meta mode
    phi_policy = Policy(cfg.policy_config(), seed=cfg.seed)
    phi = phi_policy.params
    outer_optimizer = Adam(phi, lr=cfg.beta)
    cur = CurriculumState(n_tasks=n_tasks, threshold=cfg.entropy_threshold,
                          ma_factor=cfg.entropy_ma_factor)
    if not cfg.use_curriculum():
        cur.tasks = list(range(1, n_tasks + 1))
    for it in range(cfg.meta_iterations):
        trajs, ledger = collect_rollouts(phi_policy, pn, cfg.scenario,
                                         seed=cfg.seed + it)
        all_trajs.extend(trajs)
        by_task = split_by_task(trajs, min_size)
        task_freq = {i: len(by_task.get(i, [])) for i in range(1, n_tasks + 1)}
        gradients = []
        for i in sorted(cur.tasks):
            task_trajs = by_task.get(i)
            if not task_trajs:
                continue
            theta, stats = inner_loop_adapt(phi, task_trajs, cfg, rng=rng)
            _, query = split_support_query(task_trajs)
            gradients.append(task_query_gradient(theta, query, cfg))
            cur.observe_entropy(i, stats["mean_entropy"])
            log.append({"phase": "meta", "iteration": it, "task": i,
                        "size": task_size(i, min_size),
                        "tasks_active": list(cur.tasks),
                        "entropy": stats["mean_entropy"],
                        "entropy_ma": cur.entropy_ma[i],
                        "first_epoch_mean_ratio": stats["first_epoch_mean_ratio"],
                        "mean_reward": float(np.mean(
                            [sum(t.rewards) for t in task_trajs])),
                        "task_frequencies": task_freq})
        meta_update(phi, gradients, cfg.beta, optimizer=outer_optimizer)
        if cfg.use_curriculum():
            grew = cur.step()
            if grew:
                log.append({"phase": "curriculum", "iteration": it,
                            "tasks_active": list(cur.tasks),
                            "trigger_entropy_ma": cur.entropy_ma[max(cur.tasks) - 1],
                            "threshold": cur.threshold})

    sizes = list(range(min_size, max_size + 1))
    by_size = fine_tune(phi_policy, pn, cfg.scenario, sizes,
                        cfg.finetune_iterations, cfg, log=log,
                        keep_trajectories=all_trajs)
    return TrainResult(PolicySet(phi_policy, by_size), log, trajectories=all_trajs)
