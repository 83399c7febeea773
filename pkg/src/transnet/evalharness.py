"""Closed-loop evaluation: rollouts, SR/TL/CR metrics, paired comparisons, kernel export."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffgrid as dg
from . import gridworld as gw
from .network import NetConfig, TransNet, TransNetParams, select_action, transition_kernels
from .qmdp_expert import DomainConfig, QMDPExpert

# keeps evaluation streams disjoint from dataset streams built with the same seed
_EVAL_TAG = 1


@dataclass
class EpisodeRecord:
    scenario_id: int
    steps: int
    success: bool
    collisions: int
    trace: Optional[list] = None  # (belief entropy, action, observation) per step

    def __post_init__(self):
        if self.collisions > self.steps:
            raise ValueError("more collisions than steps")


@dataclass
class MetricSummary:
    SR: float
    TL: Optional[float]
    CR: float
    episodes: int

    def row(self, label: str) -> str:
        tl = "-" if self.TL is None else f"{self.TL:.1f}"
        return f"{label},{self.SR:.1f},{tl},{self.CR:.1f},{self.episodes}"


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# policies: reset(scenario) / act() / update(action, observation, gates)


class ExpertPolicy:
    name = "expert"

    def __init__(self, noise: gw.NoiseProfile):
        self.noise = noise

    def reset(self, scenario: gw.Scenario):
        self.expert = QMDPExpert(scenario, self.noise)

    def act(self) -> int:
        return self.expert.act()

    def update(self, action, observation, gates):
        self.expert.update(action, observation, gates)

    def belief(self):
        return self.expert.belief_image()


class NetworkPolicy:
    """Greedy policy of a trained network; replans whenever the input image changes."""

    def __init__(self, net: TransNet, params: TransNetParams, name: str = "transnet"):
        self.net = net
        self.P = params.tensors()
        self.name = name
        self.kp = transition_kernels(self.P, "planner")
        self.kf = transition_kernels(self.P, "filter")

    def reset(self, scenario: gw.Scenario):
        self.scenario = scenario
        self.gates = scenario.map.gates
        self.theta = None
        self.b = dg.DTensor(scenario.initial_belief[..., None])
        self._refresh()

    def _refresh(self):
        theta = self.scenario.theta(self.gates)
        if self.theta is None or not np.array_equal(theta, self.theta):
            self.theta = theta
            self.ctx = self.net.context(theta, self.P)
            self.Q = self.net.plan(self.ctx, self.P, self.kp)

    def act(self) -> int:
        return int(np.argmax(select_action(self.b, self.Q).data))

    def update(self, action, observation, gates):
        self.b, _ = self.net.belief_update(self.b, action, observation, self.ctx, self.P, self.kf)
        self.gates = gates
        self._refresh()

    def belief(self):
        return self.b.data[..., 0]


def default_max_steps(scenario: gw.Scenario) -> int:
    H, W = scenario.shape
    return 4 * (H + W)


def rollout(policy, scenario: gw.Scenario, noise: gw.NoiseProfile, max_steps: Optional[int] = None,
            rng=None, p_swap: float = 0.1, scenario_id: int = 0, trace: bool = False) -> EpisodeRecord:
    """Run ``policy`` against the simulator until the goal or ``max_steps``."""
    rng = np.random.default_rng(rng)
    if max_steps is None:
        max_steps = default_max_steps(scenario)
    state, gates = tuple(scenario.start), scenario.map.gates
    if state == tuple(scenario.goal):
        return EpisodeRecord(scenario_id, 0, True, 0, [] if trace else None)
    policy.reset(scenario)
    steps = collisions = 0
    log = [] if trace else None
    for _ in range(max_steps):
        a = policy.act()
        res = gw.step_env(scenario, noise, state, a, gates, rng, p_swap)
        steps += 1
        collisions += int(res.collision)
        state, gates = res.state, res.gates
        if res.done:
            if trace:
                log.append((0.0, a, res.observation))
            return EpisodeRecord(scenario_id, steps, True, collisions, log)
        policy.update(a, res.observation, gates)
        if trace:
            log.append((_entropy(np.asarray(policy.belief()).ravel()), a, res.observation))
    return EpisodeRecord(scenario_id, steps, False, collisions, log)


def metrics(records: Sequence[EpisodeRecord]) -> MetricSummary:
    if not records:
        raise ValueError("metrics needs at least one record")
    wins = [r.steps for r in records if r.success]
    steps = sum(r.steps for r in records)
    sr = 100.0 * len(wins) / len(records)
    tl = float(np.mean(wins)) if wins else None
    cr = 100.0 * sum(r.collisions for r in records) / steps if steps else 0.0
    return MetricSummary(sr, tl, cr, len(records))


# ---------------------------------------------------------------------------
# evaluation suites


@dataclass
class EvalSuite:
    """Scenarios plus one seed per scenario for the simulator stream."""

    scenarios: list
    seeds: list
    noise: gw.NoiseProfile
    p_swap: float = 0.1
    max_steps: Optional[int] = None
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.scenarios) != len(self.seeds):
            raise ValueError("one seed per scenario required")
        if not self.ids:
            self.ids = list(range(len(self.scenarios)))


def make_suite(domain: DomainConfig, n: int, seed: int, min_distance: int = 0) -> EvalSuite:
    """``n`` fresh environments with one task each."""
    scenarios, seeds = [], []
    variant = domain.variant if domain.domain == "dynamic" else "static"
    for i in range(n):
        map_ss, task_ss, sim_ss = np.random.SeedSequence([seed, i, _EVAL_TAG]).spawn(3)
        gmap = domain.make_map(map_ss)
        scenarios.append(gw.sample_task(gmap, np.random.default_rng(task_ss), variant, min_distance))
        seeds.append(sim_ss)
    return EvalSuite(scenarios, seeds, domain.noise, domain.p_swap, domain.max_steps)


def evaluate(policy, suite: EvalSuite) -> list:
    return [
        rollout(policy, sc, suite.noise, suite.max_steps, np.random.default_rng(seed), suite.p_swap, sid)
        for sc, seed, sid in zip(suite.scenarios, suite.seeds, suite.ids)
    ]


def compare(policies: dict, suite: EvalSuite, results: Optional[dict] = None):
    """Evaluate every policy (plus the expert) on the same suite with common random numbers.

    Returns ``(table, records)``: table maps label -> MetricSummary, records
    maps label -> list of EpisodeRecord in suite order.
    """
    records = dict(results or {})
    for label, pol in policies.items():
        if label not in records:
            records[label] = evaluate(pol, suite)
    if "expert" not in records:
        records["expert"] = evaluate(ExpertPolicy(suite.noise), suite)
    ref = [r.scenario_id for r in records["expert"]]
    for label, recs in records.items():
        if [r.scenario_id for r in recs] != ref:
            raise ValueError(f"scenario list of {label!r} does not match")
    return {label: metrics(recs) for label, recs in records.items()}, records


def format_table(table: dict) -> str:
    lines = ["policy,SR,TL,CR,episodes"]
    lines += [summary.row(label) for label, summary in table.items()]
    return "\n".join(lines) + "\n"


def scale_planning(net: TransNet, shape) -> TransNet:
    """Copy of ``net`` whose planner runs 4 * max(H, W) iterations."""
    cfg = dataclasses.replace(net.config, K=4 * max(shape))
    return TransNet(cfg, net.spec, net.fused)


def generalization_suite(gmap: gw.GridMap, noise: gw.NoiseProfile, trials: int = 25, seed: int = 0,
                         max_steps: Optional[int] = None) -> EvalSuite:
    """Tasks on one large map, start and goal at least half the diagonal apart (L1)."""
    H, W = gmap.shape
    min_d = int(np.ceil(0.5 * np.hypot(H, W)))
    scenarios, seeds = [], []
    for i in range(trials):
        task_ss, sim_ss = np.random.SeedSequence([seed, i, _EVAL_TAG]).spawn(2)
        scenarios.append(gw.sample_task(gmap, np.random.default_rng(task_ss), "static", min_d))
        seeds.append(sim_ss)
    return EvalSuite(scenarios, seeds, noise, max_steps=max_steps)


def eval_generalization(net: TransNet, params: TransNetParams, gmap, noise: gw.NoiseProfile,
                        trials: int = 25, seed: int = 0, K: Optional[int] = None):
    """Run small-map-trained parameters on a large map; ``gmap`` may be a path."""
    if not isinstance(gmap, gw.GridMap):
        gmap = gw.load_map(gmap)
    big = scale_planning(net, gmap.shape)
    if K is not None:
        big = TransNet(dataclasses.replace(big.config, K=K), big.spec, big.fused)
    suite = generalization_suite(gmap, noise, trials, seed)
    records = evaluate(NetworkPolicy(big, params), suite)
    return metrics(records), records


# ---------------------------------------------------------------------------
# kernel images


def kernel_slice(params: TransNetParams, config: NetConfig, action: int, cls: int, which: str = "planner"):
    if not 0 <= action < config.num_actions:
        raise ValueError(f"action {action} outside 0..{config.num_actions - 1}")
    if not 0 <= cls < config.num_classes:
        raise ValueError(f"class {cls} outside 0..{config.num_classes - 1}")
    k = transition_kernels(params.tensors(), which).data
    return k[:, :, 0, action * config.num_classes + cls]


def export_kernels(params: TransNetParams, config: NetConfig, action: int, cls: int, path,
                   which: str = "planner", scale: int = 32) -> np.ndarray:
    """Write the k x k probability slice as a PGM heat image plus a ``.txt`` matrix."""
    m = kernel_slice(params, config, action, cls, which)
    path = Path(path)
    img = np.round(255 * m / m.max()).astype(np.uint8)
    gw.write_pgm(path, np.kron(img, np.ones((scale, scale), dtype=np.uint8)))
    np.savetxt(path.with_suffix(".txt"), m, fmt="%.12f")
    return m
