"""QMDP expert on ground-truth grid models, and expert demonstration datasets."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import gridworld as gw

logger = logging.getLogger(__name__)


@dataclass
class QTable:
    values: np.ndarray  # (|S|, |A|)
    iterations: int
    residual: float
    converged: bool = True


def mdp_value_iteration(model: gw.GroundTruthPOMDP, tol: float = 1e-6, max_iters: int = 5000) -> QTable:
    """Bellman optimality sweeps from Q = 0 until the sup-norm change drops below ``tol``."""
    S, A = model.R.shape
    stacked = model.stacked_T()
    Q = np.zeros((S, A))
    residual = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        Qn = model.R + model.gamma * (stacked @ Q.max(axis=1)).reshape(A, S).T
        residual = float(np.abs(Qn - Q).max()) if S else 0.0
        Q = Qn
        if residual < tol:
            return QTable(Q, it, residual, True)
    logger.warning("value iteration stopped at %d sweeps, residual %.3g", it, residual)
    return QTable(Q, it, residual, False)


def bellman_residual(model: gw.GroundTruthPOMDP, Q: np.ndarray) -> float:
    V = Q.max(axis=1)
    nxt = np.column_stack([model.T[a] @ V for a in range(model.num_actions)])
    return float(np.abs(model.R + model.gamma * nxt - Q).max())


def predict_belief(belief, action: int, model) -> np.ndarray:
    return model.T[action].T @ np.asarray(belief, dtype=np.float64)


def correct_belief(predicted, action: int, observation: int, model):
    """Weight a predicted belief by Z(s', a, o) and normalise.

    Returns ``(belief, reset)``; when no state explains the observation the
    belief is reset to uniform and ``reset`` is True.
    """
    post = predicted * model.Z[:, action, observation]
    total = post.sum()
    if not total > 0:
        logger.debug("filter reset: observation %d has zero likelihood", observation)
        return np.full(model.num_states, 1.0 / model.num_states), True
    return post / total, False


def bayes_filter(belief, action: int, observation: int, model):
    """One Bayes filter step conditioned on the received observation."""
    return correct_belief(predict_belief(belief, action, model), action, observation, model)


def qmdp_action(belief, Q) -> int:
    values = Q.values if isinstance(Q, QTable) else Q
    return int(np.argmax(np.asarray(belief) @ values))


# ---------------------------------------------------------------------------
# trajectories


@dataclass(eq=False)
class Trajectory:
    scenario: gw.Scenario
    actions: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    gates: list = field(default_factory=list)  # gate state when each action was chosen
    states: list = field(default_factory=list)
    success: bool = False
    collisions: int = 0
    env_id: int = -1

    @property
    def steps(self):
        return len(self.actions)

    @property
    def dynamic(self):
        return self.scenario.map.gates is not None

    def theta(self, t: int) -> np.ndarray:
        """Network input at step ``t``."""
        g = self.gates[t] if self.dynamic and t < len(self.gates) else self.scenario.map.gates
        return self.scenario.theta(g)


class QMDPExpert:
    """QMDP policy on the ground-truth model, replanning whenever the gates change."""

    def __init__(self, scenario: gw.Scenario, noise: gw.NoiseProfile, tol=1e-6, max_iters=5000):
        self.scenario = scenario
        self.noise = noise
        self.tol = tol
        self.max_iters = max_iters
        self._cache = {}
        self.resets = 0
        self.gates = scenario.map.gates
        self.model, self.Q = self._solve(self.gates)
        self.belief = self.model.from_image(scenario.initial_belief)
        self.belief = self.belief / self.belief.sum()

    def _solve(self, gates):
        if gates not in self._cache:
            model = gw.build_pomdp(self.scenario.map, self.scenario.goal, self.noise, gates)
            self._cache[gates] = (model, mdp_value_iteration(model, self.tol, self.max_iters))
        return self._cache[gates]

    def act(self) -> int:
        return qmdp_action(self.belief, self.Q)

    def update(self, action: int, observation: int, gates=None):
        pred = predict_belief(self.belief, action, self.model)
        if gates is not None and gates != self.gates:
            img = self.model.to_image(pred)
            self.gates = gates
            self.model, self.Q = self._solve(gates)
            pred = self.model.from_image(img)
        self.belief, reset = correct_belief(pred, action, observation, self.model)
        self.resets += int(reset)

    def belief_image(self):
        return self.model.to_image(self.belief)


def generate_trajectory(scenario: gw.Scenario, noise: gw.NoiseProfile, max_steps: int, rng, p_swap: float = 0.1) -> Trajectory:
    """Roll the QMDP expert out against the simulator."""
    expert = QMDPExpert(scenario, noise)
    traj = Trajectory(scenario)
    state = tuple(scenario.start)
    gates = scenario.map.gates
    traj.states.append(state)
    if state == tuple(scenario.goal):
        traj.success = True
        return traj
    for _ in range(max_steps):
        a = expert.act()
        res = gw.step_env(scenario, noise, state, a, gates, rng, p_swap)
        traj.actions.append(a)
        traj.observations.append(res.observation)
        if gates is not None:
            traj.gates.append(gates)
        traj.collisions += int(res.collision)
        expert.update(a, res.observation, res.gates)
        state, gates = res.state, res.gates
        traj.states.append(state)
        if res.done:
            traj.success = True
            break
    return traj


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DomainConfig:
    domain: str = "grid"  # grid | maze | dynamic
    size: int = 10
    density: float = 0.25
    stochastic: bool = False
    p_move: Optional[float] = None
    p_obs: Optional[float] = None
    p_swap: float = 0.1
    variant: str = "static"  # static | v1 | v2 (dynamic domain only)
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.domain not in ("grid", "maze", "dynamic"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain == "dynamic" and self.variant == "static":
            self.variant = "v1"

    @property
    def noise(self) -> gw.NoiseProfile:
        return gw.profile(self.stochastic, self.p_move, self.p_obs)

    @property
    def horizon(self) -> int:
        return self.max_steps if self.max_steps is not None else 4 * (self.size + self.size)

    def make_map(self, seed) -> gw.GridMap:
        if self.domain == "grid":
            return gw.gen_random_grid(self.size, self.size, self.density, seed)
        if self.domain == "maze":
            return gw.gen_prim_maze(self.size, self.size, seed)
        return gw.gen_dynamic_maze(self.size, self.size, seed)[0]


def env_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


@dataclass(eq=False)
class Dataset:
    trajectories: list
    params: dict
    maps: list
    splits: np.ndarray  # per environment: 0 train, 1 validation, 2 test
    shortfall: int = 0

    SPLIT_NAMES = ("train", "validation", "test")

    def split(self, name: str) -> list:
        code = self.SPLIT_NAMES.index(name)
        return [t for t in self.trajectories if self.splits[t.env_id] == code]

    @property
    def domain(self) -> DomainConfig:
        return DomainConfig(**self.params["domain"])

    def save(self, path):
        save_dataset(self, path)


def build_dataset(domain: DomainConfig, n_envs: int, trajs_per_env: int, seed: int,
                  val_fraction: float = 0.1, test_fraction: float = 0.0, max_tries_per_traj: int = 10) -> Dataset:
    """Expert demonstrations, keeping only the ones that reach the goal.

    Failed tasks are replaced by fresh ones up to ``max_tries_per_traj`` times
    the quota per environment; any remaining gap is reported as ``shortfall``.
    """
    if n_envs < 1 or trajs_per_env < 1:
        raise ValueError("n_envs and trajs_per_env must be positive")
    noise = domain.noise
    trajectories, maps = [], []
    shortfall = 0
    for i in range(n_envs):
        map_ss, task_ss = env_seed(seed, i).spawn(2)
        gmap = domain.make_map(map_ss)
        maps.append(gmap)
        rng = np.random.default_rng(task_ss)
        kept = 0
        for _ in range(trajs_per_env * max_tries_per_traj):
            if kept == trajs_per_env:
                break
            scen = gw.sample_task(gmap, rng, variant=domain.variant if domain.domain == "dynamic" else "static")
            traj = generate_trajectory(scen, noise, domain.horizon, rng, domain.p_swap)
            if traj.success:
                traj.env_id = i
                trajectories.append(traj)
                kept += 1
        shortfall += trajs_per_env - kept
    if shortfall:
        logger.warning("dataset short by %d trajectories", shortfall)
    order = np.random.default_rng(env_seed(seed, n_envs)).permutation(n_envs)
    splits = np.zeros(n_envs, dtype=np.int32)
    n_val = int(round(val_fraction * n_envs))
    n_test = int(round(test_fraction * n_envs))
    splits[order[:n_val]] = 1
    splits[order[n_val : n_val + n_test]] = 2
    params = {
        "domain": asdict(domain),
        "n_envs": n_envs,
        "trajs_per_env": trajs_per_env,
        "seed": seed,
        "val_fraction": val_fraction,
        "test_fraction": test_fraction,
        "max_tries_per_traj": max_tries_per_traj,
    }
    return Dataset(trajectories, params, maps, splits, shortfall)


# ---------------------------------------------------------------------------
# on-disk format: manifest.json plus one little-endian raw file per array

DATASET_FORMAT = "transnet-dataset/1"


def write_array_dir(path, arrays: dict, header: dict):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = "<f8" if arr.dtype.kind == "f" else "<i4"
        raw = arr.astype(dtype).tobytes()
        (path / f"{name}.bin").write_bytes(raw)
        entries.append({
            "name": name,
            "file": f"{name}.bin",
            "dtype": dtype,
            "shape": list(arr.shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
    manifest = dict(header)
    manifest["arrays"] = entries
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class ManifestError(ValueError):
    pass


def read_array_dir(path, expected_format: str):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path / 'manifest.json'}: {exc}") from None
    if manifest.get("format") != expected_format:
        raise ManifestError(f"format: expected {expected_format!r}, got {manifest.get('format')!r}")
    arrays = {}
    for e in manifest.get("arrays", []):
        try:
            raw = (path / e["file"]).read_bytes()
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed array entry: {exc}") from None
        except OSError as exc:
            raise ManifestError(f"{e.get('name')}: {exc}") from None
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ManifestError(f"{e['name']}: checksum mismatch")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if len(raw) != n * np.dtype(e["dtype"]).itemsize:
            raise ManifestError(f"{e['name']}: expected {n} elements, file has {len(raw)} bytes")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return manifest, arrays


def save_dataset(ds: Dataset, path):
    H = W = ds.params["domain"]["size"]
    dynamic = any(m.gates is not None for m in ds.maps)
    trajs = ds.trajectories
    arrays = {
        "maps": np.array([m.cells for m in ds.maps], dtype=np.int32).reshape(-1, H, W),
        "env_split": ds.splits.astype(np.int32),
        "traj_env": np.array([t.env_id for t in trajs], dtype=np.int32),
        "starts": np.array([t.scenario.start for t in trajs], dtype=np.int32).reshape(-1, 2),
        "goals": np.array([t.scenario.goal for t in trajs], dtype=np.int32).reshape(-1, 2),
        "beliefs": np.array([t.scenario.initial_belief for t in trajs]).reshape(-1, H, W),
        "lengths": np.array([t.steps for t in trajs], dtype=np.int32),
        "collisions": np.array([t.collisions for t in trajs], dtype=np.int32),
        "actions": np.array([a for t in trajs for a in t.actions], dtype=np.int32),
        "observations": np.array([o for t in trajs for o in t.observations], dtype=np.int32),
    }
    if dynamic:
        arrays["gate_cells"] = np.array([[c for cell in m.gates.cells for c in cell] for m in ds.maps], dtype=np.int32)
        arrays["partition"] = np.array([m.partition for m in ds.maps], dtype=np.int32)
        arrays["gate_open"] = np.array([g.open.index(True) for t in trajs for g in t.gates], dtype=np.int32)
    header = {
        "format": DATASET_FORMAT,
        "params": ds.params,
        "counts": {
            "environments": len(ds.maps),
            "trajectories": len(trajs),
            "steps": int(sum(t.steps for t in trajs)),
            "shortfall": ds.shortfall,
            "per_split": {name: len(ds.split(name)) for name in Dataset.SPLIT_NAMES},
        },
    }
    write_array_dir(path, arrays, header)


def load_dataset(path) -> Dataset:
    manifest, a = read_array_dir(path, DATASET_FORMAT)
    params = manifest["params"]
    domain = DomainConfig(**params["domain"])
    dynamic = "gate_cells" in a
    maps = []
    for i, cells in enumerate(a["maps"]):
        if dynamic:
            gc = a["gate_cells"][i]
            gates = gw.Gates(((int(gc[0]), int(gc[1])), (int(gc[2]), int(gc[3]))), (True, False))
            maps.append(gw.GridMap(cells, gates=gates, partition=a["partition"][i]))
        else:
            maps.append(gw.GridMap(cells))
    offsets = np.concatenate([[0], np.cumsum(a["lengths"])])
    trajs = []
    variant = domain.variant if domain.domain == "dynamic" else "static"
    for k in range(len(a["lengths"])):
        gmap = maps[a["traj_env"][k]]
        lo, hi = offsets[k], offsets[k + 1]
        scen = gw.Scenario(gmap, tuple(int(v) for v in a["starts"][k]), tuple(int(v) for v in a["goals"][k]),
                           a["beliefs"][k], variant)
        t = Trajectory(
            scen,
            actions=[int(v) for v in a["actions"][lo:hi]],
            observations=[int(v) for v in a["observations"][lo:hi]],
            success=True,
            collisions=int(a["collisions"][k]),
            env_id=int(a["traj_env"][k]),
        )
        if dynamic:
            t.gates = [gmap.gates if o == 0 else gmap.gates.swapped() for o in a["gate_open"][lo:hi]]
        trajs.append(t)
    counts = manifest["counts"]
    if counts["trajectories"] != len(trajs) or counts["environments"] != len(maps):
        raise ManifestError("counts do not match stored arrays")
    return Dataset(trajs, params, maps, a["env_split"], counts["shortfall"])
