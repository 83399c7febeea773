"""Desk-scale experiment definitions shared by scripts/ and the acceptance suite.

Datasets and trained models are cached on disk, keyed by a hash of their full
configuration, under ``$TRANSNET_CACHE`` (default ``./.cache``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import evalharness as ev
from . import gridworld as gw
from . import qmdp_expert as qe
from . import trainer as tr
from .network import NetConfig, TransNet, TransNetParams

logger = logging.getLogger(__name__)

MAPS_DIR = Path(__file__).resolve().parents[2] / "maps"


def cache_root() -> Path:
    return Path(os.environ.get("TRANSNET_CACHE", ".cache"))


def _key(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class DataSpec:
    domain: qe.DomainConfig
    n_envs: int = 400
    trajs_per_env: int = 5
    seed: int = 0
    val_fraction: float = 0.1

    def key(self) -> str:
        return "data-" + _key(asdict(self))


@dataclass
class ModelSpec:
    data: DataSpec
    net: NetConfig = field(default_factory=NetConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    init_seed: int = 0

    def key(self) -> str:
        return f"model-c{self.net.num_classes}-" + _key(asdict(self))

    def with_classes(self, n: int) -> "ModelSpec":
        return dataclasses.replace(self, net=dataclasses.replace(self.net, num_classes=n))


@dataclass
class TrainedModel:
    spec: ModelSpec
    net: TransNet
    params: TransNetParams
    manifest: dict

    @property
    def report(self) -> dict:
        return self.manifest["training"]

    def policy(self, name: Optional[str] = None) -> ev.NetworkPolicy:
        return ev.NetworkPolicy(self.net, self.params, name or f"c{self.net.config.num_classes}")


def get_dataset(spec: DataSpec, root: Optional[Path] = None) -> qe.Dataset:
    path = Path(root or cache_root()) / spec.key()
    if (path / "manifest.json").exists():
        return qe.load_dataset(path)
    logger.info("building %s (%d envs x %d)", path.name, spec.n_envs, spec.trajs_per_env)
    ds = qe.build_dataset(spec.domain, spec.n_envs, spec.trajs_per_env, spec.seed, spec.val_fraction)
    ds.save(path)
    return ds


def get_model(spec: ModelSpec, root: Optional[Path] = None) -> TrainedModel:
    """Load the cached checkpoint for ``spec`` or train it from scratch."""
    root = Path(root or cache_root())
    path = root / spec.key()
    if (path / "manifest.json").exists():
        params, cfg, manifest = tr.load_checkpoint(path, spec.net)
        return TrainedModel(spec, TransNet(cfg), params, manifest)
    ds = get_dataset(spec.data, root)
    net = TransNet(spec.net)
    logger.info("training %s", path.name)
    best, report = tr.train(ds, net.init_params(spec.init_seed), spec.train, net)
    meta = {"spec": json.loads(json.dumps(asdict(spec), default=str))}
    tr.save_checkpoint(best, report, path, spec.net, epoch=report.best_epoch, metadata=meta)
    params, cfg, manifest = tr.load_checkpoint(path, spec.net)
    return TrainedModel(spec, TransNet(cfg), params, manifest)


# ---------------------------------------------------------------------------
# the experiment set


def grid_spec() -> ModelSpec:
    """TransNet on 400 stochastic 8x8 grids, 5 demonstrations each."""
    data = DataSpec(qe.DomainConfig(domain="grid", size=8, stochastic=True))
    return ModelSpec(data, NetConfig(K=32), tr.TrainConfig(epochs=300, lr=3e-3))


def maze_spec() -> ModelSpec:
    """Static 9x9 stochastic Prim mazes; also the V1 dynamic-maze model."""
    data = DataSpec(qe.DomainConfig(domain="maze", size=9, stochastic=True))
    return ModelSpec(data, NetConfig(K=36), tr.TrainConfig(epochs=300, lr=3e-3))


def pair(spec: ModelSpec, root=None) -> dict:
    """TransNet (|C|=16) and the uniform baseline (|C|=1) trained on the same data."""
    return {"transnet": get_model(spec.with_classes(16), root), "baseline": get_model(spec.with_classes(1), root)}


def paired_comparison(models: dict, domain: qe.DomainConfig, n: int, seed: int):
    suite = ev.make_suite(domain, n, seed)
    policies = {label: m.policy(label) for label, m in models.items()}
    return ev.compare(policies, suite)


def office_map() -> gw.GridMap:
    return gw.load_map(MAPS_DIR / "office32.pgm")


def generalization(models: dict, gmap: gw.GridMap, noise: gw.NoiseProfile, trials: int = 25, seed: int = 0):
    out = {}
    for label, m in models.items():
        out[label] = ev.eval_generalization(m.net, m.params, gmap, noise, trials, seed)[0]
    return out


def dynamic_domain(size: int = 9, stochastic: bool = True) -> qe.DomainConfig:
    return qe.DomainConfig(domain="dynamic", size=size, stochastic=stochastic, variant="v1")
