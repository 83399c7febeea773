"""Imitation training: backpropagation through time over expert trajectories."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffgrid as dg
from .network import NetConfig, TransNet, TransNetParams, transition_kernels

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "transnet-checkpoint/1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 100
    lr: float = 1e-3
    kernel_lr_scale: float = 1.0  # multiplier on lr for the transition-kernel logits
    lr_decay: float = 0.5
    patience: int = 10
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    checkpoint_interval: int = 50
    seed: int = 0
    deterministic: bool = True
    early_stop: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.lr < 0 or self.kernel_lr_scale < 0 or not 0 < self.lr_decay <= 1 or self.clip_norm <= 0:
            raise ValueError("invalid optimiser settings")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    converged_epoch: Optional[int] = None

    @property
    def epochs(self):
        return len(self.train_loss)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_acc,seconds"]
        for i in range(self.epochs):
            lines.append(f"{i + 1},{self.train_loss[i]!r},{self.val_loss[i]!r},{self.val_acc[i]!r},{self.seconds[i]:.3f}")
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params: TransNetParams, lr, beta1=0.9, beta2=0.999, eps=1e-8, scales=None):
        self.lr = lr
        self.scales = scales or {}
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: TransNetParams, grads: dict):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = self.lr * self.scales.get(k, 1.0)
            params.arrays[k] = params.arrays[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_by_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def _loss_terms(net: TransNet, trajs, P):
    """Summed cross-entropy, steps, correct over a list of trajectories."""
    groups = {}
    for t in trajs:
        if t.steps > 0:
            groups.setdefault(t.scenario.shape, []).append(t)
    total, steps, correct = dg.DTensor(0.0), 0, 0
    for group in groups.values():
        l, n, c = net.batch_loss(group, P)
        total, steps, correct = dg.add(total, l), steps + n, correct + c
    return total, steps, correct


def evaluate_loss(trajs, params: TransNetParams, net: TransNet, batch_size: int = 200):
    """Mean per-step cross-entropy and argmax accuracy, forward only."""
    trajs = list(trajs)
    loss, steps, correct = 0.0, 0, 0
    P = params.tensors()
    for i in range(0, len(trajs), batch_size):
        l, n, c = _loss_terms(net, trajs[i : i + batch_size], P)
        loss += l.item()
        steps += n
        correct += c
    if steps == 0:
        return float("nan"), float("nan")
    return loss / steps, correct / steps


def split_train_val(dataset, val_fraction: float, seed: int):
    """Use the dataset's own validation split, or carve one out by environment."""
    train, val = dataset.split("train"), dataset.split("validation")
    if val:
        return train, val
    envs = sorted({t.env_id for t in train})
    order = np.random.default_rng([seed, 1]).permutation(len(envs))
    n_val = max(1, int(round(val_fraction * len(envs))))
    val_envs = {envs[i] for i in order[:n_val]}
    return [t for t in train if t.env_id not in val_envs], [t for t in train if t.env_id in val_envs]


def check_kernel_distributions(params: TransNetParams, tol=1e-12):
    P = params.tensors()
    for which in ("planner", "filter"):
        k = transition_kernels(P, which).data
        sums = k.sum(axis=(0, 1, 2))
        if not (np.all(k > 0) and np.all(np.abs(sums - 1) <= tol)):
            raise TrainingError(f"{which} kernels are not distributions")


def train(dataset, init_params: TransNetParams, config: TrainConfig, net: TransNet,
          checkpoint_dir=None, metadata: Optional[dict] = None):
    """Fit the network to the expert actions; returns ``(best_params, report)``."""
    train_set, val_set = split_train_val(dataset, config.val_fraction, config.seed)
    if not train_set:
        raise ValueError("no training trajectories")
    params = init_params.copy()
    best = params.copy()
    scales = {k: config.kernel_lr_scale for k in params.arrays if k.endswith("kernel")}
    opt = Adam(params, config.lr, scales=scales)
    report = TrainReport()
    best_val = np.inf
    stale = 0
    since_best = 0
    rng = np.random.default_rng([config.seed, 0])
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_set))
        loss_sum, steps = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            batch = [train_set[j] for j in idx]
            P = params.tensors(requires_grad=True)
            total, n, _ = _loss_terms(net, batch, P)
            if n == 0:
                continue
            if not np.isfinite(total.item()):
                _diagnose(net, batch, idx, params, epoch, checkpoint_dir)
            dg.backward(dg.mul(total, 1.0 / n))
            grads = {k: t.grad for k, t in P.items()}
            clip_by_norm(grads, config.clip_norm)
            opt.step(params, grads)
            loss_sum += total.item()
            steps += n
        check_kernel_distributions(params)
        val_loss, val_acc = evaluate_loss(val_set, params, net) if val_set else (loss_sum / steps, float("nan"))
        elapsed = time.perf_counter() - start
        report.train_loss.append(loss_sum / max(steps, 1))
        report.val_loss.append(val_loss)
        report.val_acc.append(val_acc)
        report.seconds.append(0.0 if config.deterministic else elapsed)
        report.lr.append(opt.lr)
        logger.info("epoch %d train %.4f val %.4f acc %.3f lr %.2e (%.1fs)",
                    epoch, report.train_loss[-1], val_loss, val_acc, opt.lr, elapsed)
        if val_loss < best_val:
            best_val = val_loss
            best = params.copy()
            report.best_epoch = epoch
            stale = since_best = 0
        else:
            stale += 1
            since_best += 1
            if stale >= config.patience:
                opt.lr *= config.lr_decay
                stale = 0
        if checkpoint_dir is not None and config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
            save_checkpoint(params, report, Path(checkpoint_dir) / f"epoch_{epoch:04d}", net.config,
                            epoch=epoch, metadata=metadata)
        # converged: no validation improvement over three patience windows
        if since_best >= 3 * config.patience:
            report.converged_epoch = epoch
            if config.early_stop:
                break
    return best, report


def _diagnose(net, batch, idx, params, epoch, checkpoint_dir):
    P = params.tensors()
    bad = []
    for t, j in zip(batch, idx):
        l, _, _ = _loss_terms(net, [t], P)
        if not np.isfinite(l.item()):
            bad.append(int(j))
    msg = f"non-finite loss at epoch {epoch}; offending training trajectories {bad}"
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        (Path(checkpoint_dir) / "nonfinite.json").write_text(json.dumps({"epoch": epoch, "trajectories": bad}))
    raise TrainingError(msg)


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + params.bin (little-endian float64, manifest order)


def save_checkpoint(params: TransNetParams, report: Optional[TrainReport], path, config: NetConfig,
                    epoch: Optional[int] = None, metadata: Optional[dict] = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for name, arr in params.arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(raw)
    data = b"".join(blobs)
    training = {"epoch": epoch if epoch is not None else (report.best_epoch if report else None)}
    if report is not None:
        training.update({k: v for k, v in asdict(report).items()})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "arrays": entries,
        "dtype": "<f8",
        "sha256": hashlib.sha256(data).hexdigest(),
        "training": training,
        "metadata": metadata or {},
    }
    (path / "params.bin").write_bytes(data)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if report is not None:
        (path / "report.csv").write_text(report.to_csv())


def load_checkpoint(path, config: Optional[NetConfig] = None):
    """Read a checkpoint; returns ``(params, config, manifest)``.

    Shapes are validated against ``config`` (or the stored config) and every
    mismatch is listed in the error.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"manifest: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"format: expected {CHECKPOINT_FORMAT!r}, got {manifest.get('format')!r}")
    try:
        stored = NetConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"config: {exc}") from None
    config = config or stored
    try:
        data = (path / "params.bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"params.bin: {exc}") from None
    if hashlib.sha256(data).hexdigest() != manifest.get("sha256"):
        raise CheckpointError("params.bin: checksum mismatch")
    flat = np.frombuffer(data, dtype="<f8")
    expected = config.shapes()
    problems = []
    arrays = {}
    names = [e.get("name") for e in manifest.get("arrays", [])]
    for name in expected:
        if name not in names:
            problems.append(f"{name}: missing")
    for e in manifest.get("arrays", []):
        name, shape = e.get("name"), tuple(e.get("shape", ()))
        if name not in expected:
            problems.append(f"{name}: not expected by config")
            continue
        if shape != tuple(expected[name]):
            problems.append(f"{name}: expected shape {tuple(expected[name])}, got {shape}")
            continue
        n = int(np.prod(shape))
        off = int(e.get("offset", -1))
        if off < 0 or off + n > flat.size:
            problems.append(f"{name}: offset {off} out of range")
            continue
        arrays[name] = flat[off : off + n].reshape(shape).copy()
    if problems:
        raise CheckpointError("; ".join(problems))
    params = TransNetParams({name: arrays[name] for name in expected})
    return params, config, manifest
