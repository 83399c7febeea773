"""The planner/filter network with class-selected transition kernels.

Tensors are laid out ``(..., H, W, C)``. Kernel channels are ordered
``a * |C| + c``, so reshaping a convolution result to ``(..., H, W, |A|, |C|)``
separates the action and class axes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffgrid as dg
from .gridworld import BIT_DIRECTIONS, MOVES, NUM_ACTIONS, NUM_OBS


# ---------------------------------------------------------------------------
# state classification


def neighbor_feature(action: int) -> Callable:
    """Feature: is the neighbouring cell in direction ``action`` an obstacle (off-grid counts)."""
    dy, dx = MOVES[action]

    def feature(obstacles):
        H, W = obstacles.shape[-2:]
        lead = [(0, 0)] * (obstacles.ndim - 2)
        padded = np.pad(obstacles, lead + [(1, 1), (1, 1)], constant_values=1)
        return padded[..., 1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W].astype(np.int64)

    feature.__name__ = f"obstacle_{'_NESW'[action]}"
    return feature


@dataclass(frozen=True)
class ClassificationSpec:
    """Features f_1..f_N of the obstacle image, each valued in 0..M."""

    features: tuple = ()
    M: int = 1

    @property
    def num_classes(self) -> int:
        return (self.M + 1) ** len(self.features)


def default_classifier(num_classes: int = 16) -> ClassificationSpec:
    """Neighbour-obstacle bits in N, S, E, W order; ``num_classes`` picks how many (1, 2, 4, 8, 16)."""
    n = int(np.log2(num_classes)) if num_classes > 0 else -1
    if n < 0 or 2**n != num_classes or n > len(BIT_DIRECTIONS):
        raise ValueError(f"num_classes must be one of 1, 2, 4, 8, 16, got {num_classes}")
    return ClassificationSpec(tuple(neighbor_feature(a) for a in BIT_DIRECTIONS[:n]), M=1)


def class_image(theta, spec: ClassificationSpec) -> np.ndarray:
    """c(s) = sum_i (M+1)^(i-1) f_i(s) for every cell, from the obstacle channel of theta."""
    theta = theta.data if isinstance(theta, dg.DTensor) else np.asarray(theta)
    obstacles = theta[..., 0]
    out = np.zeros(obstacles.shape, dtype=np.int64)
    for i, f in enumerate(spec.features):
        v = f(obstacles)
        if v.min(initial=0) < 0 or v.max(initial=0) > spec.M:
            raise ValueError(f"feature {i + 1} outside 0..{spec.M}")
        out += (spec.M + 1) ** i * v
    return out


def classify(theta, spec: ClassificationSpec):
    """Class image and its one-hot encoding ``(..., H, W, |C|)``."""
    img = class_image(theta, spec)
    return img, dg.one_hot(img, spec.num_classes)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class NetConfig:
    K: int = 32
    k: int = 3
    gamma: float = 0.99
    tie_kernels: bool = False
    hidden: int = 16
    num_classes: int = 16
    theta_channels: int = 2
    num_actions: int = NUM_ACTIONS
    num_obs: int = NUM_OBS

    def __post_init__(self):
        if self.k % 2 == 0 or self.k < 1:
            raise ValueError("kernel width must be odd")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def shapes(self) -> dict:
        k, h, ci = self.k, self.hidden, self.theta_channels
        kern = (k, k, 1, self.num_actions * self.num_classes)
        out = {"planner_kernel": kern}
        if not self.tie_kernels:
            out["filter_kernel"] = kern
        out.update({
            "reward_w1": (3, 3, ci, h),
            "reward_b1": (h,),
            "reward_w2": (3, 3, h, self.num_actions),
            "reward_b2": (self.num_actions,),
            "obs_w1": (3, 3, ci, h),
            "obs_b1": (h,),
            "obs_w2": (3, 3, h, self.num_obs),
            "obs_b2": (self.num_obs,),
        })
        return out

    def to_dict(self):
        return asdict(self)


@dataclass
class TransNetParams:
    """Named float64 arrays, in a fixed order (the checkpoint order)."""

    arrays: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: NetConfig, rng) -> "TransNetParams":
        rng = np.random.default_rng(rng)
        arrays = {}
        for name, shape in config.shapes().items():
            if name.endswith("kernel"):
                arrays[name] = 0.01 * rng.standard_normal(shape)
            elif "_b" in name:
                arrays[name] = np.zeros(shape)
            else:
                fan_in = shape[0] * shape[1] * shape[2]
                scale = np.sqrt(2.0 / fan_in) if name.endswith("w1") else np.sqrt(1.0 / fan_in)
                arrays[name] = scale * rng.standard_normal(shape)
        return cls(arrays)

    @classmethod
    def zeros(cls, config: NetConfig) -> "TransNetParams":
        return cls({n: np.zeros(s) for n, s in config.shapes().items()})

    def copy(self) -> "TransNetParams":
        return TransNetParams({k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, requires_grad=False) -> dict:
        return {k: dg.DTensor(v.copy() if requires_grad else v, requires_grad) for k, v in self.arrays.items()}

    def num_weights(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def __getitem__(self, name):
        return self.arrays[name]


def _as_params(params) -> dict:
    if isinstance(params, TransNetParams):
        return params.tensors()
    return params


# ---------------------------------------------------------------------------
# building blocks


def transition_kernels(params, which: str = "planner") -> dg.DTensor:
    """Per-(action, class) k x k distributions via a spatial softmax of the raw weights."""
    P = _as_params(params)
    raw = P["planner_kernel"] if which == "planner" or "filter_kernel" not in P else P["filter_kernel"]
    if which not in ("planner", "filter"):
        raise ValueError(f"which must be 'planner' or 'filter', got {which!r}")
    k, _, _, n = raw.shape
    flat = dg.reshape(raw, (k * k, n))
    return dg.reshape(dg.softmax(flat, axis=0), (k, k, 1, n))


def _two_layer(theta, P, prefix):
    h = dg.relu(dg.add(dg.conv2d(theta, P[prefix + "_w1"]), P[prefix + "_b1"]))
    return dg.add(dg.conv2d(h, P[prefix + "_w2"]), P[prefix + "_b2"])


def reward_image(theta, params) -> dg.DTensor:
    """Per-cell, per-action reward estimate ``(..., H, W, |A|)``."""
    return _two_layer(theta, _as_params(params), "reward")


def obs_image(theta, params) -> dg.DTensor:
    """Per-cell observation distribution ``(..., H, W, |O|)``."""
    return dg.softmax(_two_layer(theta, _as_params(params), "obs"), axis=-1)


def _select_class(U, onehot, num_actions):
    """(..., H, W, A*C) convolution output -> (..., H, W, A) by picking each cell's class."""
    lead_hw = U.shape[:-1]
    C = onehot.shape[-1]
    U = dg.reshape(U, lead_hw + (num_actions, C))
    mask = onehot.data.reshape(onehot.shape[:-1] + (1, C))
    return dg.sum_axis(dg.mul(U, mask), axis=-1)


def _theta_tensor(theta):
    return theta if isinstance(theta, dg.DTensor) else dg.DTensor(theta)


def plan(theta, params, config: NetConfig, spec: Optional[ClassificationSpec] = None,
         classes=None, kernels=None, fused: bool = True) -> dg.DTensor:
    """K value-iteration blocks; returns the final Q image ``(..., H, W, |A|)``.

    ``fused`` gathers each cell's kernels once and runs a per-cell
    correlation; otherwise every (a, c) channel is convolved and the cell's
    class is picked by a one-hot multiply and a sum over classes. Both give
    the same values.
    """
    P = _as_params(params)
    theta = _theta_tensor(theta)
    if classes is None:
        classes = class_image(theta, spec or default_classifier(config.num_classes))
    if kernels is None:
        kernels = transition_kernels(P, "planner")
    A, C = config.num_actions, config.num_classes
    R = reward_image(theta, P)
    V = dg.channel_max(R)
    Q = R
    if fused:
        per_cell = dg.cell_kernels(kernels, np.arange(A) * C + classes[..., None])
        step = lambda V: dg.local_conv(V, per_cell)  # noqa: E731
    else:
        onehot = dg.one_hot(classes, C)
        step = lambda V: _select_class(dg.conv2d(V, kernels), onehot, A)  # noqa: E731
    for _ in range(config.K):
        Q = dg.add(R, dg.mul(step(V), config.gamma))
        V = dg.channel_max(Q)
    return Q


def _index_last(x, idx, depth):
    """x[..., idx] for per-batch integer ``idx`` (shape = x's leading batch shape)."""
    oh = dg.one_hot(np.asarray(idx), depth).data
    oh = oh.reshape(oh.shape[:-1] + (1, 1, depth))
    return dg.sum_axis(dg.mul(x, oh), axis=-1, keepdims=True)


def belief_update(b, action, observation, theta, params, config: NetConfig,
                  spec: Optional[ClassificationSpec] = None, classes=None, kernels=None, obs=None,
                  fused: bool = True):
    """One filter step. ``b`` is ``(..., H, W, 1)``; action/observation are ints or
    per-batch int arrays. Returns ``(b_next, reset)``."""
    P = _as_params(params)
    b = b if isinstance(b, dg.DTensor) else dg.DTensor(b)
    if classes is None:
        classes = class_image(theta, spec or default_classifier(config.num_classes))
    if kernels is None:
        kernels = transition_kernels(P, "filter")
    if obs is None:
        obs = obs_image(_theta_tensor(theta), P)
    A, C = config.num_actions, config.num_classes
    if fused:
        act = np.asarray(action).reshape(np.shape(action) + (1, 1))
        per_cell = dg.cell_kernels(kernels, (act * C + classes)[..., None])
        moved = dg.local_conv(b, per_cell)
    else:
        U = _select_class(dg.conv2d(b, kernels), dg.one_hot(classes, C), A)
        moved = _index_last(U, action, A)
    likelihood = _index_last(obs, observation, config.num_obs)
    return dg.normalize(dg.mul(moved, likelihood), axis=(-3, -2, -1))


def select_action(b, Q) -> dg.DTensor:
    """Action scores sum_s b(s) Q(s, a), used as logits."""
    return dg.sum_axis(dg.mul(b, Q), axis=(-3, -2))


# ---------------------------------------------------------------------------
# uniform-kernel reference (one kernel per action, no classification)


def plan_uniform(theta, params, config: NetConfig) -> dg.DTensor:
    P = _as_params(params)
    theta = _theta_tensor(theta)
    kernels = transition_kernels(P, "planner")
    R = reward_image(theta, P)
    V = dg.channel_max(R)
    Q = R
    for _ in range(config.K):
        Q = dg.add(R, dg.mul(dg.conv2d(V, kernels), config.gamma))
        V = dg.channel_max(Q)
    return Q


def belief_update_uniform(b, action, observation, theta, params, config: NetConfig):
    P = _as_params(params)
    b = b if isinstance(b, dg.DTensor) else dg.DTensor(b)
    moved = _index_last(dg.conv2d(b, transition_kernels(P, "filter")), action, config.num_actions)
    likelihood = _index_last(obs_image(_theta_tensor(theta), P), observation, config.num_obs)
    return dg.normalize(dg.mul(moved, likelihood), axis=(-3, -2, -1))


# ---------------------------------------------------------------------------
# network


class TransNet:
    """Planner + filter pair sharing one classification spec and config."""

    def __init__(self, config: NetConfig, spec: Optional[ClassificationSpec] = None, fused: bool = True):
        self.config = config
        self.fused = fused
        self.spec = spec or default_classifier(config.num_classes)
        if self.spec.num_classes != config.num_classes:
            raise ValueError("classification spec and config disagree on |C|")
        self.plan_calls = 0

    def init_params(self, seed) -> TransNetParams:
        return TransNetParams.init(self.config, seed)

    def context(self, theta, P):
        """Per-theta tensors reused across planning and filtering."""
        theta = _theta_tensor(theta)
        return {"theta": theta, "classes": class_image(theta, self.spec), "obs": obs_image(theta, P)}

    def plan(self, ctx, P, kernels=None):
        self.plan_calls += 1
        return plan(ctx["theta"], P, self.config, classes=ctx["classes"], kernels=kernels, fused=self.fused)

    def belief_update(self, b, action, observation, ctx, P, kernels=None):
        return belief_update(b, action, observation, ctx["theta"], P, self.config,
                             classes=ctx["classes"], kernels=kernels, obs=ctx["obs"], fused=self.fused)

    def forward_trajectory(self, traj, params):
        """Per-step action logits for an expert trajectory, replanning only when theta changes."""
        P = _as_params(params)
        kp = transition_kernels(P, "planner")
        kf = transition_kernels(P, "filter")
        b = dg.DTensor(traj.scenario.initial_belief[..., None])
        logits = []
        prev_theta, ctx, Q = None, None, None
        for t, (a, o) in enumerate(zip(traj.actions, traj.observations)):
            theta = traj.theta(t)
            if prev_theta is None or not np.array_equal(theta, prev_theta):
                ctx = self.context(theta, P)
                Q = self.plan(ctx, P, kp)
                prev_theta = theta
            logits.append(select_action(b, Q))
            b, _ = self.belief_update(b, a, o, ctx, P, kf)
        return logits

    def trajectory_loss(self, traj, params):
        """Summed per-step cross-entropy, step count and number of correct argmaxes."""
        logits = self.forward_trajectory(traj, params)
        total = dg.DTensor(0.0)
        correct = 0
        for lg, a in zip(logits, traj.actions):
            total = dg.add(total, dg.cross_entropy(lg, a))
            correct += int(np.argmax(lg.data) == a)
        return total, len(logits), correct

    def batch_loss(self, trajs, params):
        """Trajectories of one map size, run as a single batch.

        Returns ``(summed cross-entropy, steps, correct)``. Trajectories are
        processed longest first so that finished ones can drop off the end of
        the batch; rows whose theta changes are replanned on their own.
        """
        P = _as_params(params)
        trajs = sorted(trajs, key=lambda t: -t.steps)
        lengths = np.array([t.steps for t in trajs])
        B, T = len(trajs), int(lengths.max(initial=0))
        acts = np.zeros((B, T), dtype=np.int64)
        obs = np.zeros((B, T), dtype=np.int64)
        for i, t in enumerate(trajs):
            acts[i, : t.steps] = t.actions
            obs[i, : t.steps] = t.observations
        dynamic = any(t.dynamic for t in trajs)
        thetas = np.stack([t.theta(0) for t in trajs])
        ctx = self.context(thetas, P)
        classes, obs_img = ctx["classes"], ctx["obs"]
        kp = transition_kernels(P, "planner")
        kf = transition_kernels(P, "filter")
        Q = self.plan(ctx, P, kp)
        b = dg.DTensor(np.stack([t.scenario.initial_belief for t in trajs])[..., None])
        total = dg.DTensor(0.0)
        correct = 0
        n = B
        for t in range(T):
            n_t = int((lengths > t).sum())
            if n_t < n:
                n = n_t
                b, Q, obs_img = dg.head(b, n), dg.head(Q, n), dg.head(obs_img, n)
                classes, thetas = classes[:n], thetas[:n]
            if dynamic and t > 0:
                new = np.stack([tr.theta(t) for tr in trajs[:n]])
                rows = np.flatnonzero((new != thetas).reshape(n, -1).any(axis=1))
                if len(rows):
                    thetas = new
                    sub = self.context(new[rows], P)
                    Q = dg.put_rows(Q, rows, self.plan(sub, P, kp))
                    obs_img = dg.put_rows(obs_img, rows, sub["obs"])
                    classes = classes.copy()
                    classes[rows] = sub["classes"]
            lg = select_action(b, Q)
            total = dg.add(total, dg.sum_axis(dg.cross_entropy(lg, acts[:n, t])))
            correct += int((np.argmax(lg.data, axis=-1) == acts[:n, t]).sum())
            if t + 1 < T:
                step_ctx = {"theta": None, "classes": classes, "obs": obs_img}
                b, _ = self.belief_update(b, acts[:n, t], obs[:n, t], step_ctx, P, kf)
        return total, int(lengths.sum()), correct
