"""Grid navigation domains: map generators, ground-truth POMDPs, simulator, map files."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage, sparse

ACTIONS = ("stay", "north", "east", "south", "west")
MOVES = np.array([(0, 0), (-1, 0), (0, 1), (1, 0), (0, -1)])
STAY, NORTH, EAST, SOUTH, WEST = range(5)
NUM_ACTIONS = len(ACTIONS)
# observation / class bit weights, in N, S, E, W order
BIT_DIRECTIONS = (NORTH, SOUTH, EAST, WEST)
NUM_OBS = 16

FREE, OBSTACLE = 0, 1


class MapFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Gates:
    cells: tuple  # ((y, x), (y, x))
    open: tuple = (True, False)

    def __post_init__(self):
        if sum(self.open) != 1:
            raise ValueError("exactly one gate must be open")

    @property
    def open_cell(self):
        return self.cells[self.open.index(True)]

    @property
    def closed_cell(self):
        return self.cells[self.open.index(False)]

    def swapped(self) -> "Gates":
        return Gates(self.cells, (self.open[1], self.open[0]))


@dataclass(eq=False)
class GridMap:
    """Occupancy grid. ``cells`` holds 0 for free and 1 for obstacle.

    In dynamic mazes the two gate cells are stored as free; ``render`` closes
    the currently closed one.
    """

    cells: np.ndarray
    gates: Optional[Gates] = None
    partition: Optional[np.ndarray] = None

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int32)
        if self.cells.ndim != 2:
            raise ValueError("cells must be a 2-d array")

    @property
    def height(self):
        return self.cells.shape[0]

    @property
    def width(self):
        return self.cells.shape[1]

    @property
    def shape(self):
        return self.cells.shape

    def render(self, gates: Optional[Gates] = None) -> np.ndarray:
        gates = gates if gates is not None else self.gates
        out = self.cells.copy()
        if gates is not None:
            y, x = gates.closed_cell
            out[y, x] = OBSTACLE
        return out

    def free_cells(self, gates: Optional[Gates] = None):
        return np.argwhere(self.render(gates) == FREE)

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        same_part = (self.partition is None) == (other.partition is None) and (
            self.partition is None or np.array_equal(self.partition, other.partition)
        )
        return np.array_equal(self.cells, other.cells) and self.gates == other.gates and same_part


# ---------------------------------------------------------------------------
# connectivity helpers


def components(cells: np.ndarray):
    """Label 4-connected free components; returns (labels, count)."""
    labels, n = ndimage.label(np.asarray(cells) == FREE)
    return labels, n


def is_connected(cells: np.ndarray) -> bool:
    return components(cells)[1] == 1


def bfs_distances(cells: np.ndarray, source) -> np.ndarray:
    """Shortest 4-connected path lengths from ``source`` over free cells; -1 if unreachable."""
    H, W = cells.shape
    dist = np.full((H, W), -1, dtype=np.int64)
    dist[source] = 0
    q = deque([tuple(source)])
    while q:
        y, x = q.popleft()
        for dy, dx in MOVES[1:]:
            ny, nx = y + dy, x + dx
            if 0 <= ny < H and 0 <= nx < W and cells[ny, nx] == FREE and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                q.append((ny, nx))
    return dist


def shortest_path(cells: np.ndarray, start, goal):
    """One shortest path as a list of cells, or None when unreachable."""
    dist = bfs_distances(cells, goal)
    if dist[tuple(start)] < 0:
        return None
    path = [tuple(start)]
    y, x = start
    while (y, x) != tuple(goal):
        for dy, dx in MOVES[1:]:
            ny, nx = y + dy, x + dx
            if 0 <= ny < cells.shape[0] and 0 <= nx < cells.shape[1] and dist[ny, nx] == dist[y, x] - 1:
                y, x = ny, nx
                break
        path.append((y, x))
    return path


# ---------------------------------------------------------------------------
# generators


def gen_random_grid(H: int, W: int, density: float, rng_seed) -> GridMap:
    """Random obstacles, then repaired until the free space is connected.

    Repair repeatedly takes the smallest free component and clears the
    obstacles along the shortest obstacle path to any other component.
    """
    if H < 4 or W < 4:
        raise ValueError("grid must be at least 4x4")
    if not 0 <= density < 0.5:
        raise ValueError("density must lie in [0, 0.5)")
    rng = np.random.default_rng(rng_seed)
    cells = (rng.random((H, W)) < density).astype(np.int32)
    if not (cells == FREE).any():
        raise ValueError("no free cell in generated grid")
    while True:
        labels, n = components(cells)
        if n <= 1:
            break
        sizes = np.bincount(labels.ravel())[1:]
        smallest = int(np.argmin(sizes)) + 1
        _bridge(cells, labels, smallest)
    return GridMap(cells)


def _bridge(cells, labels, comp):
    H, W = cells.shape
    parent = {}
    q = deque()
    for y, x in np.argwhere(labels == comp):
        parent[(y, x)] = None
        q.append((y, x))
    while q:
        y, x = q.popleft()
        for dy, dx in MOVES[1:]:
            ny, nx = y + dy, x + dx
            if not (0 <= ny < H and 0 <= nx < W) or (ny, nx) in parent:
                continue
            parent[(ny, nx)] = (y, x)
            if labels[ny, nx] not in (0, comp):
                node = (y, x)
                while labels[node] != comp:
                    cells[node] = FREE
                    node = parent[node]
                return
            q.append((ny, nx))
    raise RuntimeError("no other component reachable")


def _prim_carve(cells, rows, cols, rng):
    """Randomized Prim over lattice cells (odd coordinates) inside ``rows`` x ``cols``."""
    lattice = [(y, x) for y in rows for x in cols]
    inside = set(lattice)
    start = lattice[rng.integers(len(lattice))]
    visited = {start}
    cells[start] = FREE
    frontier = []

    def push_walls(c):
        y, x = c
        for dy, dx in MOVES[1:]:
            n = (y + 2 * dy, x + 2 * dx)
            if n in inside and n not in visited:
                frontier.append((c, n))

    push_walls(start)
    while frontier:
        a, b = frontier.pop(rng.integers(len(frontier)))
        if b in visited:
            continue
        visited.add(b)
        cells[b] = FREE
        cells[(a[0] + b[0]) // 2, (a[1] + b[1]) // 2] = FREE
        push_walls(b)


def _check_maze_dims(H, W):
    if H < 5 or W < 5 or H % 2 == 0 or W % 2 == 0:
        raise ValueError(f"maze dimensions must be odd and >= 5, got {H}x{W}")


def gen_prim_maze(H: int, W: int, rng_seed) -> GridMap:
    """Perfect maze on the odd-coordinate lattice, surrounded by a wall border."""
    _check_maze_dims(H, W)
    rng = np.random.default_rng(rng_seed)
    cells = np.ones((H, W), dtype=np.int32)
    _prim_carve(cells, range(1, H, 2), range(1, W, 2), rng)
    return GridMap(cells)


def gen_dynamic_maze(H: int, W: int, rng_seed, max_retries: int = 50):
    """Two independently carved maze halves joined by two gate cells in a dividing wall.

    The wall runs through the middle third of the maze, vertically or
    horizontally. Gate A starts open. Returns ``(map, partition)`` where
    ``partition`` labels the two halves 0 and 1 and everything else -1.
    """
    _check_maze_dims(H, W)
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_retries):
        vertical = bool(rng.integers(2))
        span = W if vertical else H
        lo, hi = span // 3, (2 * span) // 3
        choices = [i for i in range(max(lo, 2), min(hi, span - 3) + 1) if i % 2 == 0]
        if not choices:
            continue
        wall = choices[rng.integers(len(choices))]
        cells = np.ones((H, W), dtype=np.int32)
        if vertical:
            _prim_carve(cells, range(1, H, 2), range(1, wall, 2), rng)
            _prim_carve(cells, range(1, H, 2), range(wall + 1, W, 2), rng)
            slots = [(y, wall) for y in range(1, H, 2)]
        else:
            _prim_carve(cells, range(1, wall, 2), range(1, W, 2), rng)
            _prim_carve(cells, range(wall + 1, H, 2), range(1, W, 2), rng)
            slots = [(wall, x) for x in range(1, W, 2)]
        if len(slots) < 2:
            continue
        i, j = rng.choice(len(slots), size=2, replace=False)
        gates = Gates((slots[i], slots[j]), (True, False))
        base = cells.copy()
        labels, n = components(base)
        if n != 2:
            continue
        part = np.where(labels > 0, labels - 1, -1)
        for c in gates.cells:
            cells[c] = FREE
        gmap = GridMap(cells, gates=gates, partition=part)
        if not (is_connected(gmap.render(gates)) and is_connected(gmap.render(gates.swapped()))):
            continue
        return gmap, part
    raise RuntimeError(f"no valid dynamic maze after {max_retries} attempts")


def gate_step(gates: Gates, p_swap: float, rng) -> Gates:
    """Swap open and closed gates with probability ``p_swap``."""
    return gates.swapped() if rng.random() < p_swap else gates


# ---------------------------------------------------------------------------
# tasks


@dataclass(eq=False)
class Scenario:
    """A map plus start, goal and initial belief (H x W image).

    ``variant`` is "static", "v1" or "v2"; it only changes how gates show up
    in ``theta``.
    """

    map: GridMap
    start: tuple
    goal: tuple
    initial_belief: np.ndarray
    variant: str = "static"

    @property
    def shape(self):
        return self.map.shape

    def theta(self, gates: Optional[Gates] = None) -> np.ndarray:
        return render_theta(self.map, self.goal, gates if gates is not None else self.map.gates, self.variant)


def theta_channels(variant: str) -> int:
    return 3 if variant == "v2" else 2


def render_theta(gmap: GridMap, goal, gates: Optional[Gates], variant: str = "static") -> np.ndarray:
    """Network input image: obstacles, goal, and for V2 the open gate."""
    H, W = gmap.shape
    theta = np.zeros((H, W, theta_channels(variant)))
    theta[..., 0] = gmap.render(gates)
    theta[goal[0], goal[1], 1] = 1.0
    if variant == "v2" and gates is not None:
        y, x = gates.open_cell
        theta[y, x, 2] = 1.0
    return theta


def uniform_belief(cells: np.ndarray) -> np.ndarray:
    free = (np.asarray(cells) == FREE).astype(np.float64)
    return free / free.sum()


def sample_task(gmap: GridMap, rng, variant: Optional[str] = None, min_distance: int = 0) -> Scenario:
    """Distinct free start and goal; dynamic maps put them in opposite halves.

    ``min_distance`` is an L1 lower bound between start and goal, relaxed to
    the largest feasible value when the map cannot meet it.
    """
    if variant is None:
        variant = "v1" if gmap.gates is not None else "static"
    rendered = gmap.render()
    free = np.argwhere(rendered == FREE)
    if gmap.gates is not None:
        gate_set = set(gmap.gates.cells)
        free = np.array([c for c in free if tuple(c) not in gate_set])
    if len(free) < 2:
        raise ValueError("need at least two free cells")
    if gmap.partition is not None:
        side = gmap.partition[free[:, 0], free[:, 1]]
        a, b = free[side == 0], free[side == 1]
        if rng.random() < 0.5:
            a, b = b, a
        start = tuple(int(v) for v in a[rng.integers(len(a))])
        goal = tuple(int(v) for v in b[rng.integers(len(b))])
    else:
        if min_distance > 0:
            tries = 0
            while True:
                i = rng.integers(len(free))
                d = np.abs(free - free[i]).sum(-1)
                far = np.flatnonzero(d >= min_distance)
                if len(far):
                    j = far[rng.integers(len(far))]
                    break
                tries += 1
                if tries % 100 == 0:
                    min_distance -= 1
        else:
            i, j = rng.choice(len(free), size=2, replace=False)
        start = tuple(int(v) for v in free[i])
        goal = tuple(int(v) for v in free[j])
    return Scenario(gmap, start, goal, uniform_belief(rendered), variant)


# ---------------------------------------------------------------------------
# ground-truth model


@dataclass(frozen=True)
class NoiseProfile:
    p_move: float = 1.0
    p_obs: float = 0.0
    step_reward: float = -0.1
    collision_reward: float = -1.0
    goal_reward: float = 1.0
    gamma: float = 0.99

    @property
    def name(self):
        return "deterministic" if self.p_move == 1.0 and self.p_obs == 0.0 else "stochastic"


DETERMINISTIC = NoiseProfile(p_move=1.0, p_obs=0.0)
STOCHASTIC = NoiseProfile(p_move=0.8, p_obs=0.1)


def profile(stochastic: bool, p_move=None, p_obs=None) -> NoiseProfile:
    base = STOCHASTIC if stochastic else DETERMINISTIC
    return replace(
        base,
        p_move=base.p_move if p_move is None else p_move,
        p_obs=base.p_obs if p_obs is None else p_obs,
    )


def neighbor_bits(cells: np.ndarray) -> np.ndarray:
    """Per-cell 4-bit code of obstacles to the N, S, E, W (off-grid counts as obstacle)."""
    occ = np.pad(np.asarray(cells) != FREE, 1, constant_values=True)
    H, W = cells.shape
    code = np.zeros((H, W), dtype=np.int64)
    for bit, a in enumerate(BIT_DIRECTIONS):
        dy, dx = MOVES[a]
        code |= occ[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W].astype(np.int64) << bit
    return code


def observation_matrix(p_obs: float) -> np.ndarray:
    """P(observed code | true code) for independent bit flips, 16 x 16."""
    codes = np.arange(NUM_OBS)
    diff = codes[:, None] ^ codes[None, :]
    flips = np.array([bin(v).count("1") for v in range(NUM_OBS)])[diff]
    return (p_obs**flips) * ((1.0 - p_obs) ** (4 - flips))


@dataclass(eq=False)
class GroundTruthPOMDP:
    """Tabular POMDP. ``T[a]`` is an |S| x |S| sparse matrix, ``Z`` is (|S|, |A|, |O|).

    Grid-built models also carry the cell layout (``cells``, ``index``) and
    the move outcome tables used by the simulator.
    """

    T: list
    Z: np.ndarray
    R: np.ndarray
    gamma: float
    cells: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None
    goal: Optional[int] = None
    successor: Optional[np.ndarray] = None
    blocked: Optional[np.ndarray] = None
    noise: Optional[NoiseProfile] = None
    extra: dict = field(default_factory=dict)

    @property
    def num_states(self):
        return self.R.shape[0]

    @property
    def num_actions(self):
        return self.R.shape[1]

    @property
    def num_obs(self):
        return self.Z.shape[2]

    @classmethod
    def from_dense(cls, T, Z, R, gamma) -> "GroundTruthPOMDP":
        T = np.asarray(T, dtype=np.float64)
        Z = np.asarray(Z, dtype=np.float64)
        R = np.asarray(R, dtype=np.float64)
        if not 0 < gamma < 1:
            raise ValueError("discount must lie in (0, 1)")
        return cls([sparse.csr_matrix(T[:, a, :]) for a in range(T.shape[1])], Z, R, gamma)

    def stacked_T(self):
        """All actions in one (|A| * |S|) x |S| matrix, rows ordered (a, s)."""
        if "stacked_T" not in self.extra:
            self.extra["stacked_T"] = sparse.vstack(self.T, format="csr")
        return self.extra["stacked_T"]

    def dense_T(self) -> np.ndarray:
        return np.stack([t.toarray() for t in self.T], axis=1)

    def to_image(self, vec) -> np.ndarray:
        img = np.zeros(self.index.shape)
        img[self.cells[:, 0], self.cells[:, 1]] = vec
        return img

    def from_image(self, img) -> np.ndarray:
        return np.asarray(img)[self.cells[:, 0], self.cells[:, 1]]


def build_pomdp(gmap, goal, noise_profile: NoiseProfile = DETERMINISTIC, gates=None) -> GroundTruthPOMDP:
    """Ground-truth model over the free cells of ``gmap`` (rendered with ``gates``)."""
    cells_img = gmap.render(gates) if isinstance(gmap, GridMap) else np.asarray(gmap)
    H, W = cells_img.shape
    goal = tuple(goal)
    if cells_img[goal] != FREE:
        raise ValueError(f"goal {goal} is not a free cell")
    cells = np.argwhere(cells_img == FREE)
    S = len(cells)
    index = np.full((H, W), -1, dtype=np.int64)
    index[cells[:, 0], cells[:, 1]] = np.arange(S)
    g = int(index[goal])
    pm = noise_profile.p_move

    successor = np.zeros((S, NUM_ACTIONS), dtype=np.int64)
    blocked = np.zeros((S, NUM_ACTIONS), dtype=bool)
    for a in range(NUM_ACTIONS):
        ty = cells[:, 0] + MOVES[a][0]
        tx = cells[:, 1] + MOVES[a][1]
        inside = (ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)
        tgt = np.full(S, -1)
        tgt[inside] = index[ty[inside], tx[inside]]
        blocked[:, a] = tgt < 0
        successor[:, a] = np.where(tgt < 0, np.arange(S), tgt)
    successor[g, :] = g
    blocked[g, :] = False

    rows = np.arange(S)
    T = []
    for a in range(NUM_ACTIONS):
        if a == STAY:
            T.append(sparse.identity(S, format="csr"))
            continue
        p_succ = np.where(rows == g, 0.0, pm)
        m = sparse.coo_matrix((p_succ, (rows, successor[:, a])), shape=(S, S))
        m = m + sparse.coo_matrix((1.0 - p_succ, (rows, rows)), shape=(S, S))
        T.append(m.tocsr())

    R = np.where(blocked, noise_profile.collision_reward, noise_profile.step_reward)
    R[g, :] = noise_profile.goal_reward

    true_obs = neighbor_bits(cells_img)[cells[:, 0], cells[:, 1]]
    Zs = observation_matrix(noise_profile.p_obs)[true_obs]  # (S, O)
    Z = np.repeat(Zs[:, None, :], NUM_ACTIONS, axis=1)

    return GroundTruthPOMDP(
        T=T,
        Z=Z,
        R=R.astype(np.float64),
        gamma=noise_profile.gamma,
        cells=cells,
        index=index,
        goal=g,
        successor=successor,
        blocked=blocked,
        noise=noise_profile,
        extra={"true_obs": true_obs},
    )


# ---------------------------------------------------------------------------
# simulator


class StepResult(NamedTuple):
    state: tuple
    observation: int
    collision: bool
    reward: float
    gates: Optional[Gates]
    done: bool


class GridEnv:
    """Ground-truth simulator for one scenario.

    Every step draws the same number of random variates whatever the action,
    so policies fed the same stream face the same noise.
    """

    def __init__(self, scenario: Scenario, noise: NoiseProfile = DETERMINISTIC, p_swap: float = 0.1):
        self.scenario = scenario
        self.noise = noise
        self.p_swap = p_swap

    def step(self, state, action: int, gates: Optional[Gates], rng) -> StepResult:
        return step_env(self.scenario, self.noise, state, action, gates, rng, self.p_swap)


def observe(cells: np.ndarray, state, p_obs: float, rng) -> int:
    true = int(neighbor_bits_at(cells, state))
    flips = rng.random(4) < p_obs
    return true ^ int(sum(int(f) << i for i, f in enumerate(flips)))


def neighbor_bits_at(cells, state) -> int:
    H, W = cells.shape
    y, x = state
    code = 0
    for bit, a in enumerate(BIT_DIRECTIONS):
        ny, nx = y + MOVES[a][0], x + MOVES[a][1]
        if not (0 <= ny < H and 0 <= nx < W) or cells[ny, nx] != FREE:
            code |= 1 << bit
    return code


def step_env(scenario: Scenario, noise: NoiseProfile, state, action: int, gates, rng, p_swap: float = 0.1) -> StepResult:
    """Sample one transition, gate update, and observation."""
    gmap = scenario.map
    cells = gmap.render(gates)
    state = tuple(state)
    H, W = cells.shape
    u = rng.random()
    collision = False
    nxt = state
    if state != tuple(scenario.goal) and action != STAY and u < noise.p_move:
        ty, tx = state[0] + MOVES[action][0], state[1] + MOVES[action][1]
        if 0 <= ty < H and 0 <= tx < W and cells[ty, tx] == FREE:
            nxt = (int(ty), int(tx))
        else:
            collision = True
    if gates is not None:
        new_gates = gate_step(gates, p_swap, rng)
        # never close a gate on the agent
        if new_gates.closed_cell == nxt:
            new_gates = gates
        gates = new_gates
        cells = gmap.render(gates)
    obs = observe(cells, nxt, noise.p_obs, rng)
    done = nxt == tuple(scenario.goal)
    if done:
        reward = noise.goal_reward
    elif collision:
        reward = noise.collision_reward
    else:
        reward = noise.step_reward
    return StepResult(nxt, obs, collision, reward, gates, done)


# ---------------------------------------------------------------------------
# map files


def load_map(path, downsample: int = 1) -> GridMap:
    """Read an ASCII grid ("H W" then rows of 0/1) or a binary PGM (P5).

    PGM pixels darker than 127 (on a 0-255 scale) are obstacles. With
    ``downsample`` d > 1, each d x d block becomes an obstacle if any of its
    pixels is one.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"P5":
        cells = _parse_pgm(raw)
    else:
        cells = _parse_ascii(raw.decode("ascii", errors="replace"))
    if downsample > 1:
        cells = downsample_map(cells, downsample)
    return GridMap(cells)


def downsample_map(cells: np.ndarray, d: int) -> np.ndarray:
    H, W = cells.shape
    Hd, Wd = -(-H // d), -(-W // d)
    padded = np.zeros((Hd * d, Wd * d), dtype=np.int32)
    padded[:H, :W] = cells
    return padded.reshape(Hd, d, Wd, d).max(axis=(1, 3))


def _parse_ascii(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines:
        raise MapFormatError("line 1: empty file")
    head = lines[0].split()
    if len(head) != 2 or not all(h.isdigit() for h in head):
        raise MapFormatError(f"line 1: expected 'H W', got {lines[0]!r}")
    H, W = int(head[0]), int(head[1])
    rows = lines[1 : 1 + H]
    if len(rows) < H:
        raise MapFormatError(f"line {len(lines) + 1}: expected {H} rows, got {len(rows)}")
    cells = np.zeros((H, W), dtype=np.int32)
    for i, row in enumerate(rows):
        row = row.rstrip("\r")
        if len(row) != W:
            raise MapFormatError(f"line {i + 2}: expected {W} characters, got {len(row)}")
        for j, ch in enumerate(row):
            if ch not in "01":
                raise MapFormatError(f"line {i + 2}, column {j + 1}: invalid character {ch!r}")
            cells[i, j] = int(ch)
    return cells


def _parse_pgm(raw: bytes) -> np.ndarray:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise MapFormatError(f"byte {pos}: truncated PGM header")
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tok = raw[start:pos]
        if not tok.isdigit():
            raise MapFormatError(f"byte {start}: expected integer in PGM header, got {tok!r}")
        tokens.append(int(tok))
    pos += 1  # single whitespace before raster
    W, H, maxval = tokens
    if not 0 < maxval <= 255:
        raise MapFormatError(f"PGM maxval must be in 1..255, got {maxval}")
    if len(raw) - pos < H * W:
        raise MapFormatError(f"byte {len(raw)}: raster needs {H * W} bytes, found {len(raw) - pos}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=H * W, offset=pos).reshape(H, W)
    scaled = pix.astype(np.float64) * (255.0 / maxval)
    return (scaled < 127).astype(np.int32)


def write_pgm(path, image: np.ndarray, maxval: int = 255):
    """Write an 8-bit grayscale image as binary PGM."""
    img = np.asarray(image, dtype=np.uint8)
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        f.write(img.tobytes())


def save_map(path, gmap: GridMap):
    """Write a map: ``.pgm`` as an image (free white, obstacles black), otherwise ASCII."""
    cells = gmap.cells if isinstance(gmap, GridMap) else np.asarray(gmap)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, np.where(cells == FREE, 255, 0))
    else:
        H, W = cells.shape
        lines = [f"{H} {W}"] + ["".join(str(int(v)) for v in row) for row in cells]
        path.write_text("\n".join(lines) + "\n")
