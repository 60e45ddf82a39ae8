"""Occupancy mapping, goal sampling, and fast-marching navigation.

The exploration loop alternates three pure operations on a 2D cell grid:
update_map folds bump and traversal evidence into the map, sample_goal
draws a uniform target from the unknown-but-reachable region, and
plan_path traces a steepest-descent route on a fast-marching distance
field. Unknown cells count as traversable for planning, otherwise no
route could ever reach an unexplored goal; obstacles are discovered by
bumping into them, which keeps the agent close to the things it maps.

Cells are (row, col) pairs; row indexes world y and col indexes world x.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .core import CameraView, PointCloud

# ── cell states ────────────────────────────────────────────────────────

UNKNOWN = 0
FREE = 1
OBSTACLE = 2

Cell = tuple[int, int]

_SQRT2 = float(np.sqrt(2.0))
# cells this close to the source (euclidean, in cells) get their exact
# distance at initialization; upwind error is worst right at the source
_EXACT_INIT_RADIUS = 4


# ── domain types ───────────────────────────────────────────────────────


@dataclass
class OccupancyMap:
    """Grid of unknown / free / obstacle cells anchored in the world.

    Parameters
    ----------
    grid : NDArray[np.int8]
        (H, W) cell states, one of UNKNOWN, FREE, OBSTACLE.
    resolution : float
        Edge length of a cell in meters.
    origin : NDArray[np.float64]
        World (x, y) of the outer corner of cell (0, 0).
    """

    grid: NDArray[np.int8]
    resolution: float = 0.05
    origin: NDArray[np.float64] = None  # type: ignore[assignment]

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int8)
        if self.grid.ndim != 2:
            raise ValueError("grid must be 2D")
        if not np.isin(self.grid, (UNKNOWN, FREE, OBSTACLE)).all():
            raise ValueError("grid holds an undefined cell state")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = (
            np.zeros(2) if self.origin is None else np.asarray(self.origin, dtype=np.float64)
        )
        if self.origin.shape != (2,):
            raise ValueError("origin must be a world (x, y) pair")

    @staticmethod
    def blank(height: int, width: int, resolution: float = 0.05, origin=None) -> "OccupancyMap":
        return OccupancyMap(
            np.full((height, width), UNKNOWN, dtype=np.int8), resolution, origin
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def copy(self) -> "OccupancyMap":
        return OccupancyMap(self.grid.copy(), self.resolution, self.origin.copy())

    def world_to_cell(self, xy) -> Cell:
        xy = np.asarray(xy, dtype=np.float64)
        col = int(np.floor((xy[0] - self.origin[0]) / self.resolution))
        row = int(np.floor((xy[1] - self.origin[1]) / self.resolution))
        return row, col

    def cell_to_world(self, cell: Cell) -> NDArray[np.float64]:
        """World (x, y) of the cell center."""
        row, col = cell
        return self.origin + (np.array([col, row]) + 0.5) * self.resolution

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.grid.shape[0] and 0 <= c < self.grid.shape[1]


@dataclass(frozen=True)
class MapEvidence:
    """One step's worth of map observations.

    traversed cells were physically occupied by the agent; blocked is the
    cell a forward bump reported, if any.
    """

    traversed: tuple[Cell, ...] = ()
    blocked: Cell | None = None


@dataclass
class TraceStep:
    """Everything recorded at one exploration timestep."""

    index: int
    view: CameraView
    position: NDArray[np.float64]  # agent world position, (3,)
    yaw: float  # heading about world +z, radians
    image: NDArray[np.float64] | None = None  # (H, W, 3) in [0, 1]
    depth: NDArray[np.float64] | None = None  # (H, W) meters, 0 = no hit


@dataclass
class AgentTrace:
    """Append-only per-step record with strictly increasing indices."""

    steps: list[TraceStep] = field(default_factory=list)

    def append(self, step: TraceStep) -> None:
        if self.steps and step.index <= self.steps[-1].index:
            raise ValueError("trace step indices must strictly increase")
        self.steps.append(step)

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def frames(self) -> list[tuple[CameraView, NDArray[np.float64]]]:
        """(view, image) pairs for every step that captured an image."""
        return [(s.view, s.image) for s in self.steps if s.image is not None]


# ── map updates ────────────────────────────────────────────────────────


def update_map(occ: OccupancyMap, agent_cell: Cell, evidence: MapEvidence) -> OccupancyMap:
    """Fold one step of evidence into a copy of the map.

    Traversed cells become free and a bumped cell becomes an obstacle;
    every other cell keeps its state. The agent's own cell can never be
    declared an obstacle.
    """
    agent_cell = (int(agent_cell[0]), int(agent_cell[1]))
    out = occ.copy()
    for cell in evidence.traversed:
        if not occ.in_bounds(cell):
            raise ValueError(f"traversed cell {cell} is outside the map")
        out.grid[cell] = FREE
    if evidence.blocked is not None:
        blocked = (int(evidence.blocked[0]), int(evidence.blocked[1]))
        if blocked == agent_cell:
            raise ValueError("cannot mark the agent's own cell as an obstacle")
        if not occ.in_bounds(blocked):
            raise ValueError(f"blocked cell {blocked} is outside the map")
        out.grid[blocked] = OBSTACLE
    return out


# ── goal sampling ──────────────────────────────────────────────────────


def reachable_unknown(occ: OccupancyMap) -> NDArray[np.bool_]:
    """Mask of unknown cells connected to explored free space.

    Connectivity is 4-neighbor over non-obstacle cells, so a goal may sit
    deep inside unexplored territory as long as no known obstacle seals
    it off from the free region.
    """
    open_mask = occ.grid != OBSTACLE
    labels, n = ndimage.label(open_mask)
    if n == 0:
        return np.zeros(occ.grid.shape, dtype=bool)
    free_labels = np.unique(labels[occ.grid == FREE])
    reach = open_mask & np.isin(labels, free_labels[free_labels > 0])
    return reach & (occ.grid == UNKNOWN)


def sample_goal(occ: OccupancyMap, rng: np.random.Generator) -> Cell | None:
    """Uniform draw from reachable unknown cells; None once exhausted."""
    candidates = np.argwhere(reachable_unknown(occ))
    if candidates.shape[0] == 0:
        return None
    r, c = candidates[rng.integers(candidates.shape[0])]
    return int(r), int(c)


# ── fast marching ──────────────────────────────────────────────────────


def _upwind_value(T: NDArray[np.float64], r: int, c: int, h: float) -> float:
    # first-order quadratic update from the smaller neighbor per axis
    H, W = T.shape
    a = min(
        T[r - 1, c] if r > 0 else np.inf,
        T[r + 1, c] if r + 1 < H else np.inf,
    )
    b = min(
        T[r, c - 1] if c > 0 else np.inf,
        T[r, c + 1] if c + 1 < W else np.inf,
    )
    if a > b:
        a, b = b, a
    if not np.isfinite(a):
        return np.inf
    if b - a >= h:
        return a + h
    return 0.5 * (a + b + np.sqrt(2.0 * h * h - (b - a) * (b - a)))


def fmm_distance(occ: OccupancyMap, source: Cell) -> NDArray[np.float64]:
    """Eikonal distance field |grad T| = 1 from source, in meters.

    First-order upwind updates driven by a priority queue over free and
    unknown cells; obstacle cells stay at +inf. Cells in a small
    obstacle-free disk around the source are seeded with their exact
    euclidean distance, which removes most of the near-source
    discretization error before it can propagate.
    """
    source = (int(source[0]), int(source[1]))
    grid = occ.grid
    if not occ.in_bounds(source):
        raise ValueError("source is outside the map")
    if grid[source] == OBSTACLE:
        raise ValueError("source cell is an obstacle")
    h = occ.resolution
    H, W = grid.shape
    open_mask = grid != OBSTACLE

    T = np.full((H, W), np.inf)
    sr, sc = source
    R = _EXACT_INIT_RADIUS
    r0, r1 = max(0, sr - R), min(H, sr + R + 1)
    c0, c1 = max(0, sc - R), min(W, sc + R + 1)
    if open_mask[r0:r1, c0:c1].all():
        rr, cc = np.mgrid[r0:r1, c0:c1]
        d2 = (rr - sr) ** 2 + (cc - sc) ** 2
        seed = d2 <= R * R
        T[rr[seed], cc[seed]] = h * np.sqrt(d2[seed])
    else:
        T[source] = 0.0

    heap = [(T[r, c], r, c) for r, c in zip(*np.nonzero(np.isfinite(T)))]
    heapq.heapify(heap)
    known = np.zeros((H, W), dtype=bool)
    while heap:
        t, r, c = heapq.heappop(heap)
        if known[r, c] or t > T[r, c]:
            continue
        known[r, c] = True
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < H and 0 <= cc < W):
                continue
            if not open_mask[rr, cc] or known[rr, cc]:
                continue
            cand = _upwind_value(T, rr, cc, h)
            if cand < T[rr, cc]:
                T[rr, cc] = cand
                heapq.heappush(heap, (cand, rr, cc))
    return T


# ── path planning ──────────────────────────────────────────────────────

_OFFSETS8 = (
    (-1, 0), (1, 0), (0, -1), (0, 1),
    (-1, -1), (-1, 1), (1, -1), (1, 1),
)


def plan_path(occ: OccupancyMap, start: Cell, goal: Cell) -> list[Cell]:
    """Steepest-descent trace on fmm_distance(goal), start to goal.

    The path never enters an obstacle and the field value strictly
    decreases along it. Diagonal moves are refused when both orthogonal
    side cells are obstacles, so the route cannot slip between two
    corner-touching walls.
    """
    start = (int(start[0]), int(start[1]))
    goal = (int(goal[0]), int(goal[1]))
    if occ.grid[start] == OBSTACLE:
        raise ValueError("start cell is an obstacle")
    field_ = fmm_distance(occ, goal)
    if not np.isfinite(field_[start]):
        raise ValueError("goal is not reachable from start")
    H, W = occ.grid.shape
    path = [start]
    cur = start
    for _ in range(H * W):
        if cur == goal:
            return path
        r, c = cur
        best = None
        best_val = field_[cur]
        for dr, dc in _OFFSETS8:
            rr, cc = r + dr, c + dc
            if not (0 <= rr < H and 0 <= cc < W):
                continue
            if dr != 0 and dc != 0:
                if occ.grid[r + dr, c] == OBSTACLE and occ.grid[r, c + dc] == OBSTACLE:
                    continue
            if field_[rr, cc] < best_val:
                best = (rr, cc)
                best_val = field_[rr, cc]
        if best is None:
            raise RuntimeError("descent stalled; distance field is inconsistent")
        cur = best
        path.append(cur)
    raise RuntimeError("descent exceeded the cell count; field has a cycle")


def path_length(path: list[Cell], resolution: float) -> float:
    """Meters along a cell path: orthogonal steps h, diagonal steps h*sqrt(2)."""
    total = 0.0
    for (r0, c0), (r1, c1) in zip(path[:-1], path[1:]):
        total += _SQRT2 if (r0 != r1 and c0 != c1) else 1.0
    return total * resolution


# ── point cloud thinning ───────────────────────────────────────────────


def voxel_downsample(pc: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel: centroid position, mean color."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    if len(pc) == 0:
        return PointCloud.empty()
    keys = np.floor(pc.points / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    n = uniq.shape[0]
    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    points = np.zeros((n, 3))
    colors = np.zeros((n, 3))
    for d in range(3):
        points[:, d] = np.bincount(inverse, weights=pc.points[:, d], minlength=n)
        colors[:, d] = np.bincount(inverse, weights=pc.colors[:, d], minlength=n)
    return PointCloud(points=points / counts[:, None], colors=colors / counts[:, None])
