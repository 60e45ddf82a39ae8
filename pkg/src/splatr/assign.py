"""Matching shuffled objects to goal objects, planning, and scoring.

The two node memories are matched category-agnostically on appearance
alone: edge strength is the cosine of the stored embeddings. Two
strategies are provided - an optimal assignment and a sequential greedy
baseline - then matched pairs become an ordered pick-and-place plan.
The episode metric suite scores a final world state against the
initial and goal states.

Matrix-level matching (hungarian_pairs, greedy_pairs) is exposed
separately from the node-level wrappers so the algorithms can be
exercised on raw similarity matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment

from .core import WorldState
from .nodes import NodeStore, ObjectNode, refine_mask

# ── domain types ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class MatchPair:
    """One matched edge: shuffled node -> goal node with its similarity."""

    shuffled_id: int
    goal_id: int
    similarity: float

    def __post_init__(self) -> None:
        if not -1.0 <= self.similarity <= 1.0:
            raise ValueError(f"similarity {self.similarity} outside [-1, 1]")


@dataclass
class MatchResult:
    """A bipartite matching plus the leftovers on each side."""

    pairs: list[MatchPair]
    unmatched_shuffled: list[int] = field(default_factory=list)
    unmatched_goal: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        s_ids = [p.shuffled_id for p in self.pairs] + list(self.unmatched_shuffled)
        g_ids = [p.goal_id for p in self.pairs] + list(self.unmatched_goal)
        if len(set(s_ids)) != len(s_ids) or len(set(g_ids)) != len(g_ids):
            raise ValueError("node ids repeat within a side")

    @property
    def total(self) -> float:
        """Sum of pair similarities (exact: math.fsum)."""
        return math.fsum(p.similarity for p in self.pairs)


@dataclass(frozen=True)
class PlannedAction:
    """One actuation step; kinds navigate/pick/place mirror the simulator."""

    kind: str
    shuffled_id: int
    goal_id: int
    position: NDArray[np.float64] | None = None
    mask: NDArray[np.bool_] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("navigate", "pick", "place"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind in ("navigate", "place") and self.position is None:
            raise ValueError(f"{self.kind} needs a position")
        if self.kind == "pick" and self.mask is None:
            raise ValueError("pick needs a mask")


@dataclass
class RearrangePlan:
    """Ordered actions plus pairs skipped for unreachability."""

    actions: list[PlannedAction]
    skipped: list[tuple[int, int, str]] = field(default_factory=list)


@dataclass(frozen=True)
class Tolerance:
    """At-goal thresholds and the energy normalizer.

    An object is at goal when its position is within eps_pos meters and
    its openness within eps_open of the goal state. d_norm scales
    positional energy; displacement at or beyond d_norm saturates at 1.
    """

    eps_pos: float = 0.05
    eps_open: float = 0.05
    d_norm: float = 0.5

    def __post_init__(self) -> None:
        if self.eps_pos <= 0 or self.eps_open <= 0 or self.d_norm <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class EpisodeReport:
    """Episode outcome: success flag, the four ratios, per-object detail.

    misplaced may exceed 1 (the agent can disturb more objects than were
    shuffled); fixed and fixed_strict are proper ratios; fixed_strict is
    zeroed when any initially correct object ends up disturbed, so it
    never exceeds fixed.
    """

    success: int
    fixed: float
    fixed_strict: float
    misplaced: float
    energy_remaining: float
    per_object: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.success not in (0, 1):
            raise ValueError("success must be 0 or 1")
        if not 0.0 <= self.fixed <= 1.0:
            raise ValueError("fixed outside [0, 1]")
        if not 0.0 <= self.fixed_strict <= self.fixed:
            raise ValueError("fixed_strict must lie in [0, fixed]")
        if self.misplaced < 0.0:
            raise ValueError("misplaced must be nonnegative")
        if self.energy_remaining < 0.0:
            raise ValueError("energy_remaining must be nonnegative")


# ── pair similarity ────────────────────────────────────────────────────


def cosine(u: NDArray[np.float64], v: NDArray[np.float64]) -> float:
    """Cosine of two vectors, clipped into [-1, 1]; zero vectors give 0."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(u) * np.linalg.norm(v)
    if denom == 0.0:
        return 0.0
    return float(np.clip(u @ v / denom, -1.0, 1.0))


def pair_similarity(shuffled: ObjectNode, goal: ObjectNode) -> float:
    """Edge strength between a shuffled node and a goal node: embedding cosine."""
    return cosine(shuffled.embedding, goal.embedding)


# ── matrix-level matching ──────────────────────────────────────────────


def matching_total(sim: NDArray[np.float64], pairs: list[tuple[int, int]]) -> float:
    """Exact (fsum) total similarity of a pair list on a matrix."""
    sim = np.asarray(sim, dtype=np.float64)
    return math.fsum(float(sim[r, c]) for r, c in pairs)


def _completion_values(sim: NDArray[np.float64], rows: list[int], cols: list[int]) -> list[float]:
    """Similarities of an optimal matching on the given submatrix."""
    if not rows or not cols:
        return []
    sub = sim[np.ix_(rows, cols)]
    r_idx, c_idx = linear_sum_assignment(sub, maximize=True)
    return [float(sub[r, c]) for r, c in zip(r_idx, c_idx)]


def hungarian_pairs(sim: NDArray[np.float64]) -> list[tuple[int, int]]:
    """Maximum-total matching of size min(rows, cols).

    Deterministic: among equal-total matchings the sorted pair list is
    lexicographically smallest. Ties are resolved exactly by comparing
    fsum totals, fixing one row at a time: a row matches its smallest
    column that still completes to the best achievable total, and is
    left out (only possible with more rows than columns) only when that
    is strictly better than matching it.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ValueError("similarity matrix must be 2D")
    if not np.all(np.isfinite(sim)):
        raise ValueError("similarity matrix must be finite")
    rows = list(range(sim.shape[0]))
    cols = list(range(sim.shape[1]))
    chosen: list[tuple[int, int]] = []
    chosen_vals: list[float] = []
    while rows and cols:
        i = rows[0]
        best_j, best_total = None, -math.inf
        for j in cols:
            rest = _completion_values(sim, rows[1:], [c for c in cols if c != j])
            total = math.fsum(chosen_vals + [float(sim[i, j])] + rest)
            if total > best_total:
                best_j, best_total = j, total
        if len(rows) > len(cols):
            skip_total = math.fsum(chosen_vals + _completion_values(sim, rows[1:], cols))
            if skip_total > best_total:
                rows.pop(0)
                continue
        chosen.append((i, best_j))
        chosen_vals.append(float(sim[i, best_j]))
        rows.pop(0)
        cols.remove(best_j)
    return chosen


def greedy_pairs(sim: NDArray[np.float64]) -> list[tuple[int, int]]:
    """First come, first served: each row takes the best unclaimed column.

    Rows are visited in order; similarity ties go to the smallest
    column index. Rows beyond the column count stay unmatched.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ValueError("similarity matrix must be 2D")
    if not np.all(np.isfinite(sim)):
        raise ValueError("similarity matrix must be finite")
    cols = list(range(sim.shape[1]))
    pairs: list[tuple[int, int]] = []
    for i in range(sim.shape[0]):
        if not cols:
            break
        best_j = cols[0]
        for j in cols[1:]:
            if sim[i, j] > sim[i, best_j]:
                best_j = j
        pairs.append((i, best_j))
        cols.remove(best_j)
    return pairs


# ── node-level matching ────────────────────────────────────────────────


def _matching_inputs(
    shuffled: list[ObjectNode], goal: list[ObjectNode]
) -> tuple[list[ObjectNode], list[ObjectNode], NDArray[np.float64]]:
    for side, setting in ((shuffled, "shuffled"), (goal, "goal")):
        ids = [n.node_id for n in side]
        if any(i < 0 for i in ids):
            raise ValueError("nodes must carry store-assigned ids")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate node ids on the {setting} side")
        if any(n.setting != setting for n in side):
            raise ValueError(f"all nodes on the {setting} side must have that setting")
    s = sorted(shuffled, key=lambda n: n.node_id)
    g = sorted(goal, key=lambda n: n.node_id)
    sim = np.array([[pair_similarity(a, b) for b in g] for a in s], dtype=np.float64)
    sim = sim.reshape(len(s), len(g))  # keep 2D when a side is empty
    return s, g, sim


def _to_result(
    s: list[ObjectNode], g: list[ObjectNode], sim: NDArray[np.float64], raw: list[tuple[int, int]]
) -> MatchResult:
    pairs = [MatchPair(s[r].node_id, g[c].node_id, float(sim[r, c])) for r, c in raw]
    matched_r = {r for r, _ in raw}
    matched_c = {c for _, c in raw}
    return MatchResult(
        pairs=pairs,
        unmatched_shuffled=[n.node_id for k, n in enumerate(s) if k not in matched_r],
        unmatched_goal=[n.node_id for k, n in enumerate(g) if k not in matched_c],
    )


def match_hungarian(shuffled: list[ObjectNode], goal: list[ObjectNode]) -> MatchResult:
    """Optimal assignment between the two memories (maximum total cosine)."""
    s, g, sim = _matching_inputs(shuffled, goal)
    return _to_result(s, g, sim, hungarian_pairs(sim))


def match_greedy(shuffled: list[ObjectNode], goal: list[ObjectNode]) -> MatchResult:
    """Sequential first-come-first-serve assignment in node_id order."""
    s, g, sim = _matching_inputs(shuffled, goal)
    return _to_result(s, g, sim, greedy_pairs(sim))


# ── rearrangement planning ─────────────────────────────────────────────


def plan_rearrangement(
    match: MatchResult,
    store: NodeStore,
    reachable: Callable[[NDArray[np.float64]], bool] | None = None,
) -> RearrangePlan:
    """Turn matched pairs into an ordered pick-and-place action list.

    Pairs are processed by similarity descending (ties: lower shuffled
    node_id) and each emits navigate -> pick -> navigate -> place. The
    pick mask is the node's refined mask when attached, else its
    rasterized patch mask; the place pose is the goal node's center.
    Pairs whose pick or place pose fails the reachability probe are
    skipped and reported instead of planned. Unmatched nodes are left
    untouched by design.
    """
    plan = RearrangePlan(actions=[])
    ordered = sorted(match.pairs, key=lambda p: (-p.similarity, p.shuffled_id))
    for pair in ordered:
        s_node = store.get(pair.shuffled_id)
        g_node = store.get(pair.goal_id)
        if reachable is not None and not reachable(s_node.center):
            plan.skipped.append((pair.shuffled_id, pair.goal_id, "pick pose unreachable"))
            continue
        if reachable is not None and not reachable(g_node.center):
            plan.skipped.append((pair.shuffled_id, pair.goal_id, "place pose unreachable"))
            continue
        ids = dict(shuffled_id=pair.shuffled_id, goal_id=pair.goal_id)
        plan.actions.extend(
            [
                PlannedAction(kind="navigate", position=s_node.center.copy(), **ids),
                PlannedAction(kind="pick", mask=refine_mask(s_node, None), **ids),
                PlannedAction(kind="navigate", position=g_node.center.copy(), **ids),
                PlannedAction(kind="place", position=g_node.center.copy(), **ids),
            ]
        )
    return plan


# ── episode metrics ────────────────────────────────────────────────────


def _check_openability(a, b) -> None:
    if (a.openness is None) != (b.openness is None):
        raise ValueError(f"object {a.object_id} changes openability across states")


def _at_goal(obj, goal_obj, tol: Tolerance) -> bool:
    _check_openability(obj, goal_obj)
    if float(np.linalg.norm(obj.position - goal_obj.position)) > tol.eps_pos:
        return False
    if obj.openness is None:
        return True
    return abs(obj.openness - goal_obj.openness) <= tol.eps_open


def _energy(obj, goal_obj, tol: Tolerance) -> float:
    _check_openability(obj, goal_obj)
    e = min(1.0, float(np.linalg.norm(obj.position - goal_obj.position)) / tol.d_norm)
    if obj.openness is not None:
        e += abs(obj.openness - goal_obj.openness)
    return e


def metrics(
    initial: WorldState,
    final: WorldState,
    goal: WorldState,
    tol: Tolerance = Tolerance(),
) -> EpisodeReport:
    """Score an episode: how close did the final state come to the goal.

    An object is at goal when position and openness fall within tol of
    the goal state; orientation never counts (placement preserves it).
    misplaced divides finally-disturbed by initially-disturbed counts
    and reports 0 on a zero denominator (success still reflects the
    final state directly); fixed is then vacuously 1. Per-object energy
    is min(1, displacement / d_norm) plus openness misfit; zero initial
    energy reports 0 when the final energy is zero too, else 1.
    """
    ids = sorted(o.object_id for o in initial.objects)
    if ids != sorted(o.object_id for o in final.objects) or ids != sorted(
        o.object_id for o in goal.objects
    ):
        raise ValueError("initial, final, and goal must describe the same object ids")

    per_object: dict[str, dict] = {}
    init_mis, final_mis, fixed_ok, disturbed = [], [], [], []
    e_init, e_final = [], []
    for oid in ids:
        o_i, o_f, o_g = initial.get(oid), final.get(oid), goal.get(oid)
        at_i, at_f = _at_goal(o_i, o_g, tol), _at_goal(o_f, o_g, tol)
        ei, ef = _energy(o_i, o_g, tol), _energy(o_f, o_g, tol)
        per_object[oid] = {
            "initially_at_goal": at_i,
            "finally_at_goal": at_f,
            "energy_initial": ei,
            "energy_final": ef,
        }
        if not at_i:
            init_mis.append(oid)
            if at_f:
                fixed_ok.append(oid)
        elif not at_f:
            disturbed.append(oid)
        if not at_f:
            final_mis.append(oid)
        e_init.append(ei)
        e_final.append(ef)

    success = int(not final_mis)
    misplaced = len(final_mis) / len(init_mis) if init_mis else 0.0
    fixed = len(fixed_ok) / len(init_mis) if init_mis else 1.0
    fixed_strict = 0.0 if disturbed else fixed
    total_i, total_f = math.fsum(e_init), math.fsum(e_final)
    if total_i > 0.0:
        energy_remaining = total_f / total_i
    else:
        energy_remaining = 0.0 if total_f == 0.0 else 1.0
    return EpisodeReport(
        success=success,
        fixed=fixed,
        fixed_strict=fixed_strict,
        misplaced=misplaced,
        energy_remaining=energy_remaining,
        per_object=per_object,
    )
