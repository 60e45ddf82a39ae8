"""Deterministic synthetic room simulator with posed RGB-D observations.

Scenes are desk-scale rooms: a gray floor, four tinted walls, and a
handful of flat-shaded two-tone boxes and spheres resting on the floor.
observe() ray-casts every pixel analytically, so depth is metrically
exact and backprojected points land on the true surfaces. act() models a
discrete agent (0.25 m steps, 90 degree turns) that navigates free
space, picks a visible object through an image mask, and places the
held object at a pose.

Everything is a pure function of (scene, inputs): the same seed and
action sequence always reproduce bit-identical world state. There is no
physics beyond spawn-time overlap checks, and openness is a scalar that
only tints an openable box's lid; nothing articulates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .core import CameraView, ObjectState, WorldState
from .explore import FREE, OBSTACLE, OccupancyMap

AGENT_STEP = 0.25
AGENT_RADIUS = 0.18
SPAWN_CLEARANCE = 0.02

FLOOR_COLOR = np.array([0.52, 0.52, 0.52])
# one tint per wall (+x, -x, +y, -y) so viewpoints are tellable apart
WALL_COLORS = np.array(
    [[0.66, 0.62, 0.60], [0.60, 0.64, 0.66], [0.63, 0.66, 0.60], [0.62, 0.60, 0.66]]
)
LIGHT_DIR = np.array([0.35, 0.20, 0.91]) / np.linalg.norm([0.35, 0.20, 0.91])

# saturated and mutually distant: the "distinct color" pool for easy scenes
PALETTE = np.array(
    [
        [0.82, 0.12, 0.10],
        [0.10, 0.25, 0.80],
        [0.10, 0.65, 0.15],
        [0.85, 0.75, 0.10],
        [0.75, 0.10, 0.70],
        [0.10, 0.70, 0.72],
        [0.88, 0.45, 0.08],
        [0.45, 0.12, 0.75],
        [0.55, 0.35, 0.12],
        [0.15, 0.40, 0.35],
    ]
)
# hue pairs close enough to confuse appearance matching in ambiguous scenes
NEAR_PAIRS = np.array(
    [
        [[0.82, 0.12, 0.10], [0.80, 0.22, 0.10]],
        [[0.10, 0.25, 0.80], [0.12, 0.33, 0.78]],
        [[0.10, 0.65, 0.15], [0.16, 0.62, 0.12]],
    ]
)

DIFFICULTIES = ("easy", "ambiguous")
# heading h faces (cos, sin) of h * 90 degrees
HEADING_VECS = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])

# ── quaternion helpers ─────────────────────────────────────────────────


def yaw_quat(yaw: float) -> NDArray[np.float64]:
    """Unit wxyz quaternion for a rotation of yaw radians about world +z."""
    return np.array([np.cos(yaw / 2.0), 0.0, 0.0, np.sin(yaw / 2.0)])


def quat_to_matrix(q: NDArray[np.float64]) -> NDArray[np.float64]:
    """Rotation matrix of a unit wxyz quaternion (local -> world)."""
    w, x, y, z = np.asarray(q, dtype=np.float64).reshape(4)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ── domain types ───────────────────────────────────────────────────────


@dataclass
class SceneObject:
    """One movable object: geometry, two-tone paint, and rigid state.

    Boxes use size as full (x, y, z) edge lengths in the object frame;
    spheres use size[0] as the diameter. color covers one half of every
    face, color2 the other, which gives patch descriptors something to
    see without leaving flat shading. An openable box blends its lid
    toward interior_color as openness rises.
    """

    object_id: str
    shape: str
    size: NDArray[np.float64]
    color: NDArray[np.float64]
    color2: NDArray[np.float64]
    state: ObjectState
    openable: bool = False
    interior_color: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown shape {self.shape!r}")
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError("object size must be positive")
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.color2 = np.asarray(self.color2, dtype=np.float64).reshape(3)
        if self.openable and self.interior_color is None:
            raise ValueError("openable objects need an interior color")
        if self.openable and self.shape != "box":
            raise ValueError("only boxes can be openable")
        if self.state.object_id != self.object_id:
            raise ValueError("object/state id mismatch")

    @property
    def footprint_radius(self) -> float:
        """Conservative xy circumradius used for clearance checks."""
        if self.shape == "sphere":
            return float(self.size[0]) / 2.0
        return float(np.hypot(self.size[0], self.size[1])) / 2.0

    def copy(self) -> "SceneObject":
        return SceneObject(
            object_id=self.object_id,
            shape=self.shape,
            size=self.size.copy(),
            color=self.color.copy(),
            color2=self.color2.copy(),
            state=ObjectState(
                object_id=self.object_id,
                position=self.state.position.copy(),
                orientation=self.state.orientation.copy(),
                openness=self.state.openness,
            ),
            openable=self.openable,
            interior_color=None if self.interior_color is None else self.interior_color.copy(),
        )


@dataclass
class SynthScene:
    """A room, its objects, and the embodied agent.

    extents are the full room dimensions; the floor spans
    [-x/2, x/2] x [-y/2, y/2] at z = 0 and walls rise to z = extents[2].
    The agent camera sits eye_height above agent_xy, faces heading * 90
    degrees, and pitches pitch_deg down.
    """

    extents: NDArray[np.float64]
    objects: list[SceneObject]
    seed: int
    agent_xy: NDArray[np.float64]
    agent_heading: int = 0
    held: str | None = None
    steps: int = 0
    width: int = 128
    height: int = 128
    # 100 degree square fov: any floor object is inside some heading's
    # frustum (worst case 45 degrees off-axis) and the floor is visible
    # from 0.25 m out, so nearby objects stay pickable
    hfov_deg: float = 100.0
    eye_height: float = 1.1
    pitch_deg: float = 30.0

    def __post_init__(self) -> None:
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if np.any(self.extents <= 0):
            raise ValueError("room extents must be positive")
        self.agent_xy = np.asarray(self.agent_xy, dtype=np.float64).reshape(2)
        if self.agent_heading not in (0, 1, 2, 3):
            raise ValueError("heading must be one of 0..3")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object ids")
        half = self.extents[:2] / 2.0
        for obj in self.objects:
            margin = half - obj.footprint_radius
            if np.any(np.abs(obj.state.position[:2]) > margin + 1e-9):
                raise ValueError(f"object {obj.object_id} outside the room")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1 :]:
                gap = a.footprint_radius + b.footprint_radius
                if np.linalg.norm(a.state.position[:2] - b.state.position[:2]) < gap:
                    raise ValueError(f"objects {a.object_id}/{b.object_id} interpenetrate")

    def get(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(f"no object with id {object_id}")

    def world_state(self) -> WorldState:
        return WorldState(
            objects=[
                ObjectState(
                    object_id=o.object_id,
                    position=o.state.position.copy(),
                    orientation=o.state.orientation.copy(),
                    openness=o.state.openness,
                )
                for o in self.objects
            ]
        )

    def copy(self) -> "SynthScene":
        return replace(
            self,
            extents=self.extents.copy(),
            objects=[o.copy() for o in self.objects],
            agent_xy=self.agent_xy.copy(),
        )


@dataclass(frozen=True)
class ObjectMove:
    """One shuffled object: any subset of position / orientation / openness."""

    object_id: str
    position: NDArray[np.float64] | None = None
    orientation: NDArray[np.float64] | None = None
    openness_delta: float | None = None


@dataclass
class ShuffleSpec:
    """The full difference between goal and shuffled settings."""

    moves: list[ObjectMove] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [m.object_id for m in self.moves]
        if len(set(ids)) != len(ids):
            raise ValueError("an object may appear in a shuffle only once")
        if len(self.moves) > 5:
            raise ValueError("at most 5 objects may be shuffled")


@dataclass(frozen=True)
class Navigate:
    """Walk to the free cell nearest target_xy, then face heading."""

    target_xy: NDArray[np.float64]
    heading: int


@dataclass(frozen=True)
class Pick:
    """Grab the object dominating a boolean mask over the current view."""

    mask: NDArray[np.bool_]


@dataclass(frozen=True)
class Place:
    """Put the held object down with its position set to pose."""

    position: NDArray[np.float64]


@dataclass(frozen=True)
class ActResult:
    """Outcome of one act() call; scene is unchanged when ok is False."""

    scene: SynthScene
    ok: bool
    reason: str = ""


# ── scene generation ───────────────────────────────────────────────────


def _resting_z(shape: str, size: NDArray[np.float64]) -> float:
    return float(size[2]) / 2.0 if shape == "box" else float(size[0]) / 2.0


def _spawn_cell_xy(extents: NDArray[np.float64]) -> NDArray[np.float64]:
    # corner-most interior lattice cell; generation keeps it clear
    occ = _blank_room_map(extents)
    return occ.cell_to_world((1, 1))


def _blank_room_map(extents: NDArray[np.float64]) -> OccupancyMap:
    cols = int(round(extents[0] / AGENT_STEP))
    rows = int(round(extents[1] / AGENT_STEP))
    grid = np.full((rows, cols), FREE, dtype=np.int8)
    return OccupancyMap(grid, AGENT_STEP, origin=-extents[:2] / 2.0)


def _cell_centers(occ: OccupancyMap) -> NDArray[np.float64]:
    """(rows, cols, 2) world xy of every cell center."""
    jj, ii = np.meshgrid(np.arange(occ.shape[1]), np.arange(occ.shape[0]))
    return np.stack(
        [
            occ.origin[0] + (jj + 0.5) * occ.resolution,
            occ.origin[1] + (ii + 0.5) * occ.resolution,
        ],
        axis=2,
    )


def occupancy(scene: SynthScene) -> OccupancyMap:
    """Ground-truth traversability at the agent's step resolution.

    A cell is an obstacle when its center comes within the agent radius
    of a wall or of any not-held object's footprint circle.
    """
    occ = _blank_room_map(scene.extents)
    centers = _cell_centers(occ)
    half = scene.extents[:2] / 2.0
    near_wall = np.any(np.abs(centers) > half - AGENT_RADIUS, axis=2)
    occ.grid[near_wall] = OBSTACLE
    for obj in scene.objects:
        if obj.object_id == scene.held:
            continue
        reach = obj.footprint_radius + AGENT_RADIUS
        d = np.linalg.norm(centers - obj.state.position[:2], axis=2)
        occ.grid[d < reach] = OBSTACLE
    return occ


def _clearance_ok(
    xy: NDArray[np.float64],
    radius: float,
    others: list[tuple[NDArray[np.float64], float]],
    extents: NDArray[np.float64],
    spawn_xy: NDArray[np.float64],
) -> bool:
    half = extents[:2] / 2.0
    if np.any(np.abs(xy) > half - radius - SPAWN_CLEARANCE):
        return False
    if np.linalg.norm(xy - spawn_xy) < radius + AGENT_RADIUS + 2 * SPAWN_CLEARANCE:
        return False
    return all(
        np.linalg.norm(xy - oxy) >= radius + oradius + SPAWN_CLEARANCE
        for oxy, oradius in others
    )


def _all_objects_reachable(scene: SynthScene) -> bool:
    """Every object must have a free cell within a step of its footprint,
    connected to the agent spawn."""
    occ = occupancy(scene)
    labels, _ = ndimage.label(occ.grid == FREE)
    spawn_label = labels[occ.world_to_cell(scene.agent_xy)]
    if spawn_label == 0:
        return False
    centers = _cell_centers(occ)
    for obj in scene.objects:
        d = np.linalg.norm(centers - obj.state.position[:2], axis=2)
        near = (labels == spawn_label) & (
            d < obj.footprint_radius + AGENT_RADIUS + 2 * AGENT_STEP
        )
        if not near.any():
            return False
    return True


def generate_scene(seed: int, difficulty: str = "easy") -> SynthScene:
    """Deterministically build a room for one episode.

    easy rooms hold 4-6 objects with mutually distinct colors; ambiguous
    rooms hold 5-7 including one visually identical twin pair and one
    near-hue pair, which is what stresses appearance matching.
    """
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    rng = np.random.default_rng(seed)
    extents = np.array([4.0, 4.0, 2.4])
    spawn_xy = _spawn_cell_xy(extents)

    for _ in range(200):
        if difficulty == "easy":
            n = int(rng.integers(4, 7))
            order = rng.permutation(len(PALETTE))[:n]
            colors = [PALETTE[i] for i in order]
            twins: list[int] = []
        else:
            n = int(rng.integers(5, 8))
            pair = NEAR_PAIRS[int(rng.integers(len(NEAR_PAIRS)))]
            order = rng.permutation(len(PALETTE))[: n - 4]
            # twin pair first (identical), then the near-hue pair
            colors = [pair[0], pair[0], pair[1], pair[1] * 0.97 + 0.03] + [
                PALETTE[i] for i in order
            ]
            twins = [0, 1]

        objects: list[SceneObject] = []
        placed: list[tuple[NDArray[np.float64], float]] = []
        ok = True
        openable_slot = int(rng.integers(n)) if rng.random() < 0.5 else -1
        for k in range(n):
            if k in twins and k > twins[0]:
                ref = objects[twins[0]]
                shape, size = ref.shape, ref.size.copy()
            else:
                shape = "box" if rng.random() < 0.75 else "sphere"
                if shape == "box":
                    size = rng.uniform(0.16, 0.30, size=3)
                else:
                    size = np.full(3, rng.uniform(0.16, 0.26))
            radius = (
                float(size[0]) / 2.0 if shape == "sphere" else float(np.hypot(size[0], size[1])) / 2.0
            )
            xy = None
            for _ in range(80):
                cand = rng.uniform(-extents[:2] / 2 + 0.5, extents[:2] / 2 - 0.5)
                if _clearance_ok(cand, radius, placed, extents, spawn_xy):
                    xy = cand
                    break
            if xy is None:
                ok = False
                break
            placed.append((xy, radius))
            color = np.asarray(colors[k], dtype=np.float64)
            openable = shape == "box" and k == openable_slot and k not in twins
            yaw = float(rng.uniform(0.0, 2 * np.pi))
            objects.append(
                SceneObject(
                    object_id=f"obj{k}",
                    shape=shape,
                    size=size,
                    color=color,
                    color2=color * 0.62,
                    state=ObjectState(
                        object_id=f"obj{k}",
                        position=np.array([xy[0], xy[1], _resting_z(shape, size)]),
                        orientation=yaw_quat(yaw),
                        openness=0.0 if openable else None,
                    ),
                    openable=openable,
                    interior_color=np.array([0.15, 0.13, 0.12]) if openable else None,
                )
            )
        if not ok:
            continue
        scene = SynthScene(
            extents=extents, objects=objects, seed=seed, agent_xy=spawn_xy.copy()
        )
        if _all_objects_reachable(scene):
            return scene
    raise RuntimeError(f"could not lay out a valid scene for seed {seed}")


def sample_shuffle(scene: SynthScene, k: int, seed: int) -> ShuffleSpec:
    """Draw a position-only shuffle of k objects, each moved >= 0.5 m.

    Shuffled poses honor the same clearance rules as spawn, and the
    resulting room keeps every object reachable from the agent spawn.
    """
    if not 1 <= k <= min(5, len(scene.objects)):
        raise ValueError("k must lie in 1..min(5, object count)")
    rng = np.random.default_rng(seed)
    extents = scene.extents

    for _ in range(300):
        chosen = rng.choice(len(scene.objects), size=k, replace=False)
        chosen = sorted(int(i) for i in chosen)
        moves: list[ObjectMove] = []
        current = {
            o.object_id: (o.state.position[:2].copy(), o.footprint_radius)
            for o in scene.objects
        }
        ok = True
        for idx in chosen:
            obj = scene.objects[idx]
            old_xy = obj.state.position[:2]
            others = [v for oid, v in current.items() if oid != obj.object_id]
            xy = None
            for _ in range(80):
                cand = rng.uniform(-extents[:2] / 2 + 0.5, extents[:2] / 2 - 0.5)
                if np.linalg.norm(cand - old_xy) < 0.5:
                    continue
                if _clearance_ok(cand, obj.footprint_radius, others, extents, scene.agent_xy):
                    xy = cand
                    break
            if xy is None:
                ok = False
                break
            current[obj.object_id] = (xy, obj.footprint_radius)
            moves.append(
                ObjectMove(
                    object_id=obj.object_id,
                    position=np.array([xy[0], xy[1], obj.state.position[2]]),
                )
            )
        if not ok:
            continue
        spec = ShuffleSpec(moves=moves)
        if _all_objects_reachable(shuffle(scene, spec)):
            return spec
    raise RuntimeError(f"could not sample a valid shuffle for seed {seed}")


def shuffle(scene: SynthScene, spec: ShuffleSpec) -> SynthScene:
    """Apply a shuffle: listed objects change state, all else bit-identical."""
    out = scene.copy()
    for move in spec.moves:
        obj = out.get(move.object_id)  # raises KeyError for unknown ids
        if move.position is not None:
            obj.state.position = np.asarray(move.position, dtype=np.float64).reshape(3)
        if move.orientation is not None:
            q = np.asarray(move.orientation, dtype=np.float64).reshape(4)
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ValueError("shuffle orientation must be a unit quaternion")
            obj.state.orientation = q
        if move.openness_delta is not None:
            if not obj.openable:
                raise ValueError(f"object {move.object_id} is not openable")
            new = obj.state.openness + move.openness_delta
            if not 0.0 <= new <= 1.0:
                raise ValueError("openness delta leaves [0, 1]")
            obj.state.openness = new
    # re-validate room containment and interpenetration on the new layout
    return SynthScene(
        extents=out.extents,
        objects=out.objects,
        seed=out.seed,
        agent_xy=out.agent_xy,
        agent_heading=out.agent_heading,
        held=out.held,
        steps=out.steps,
        width=out.width,
        height=out.height,
        hfov_deg=out.hfov_deg,
        eye_height=out.eye_height,
        pitch_deg=out.pitch_deg,
    )


# ── observation ────────────────────────────────────────────────────────


def agent_view(scene: SynthScene) -> CameraView:
    """The agent's pinhole camera at its current pose."""
    yaw = scene.agent_heading * np.pi / 2.0
    pitch = np.deg2rad(scene.pitch_deg)
    forward = np.array(
        [np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), -np.sin(pitch)]
    )
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])  # world -> camera rows
    center = np.array([scene.agent_xy[0], scene.agent_xy[1], scene.eye_height])
    fx = (scene.width / 2.0) / np.tan(np.deg2rad(scene.hfov_deg) / 2.0)
    return CameraView(
        fx=fx,
        fy=fx,
        cx=(scene.width - 1) / 2.0,
        cy=(scene.height - 1) / 2.0,
        width=scene.width,
        height=scene.height,
        rotation=rotation,
        translation=-rotation @ center,
    )


def _ray_grid(view: CameraView) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Camera center and per-pixel world direction scaled so that the ray
    parameter equals camera-frame depth."""
    u, v = np.meshgrid(np.arange(view.width), np.arange(view.height))
    d_cam = np.stack(
        [(u - view.cx) / view.fx, (v - view.cy) / view.fy, np.ones_like(u, dtype=np.float64)],
        axis=-1,
    )
    dirs = d_cam @ view.rotation  # == (R^T @ d) per pixel
    center = -view.rotation.T @ view.translation
    return center, dirs.reshape(-1, 3)


def _intersect_boxes(
    scene: SynthScene, origin: NDArray[np.float64], dirs: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.int32]]:
    """Nearest object hit per ray: (depth, color, object index). Depth is
    +inf and index -1 where no object is hit."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_color = np.zeros((n, 3))
    best_idx = np.full(n, -1, dtype=np.int32)
    for k, obj in enumerate(scene.objects):
        if obj.object_id == scene.held:
            continue
        rot = quat_to_matrix(obj.state.orientation)
        o_local = (origin - obj.state.position) @ rot  # rot^T applied rowwise
        d_local = dirs @ rot
        if obj.shape == "sphere":
            r = obj.size[0] / 2.0
            b = np.einsum("ij,j->i", dirs, origin - obj.state.position) * 2.0
            a = np.einsum("ij,ij->i", dirs, dirs)
            c = float(np.dot(origin - obj.state.position, origin - obj.state.position)) - r * r
            disc = b * b - 4 * a * c
            hit = disc >= 0.0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t = np.where(hit, (-b - sq) / (2 * a), np.inf)
            t = np.where(t > 1e-9, t, np.inf)
            better = t < best_t
            if better.any():
                p = origin + dirs[better] * t[better, None]
                upper = p[:, 2] > obj.state.position[2]
                tone = np.where(upper[:, None], obj.color[None, :], obj.color2[None, :])
                shade = np.where(upper[:, None], 1.0, 0.82)
                best_color[better] = tone * shade
                best_t[better] = t[better]
                best_idx[better] = k
        else:
            h = obj.size / 2.0
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d_local
                t1 = (-h - o_local) * inv
                t2 = (h - o_local) * inv
            t1 = np.nan_to_num(t1, nan=-np.inf, posinf=np.inf, neginf=-np.inf)
            t2 = np.nan_to_num(t2, nan=np.inf, posinf=np.inf, neginf=-np.inf)
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            tnear = tmin.max(axis=1)
            tfar = tmax.min(axis=1)
            t = np.where((tnear <= tfar) & (tnear > 1e-9), tnear, np.inf)
            better = t < best_t
            if better.any():
                tb = t[better]
                axis = np.argmax(tmin[better], axis=1)
                rows = np.arange(axis.size)
                sign = -np.sign(d_local[better][rows, axis])
                p_local = o_local + d_local[better] * tb[:, None]
                # face-local u along the next axis, in [0, 1]
                ua = (axis + 1) % 3
                u_face = (p_local[rows, ua] / h[ua] + 1.0) / 2.0
                tone = np.where(u_face[:, None] < 0.5, obj.color[None, :], obj.color2[None, :])
                if obj.openable:
                    lid = (axis == 2) & (sign > 0)
                    blend = obj.state.openness
                    tone = np.where(
                        lid[:, None],
                        (1.0 - blend) * obj.color[None, :] + blend * obj.interior_color[None, :],
                        tone,
                    )
                normal_local = np.zeros((axis.size, 3))
                normal_local[rows, axis] = sign
                normal_world = normal_local @ rot.T
                shade = 0.72 + 0.28 * np.clip(normal_world @ LIGHT_DIR, 0.0, 1.0)
                best_color[better] = tone * shade[:, None]
                best_t[better] = tb
                best_idx[better] = k
    return best_t, best_color, best_idx


def _raycast(
    scene: SynthScene, view: CameraView
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.int32]]:
    origin, dirs = _ray_grid(view)
    n = dirs.shape[0]
    half = scene.extents[:2] / 2.0
    roof = scene.extents[2]

    best_t = np.full(n, np.inf)
    color = np.zeros((n, 3))
    idx = np.full(n, -1, dtype=np.int32)

    # floor z = 0 (inf t on parallel rays is masked by the finite check)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dirs[:, 2]
        p = origin[None, :2] + dirs[:, :2] * t[:, None]
    hit = (t > 1e-9) & np.isfinite(t) & np.all(np.abs(p) <= half + 1e-9, axis=1)
    best_t[hit] = t[hit]
    color[hit] = FLOOR_COLOR

    # walls x = +-half[0], y = +-half[1]
    for wall, (ax, side) in enumerate([(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)]):
        other = 1 - ax
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (side * half[ax] - origin[ax]) / dirs[:, ax]
            po = origin[other] + dirs[:, other] * t
            pz = origin[2] + dirs[:, 2] * t
        hit = (
            (t > 1e-9)
            & np.isfinite(t)
            & (np.abs(po) <= half[other] + 1e-9)
            & (pz >= -1e-9)
            & (pz <= roof + 1e-9)
            & (t < best_t)
        )
        best_t[hit] = t[hit]
        color[hit] = WALL_COLORS[wall]

    obj_t, obj_color, obj_idx = _intersect_boxes(scene, origin, dirs)
    closer = obj_t < best_t
    best_t[closer] = obj_t[closer]
    color[closer] = obj_color[closer]
    idx[closer] = obj_idx[closer]

    sky = ~np.isfinite(best_t)
    best_t[sky] = 0.0  # no-hit depth sentinel
    color[sky] = 0.0
    shape = (view.height, view.width)
    return (
        color.reshape(shape + (3,)),
        best_t.reshape(shape),
        idx.reshape(shape),
    )


def observe(scene: SynthScene, view: CameraView | None = None) -> tuple[
    NDArray[np.float64], NDArray[np.float64]
]:
    """Render exact RGB and depth from a view (default: the agent camera).

    Depth is the camera-frame z of the nearest analytic hit, 0 where the
    ray escapes through the open ceiling.
    """
    rgb, depth, _ = _raycast(scene, view if view is not None else agent_view(scene))
    return rgb, depth


# ── actuation ──────────────────────────────────────────────────────────


def _bfs_path(occ: OccupancyMap, start: tuple[int, int], goal: tuple[int, int]):
    """Shortest 4-neighbor path through FREE cells, or None."""
    if occ.grid[start] != FREE or occ.grid[goal] != FREE:
        return None
    parent = {start: start}
    queue = [start]
    while queue:
        cell = queue.pop(0)
        if cell == goal:
            path = [cell]
            while path[-1] != start:
                path.append(parent[path[-1]])
            return path[::-1]
        r, c = cell
        for nb in ((r - 1, c), (r, c + 1), (r + 1, c), (r, c - 1)):
            if occ.in_bounds(nb) and occ.grid[nb] == FREE and nb not in parent:
                parent[nb] = cell
                queue.append(nb)
    return None


def act(scene: SynthScene, action: Navigate | Pick | Place) -> ActResult:
    """Apply one agent action, returning a failure result instead of
    mutating anything when its precondition does not hold."""
    if isinstance(action, Navigate):
        return _act_navigate(scene, action)
    if isinstance(action, Pick):
        return _act_pick(scene, action)
    if isinstance(action, Place):
        return _act_place(scene, action)
    raise TypeError(f"unknown action {action!r}")


def _act_navigate(scene: SynthScene, action: Navigate) -> ActResult:
    if action.heading not in (0, 1, 2, 3):
        return ActResult(scene, False, "heading must be one of 0..3")
    occ = occupancy(scene)
    free = np.argwhere(occ.grid == FREE)
    if free.size == 0:
        return ActResult(scene, False, "no free space in the room")
    target = np.asarray(action.target_xy, dtype=np.float64).reshape(2)
    centers = np.stack([occ.cell_to_world((r, c)) for r, c in free])
    dist = np.linalg.norm(centers - target, axis=1)
    best = free[int(np.argmin(dist))]  # argmin ties -> row-major first
    if dist.min() > 0.75:
        return ActResult(scene, False, "no free space near target")
    start = occ.world_to_cell(scene.agent_xy)
    path = _bfs_path(occ, tuple(start), tuple(best))
    if path is None:
        return ActResult(scene, False, "navigate target unreachable")
    turn = abs(scene.agent_heading - action.heading)
    out = scene.copy()
    out.agent_xy = occ.cell_to_world(tuple(best))
    out.agent_heading = action.heading
    out.steps = scene.steps + (len(path) - 1) + min(turn, 4 - turn)
    return ActResult(out, True)


def _act_pick(scene: SynthScene, action: Pick) -> ActResult:
    if scene.held is not None:
        return ActResult(scene, False, "already holding an object")
    mask = np.asarray(action.mask, dtype=bool)
    if mask.shape != (scene.height, scene.width):
        return ActResult(scene, False, "mask shape does not match the agent view")
    total = int(mask.sum())
    if total == 0:
        return ActResult(scene, False, "empty pick mask")
    _, _, idx = _raycast(scene, agent_view(scene))
    under = idx[mask]
    # an object dominates when it owns at least half of the mask pixels
    dominant = [
        k for k in np.unique(under) if k >= 0 and 2 * int((under == k).sum()) >= total
    ]
    if len(dominant) != 1:
        return ActResult(scene, False, "no dominant object under mask")
    out = scene.copy()
    out.held = scene.objects[dominant[0]].object_id
    out.steps = scene.steps + 1
    return ActResult(out, True)


def _act_place(scene: SynthScene, action: Place) -> ActResult:
    if scene.held is None:
        return ActResult(scene, False, "nothing held")
    pose = np.asarray(action.position, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(pose)):
        return ActResult(scene, False, "place pose must be finite")
    obj = scene.get(scene.held)
    half = scene.extents[:2] / 2.0
    if np.any(np.abs(pose[:2]) > half - obj.footprint_radius):
        return ActResult(scene, False, "place pose outside the room")
    out = scene.copy()
    out.get(scene.held).state.position = pose.copy()  # orientation preserved
    out.held = None
    out.steps = scene.steps + 1
    return ActResult(out, True)
