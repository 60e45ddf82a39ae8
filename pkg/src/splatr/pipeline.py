"""End-to-end room rearrangement: walkthrough capture and unshuffle.

The walkthrough stage explores the goal room on a coarse lattice,
records posed RGB-D scans into the workspace dataset, and distills them
into a splat checkpoint. The unshuffle stage re-explores after the room
has been shuffled, renders the remembered splat at its own camera poses
to expose what changed, folds detections into per-setting object
memories, matches the two memories, and walks the plan: pick each
displaced object and put it back where the splat says it belongs.

Ground-truth scene state is touched in exactly two places: building the
room from its seed and scoring the final state against the goal. The
agent's knowledge of the goal setting flows only through the splat.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from scipy.spatial import cKDTree

from .assign import (
    MatchResult,
    RearrangePlan,
    Tolerance,
    cosine,
    match_greedy,
    match_hungarian,
    metrics,
    plan_rearrangement,
)
from .config import PipelineConfig
from .core import CameraView, PointCloud, backproject
from .explore import (
    OBSTACLE,
    AgentTrace,
    Cell,
    MapEvidence,
    OccupancyMap,
    TraceStep,
    plan_path,
    sample_goal,
    update_map,
    voxel_downsample,
)
from .features import (
    ConceptTable,
    DetectConfig,
    PatchStatsBackend,
    color_histogram_embedding,
    detect,
    rasterize_patch_mask,
)
from .io import (
    PoseRecord,
    Workspace,
    read_checkpoint,
    read_depth,
    read_image,
    read_poses,
    write_checkpoint,
    write_depth,
    write_image,
    write_json,
    write_poses,
)
from .nodes import NodeStore, NodeStoreConfig, ObjectNode, insert, node_from_region
from .render import SH_C0, GaussianCloud, RenderSettings, render
from .sim import (
    FLOOR_COLOR,
    NEAR_PAIRS,
    PALETTE,
    WALL_COLORS,
    Navigate,
    Pick,
    Place,
    ShuffleSpec,
    SynthScene,
    act,
    agent_view,
    generate_scene,
    observe,
    sample_shuffle,
    shuffle,
)
from .train import TrainConfig, train

# ── tuning constants ───────────────────────────────────────────────────

# rng stream tags: walkthrough and unshuffle explorations must not share
# a random sequence even though both derive from the episode seed
_WALK_STREAM = 0
_UNSHUFFLE_STREAM = 1
# the shuffle draw gets its own integer seed; a plain offset keeps it
# reproducible and disjoint from the episode seeds we ever use
_SHUFFLE_SEED_OFFSET = 9973

# training-cloud density split: surfaces near the floor plane or the
# room boundary carry little detail and get a coarser voxel
_FLOOR_Z = 0.03
_WALL_MARGIN = 0.06
_BACKGROUND_VOXEL_SCALE = 3.0
_TRAIN_FRAME_CAP = 32

# object geometry gates: a region's object is its nearest depth mode
# (it occludes whatever triggered the patches behind it), so the pixel
# band is anchored a little in front of a low seed-depth quantile and
# reaches one object diagonal behind it, short of the 0.5 m wall
# standoff every object keeps; any real object surface also lives well
# below eye height, which rejects wall and floor artifacts
_DEPTH_ANCHOR_Q = 0.2
_DEPTH_BAND = (0.10, 0.45)
_OBJECT_Z = (0.02, 0.40)
_MIN_OBJECT_POINTS = 40

# place-pose estimation: the top-face slab of a cloud is centered on the
# object's footprint, so its percentile midpoint is viewpoint-unbiased
_TOP_BAND = 0.03
_PLACE_CLAMP = 0.25

# slot reading off the trained splat: gaussians of the node's own hue
# within this radius of the (bias-prone) node center; a handful suffice
# for a box center, and fewer means the splat never saw the slot well
_SLOT_RADIUS = 0.40
_SLOT_HUE_COSINE = 0.90
_MIN_SLOT_GAUSSIANS = 8

# widest ring the drop-settling search walks away from the planned spot
_SETTLE_REACH = 0.60

# pair filtering: a pair closer than this is already in place (true
# shuffles move objects at least 0.5 m), and a pair below the cosine
# floor pairs two different-looking objects
_SKIP_DISTANCE = 0.25
_MIN_PAIR_COSINE = 0.5

# room surfaces are near-gray (channel spread <= 0.06 for floor, walls,
# and sky) while every object paint tone keeps a spread above 0.11, so
# this threshold splits pixels into surface and paint
_PAINT_SPREAD = 0.085

# node consolidation: scene layout keeps object centers at least the
# sum of their footprint radii apart (>= 0.18 m), so per-side node
# clusters tighter than this radius describe one object instance; views
# of one object from opposite sides sit further apart than that, but
# their surface clouds abut (distinct objects keep an air gap), and the
# paints must agree either way
_CONSOLIDATE_RADIUS = 0.16
_CONSOLIDATE_COSINE = 0.5
_BRIDGE_GAP = 0.10

# execution: re-derived pick masks select pixels this close (in meters)
# to the remembered cloud, and the picked crop must still look like the
# remembered object
_MASK_RADIUS_SCALE = 2.0
_MIN_MASK_PIXELS = 12
_PICK_GUARD_COSINE = 0.5
# placing an object under the agent's own feet strands it for later
# navigation, so drops closer than this force a sidestep first
_AGENT_CLEAR = 0.45
_STANDOFF = 0.75

# drop clearance: the room rejects overlapping footprints outright, so a
# drop keeps this margin from every sensed obstacle point, vacated spots
# are forgiven generously, and a blocked drop slides away in small steps
_DROP_MARGIN = 0.06
_VACATE_MARGIN = 0.10
_NUDGE_STEP = 0.05
_NUDGE_LIMIT = 0.30
# footprint radius estimated from sensed points, padded for unsampled
# corners and clamped to the catalog's size range
_RADIUS_PAD = 1.15
_RADIUS_RANGE = (0.08, 0.22)

# unshuffle splits its step budget: the remainder after exploration is
# reserved for executing the plan
_EXPLORE_BUDGET_SHARE = 2 / 3

# detection renders favor throughput; float32 pixels are plenty for
# patch statistics
_DETECT_SETTINGS = RenderSettings(compute_dtype="float32")

_METRIC_FIELDS = ("success", "fixed", "fixed_strict", "misplaced", "energy_remaining")

EPISODE_FORMAT = "splatr-episode"
WALKTHROUGH_FORMAT = "splatr-walkthrough"
EVAL_FORMAT = "splatr-eval"
REPORT_VERSION = 1


# ── exploration ────────────────────────────────────────────────────────


@dataclass
class ExploreResult:
    """Everything one exploration run produced.

    trace holds the posed RGB-D scans; occ is the agent's final belief
    map; scene carries the agent's end pose and accumulated step count.
    exhausted is True when no reachable unknown cell remained.
    """

    scene: SynthScene
    trace: AgentTrace
    occ: OccupancyMap
    steps_used: int
    goals_reached: int
    exhausted: bool


def _heading_between(a: Cell, b: Cell) -> int:
    """Cardinal heading that steps from cell a to 4-neighbor cell b."""
    dr, dc = b[0] - a[0], b[1] - a[1]
    if (dr, dc) == (0, 1):
        return 0
    if (dr, dc) == (1, 0):
        return 1
    if (dr, dc) == (0, -1):
        return 2
    if (dr, dc) == (-1, 0):
        return 3
    raise ValueError(f"cells {a} and {b} are not 4-neighbors")


def _expand_diagonals(path: list[Cell], occ: OccupancyMap) -> list[Cell]:
    """Rewrite an 8-connected path as 4-connected single steps.

    Each diagonal move detours through one of its corner cells; the
    planner guarantees at least one of them is not a known obstacle.
    """
    out = [path[0]]
    for a, b in zip(path, path[1:]):
        if a[0] != b[0] and a[1] != b[1]:
            mid = (a[0], b[1])
            if occ.grid[mid] == OBSTACLE:
                mid = (b[0], a[1])
            out.append(mid)
        out.append(b)
    return out


def _scan(scene: SynthScene, trace: AgentTrace, index: int) -> tuple[SynthScene, int]:
    """Record an RGB-D frame at all four headings from the current cell."""
    for turn in range(4):
        view = agent_view(scene)
        rgb, depth = observe(scene, view)
        trace.append(
            TraceStep(
                index=index,
                view=view,
                position=np.array([scene.agent_xy[0], scene.agent_xy[1], scene.eye_height]),
                yaw=scene.agent_heading * np.pi / 2.0,
                image=rgb,
                depth=depth,
            )
        )
        index += 1
        if turn < 3:
            res = act(scene, Navigate(scene.agent_xy, (scene.agent_heading + 1) % 4))
            scene = res.scene
    return scene, index


def explore_scene(
    scene: SynthScene,
    rng: np.random.Generator,
    resolution: float,
    budget: int,
) -> ExploreResult:
    """Frontier-free exploration: walk to random unknown cells until none
    are left or the step budget runs out.

    The belief map starts all-unknown and gains evidence only from the
    agent's own body: traversed cells become free, and a step that does
    not land on its intended cell marks that cell as an obstacle (the
    bump). Every cell reached for the first time as a scan site gets a
    four-heading RGB-D scan, so the trace covers the room from the same
    lattice the agent walks.
    """
    rows = int(round(scene.extents[1] / resolution))
    cols = int(round(scene.extents[0] / resolution))
    occ = OccupancyMap.blank(rows, cols, resolution, origin=-scene.extents[:2] / 2.0)
    trace = AgentTrace()
    index = 0
    start_steps = scene.steps
    goals_reached = 0
    exhausted = False

    agent_cell = occ.world_to_cell(scene.agent_xy)
    occ = update_map(occ, agent_cell, MapEvidence(traversed=(agent_cell,)))
    scene, index = _scan(scene, trace, index)
    scanned = {agent_cell}

    while scene.steps - start_steps < budget:
        goal = sample_goal(occ, rng)
        if goal is None:
            exhausted = True
            break
        try:
            path = plan_path(occ, agent_cell, goal)
        except ValueError:
            # sampled goal turned unreachable: mark it so it is not redrawn
            occ = update_map(occ, agent_cell, MapEvidence(blocked=goal))
            continue
        arrived = True
        for cell in _expand_diagonals(path, occ)[1:]:
            if scene.steps - start_steps >= budget:
                arrived = False
                break
            res = act(scene, Navigate(occ.cell_to_world(cell), _heading_between(agent_cell, cell)))
            if not res.ok:
                # nothing reachable near the cell: treat it as blocked
                occ = update_map(occ, agent_cell, MapEvidence(blocked=cell))
                arrived = False
                break
            scene = res.scene
            landed = occ.world_to_cell(scene.agent_xy)
            if landed != cell:
                # the simulator snapped us off the intended cell: a bump
                occ = update_map(occ, landed, MapEvidence(traversed=(landed,), blocked=cell))
                agent_cell = landed
                arrived = False
                break
            agent_cell = cell
            occ = update_map(occ, agent_cell, MapEvidence(traversed=(agent_cell,)))
        if arrived:
            goals_reached += 1
        # scan after every leg, arrived or bumped; bump sites sit next to
        # objects and give the closest views of them
        if agent_cell not in scanned:
            scanned.add(agent_cell)
            scene, index = _scan(scene, trace, index)

    return ExploreResult(
        scene=scene,
        trace=trace,
        occ=occ,
        steps_used=scene.steps - start_steps,
        goals_reached=goals_reached,
        exhausted=exhausted,
    )


# ── dataset round trip ─────────────────────────────────────────────────


def _write_dataset(ws: Workspace, trace: AgentTrace) -> int:
    """Persist every traced frame; returns the frame count."""
    records = []
    for k, step in enumerate(trace):
        write_image(ws.frame_path(k), step.image)
        write_depth(ws.depth_path(k), step.depth)
        records.append(PoseRecord.from_view(k, step.view))
    write_poses(ws.poses_path, records)
    return len(records)


def _load_dataset(ws: Workspace) -> list[tuple[CameraView, NDArray, NDArray]]:
    """(view, rgb, depth) per frame, straight from the workspace dataset.

    Training always consumes the on-disk dataset, not the in-memory
    trace, so a rerun over an existing workspace reproduces the
    checkpoint bit for bit.
    """
    frames = []
    for rec in read_poses(ws.poses_path):
        depth_path = ws.depth_path(rec.frame)
        if not depth_path.exists():
            raise FileNotFoundError(f"dataset frame {rec.frame} has no depth image")
        frames.append((rec.view(), read_image(ws.frame_path(rec.frame)), read_depth(depth_path)))
    if not frames:
        raise ValueError("dataset holds no frames")
    return frames


# ── splat training ─────────────────────────────────────────────────────


def build_training_cloud(
    frames: list[tuple[CameraView, NDArray, NDArray]], voxel: float
) -> PointCloud:
    """Backproject every frame and thin at two densities.

    Points on the floor plane or hugging the cloud's xy boundary (the
    walls, in a room) are blended surfaces a coarse voxel represents
    fine; everything else is treated as object detail and kept at the
    configured voxel so small objects survive initialization.
    """
    pc = PointCloud.concatenate([backproject(v, d, img) for v, img, d in frames])
    pts = pc.points
    lo, hi = pts[:, :2].min(axis=0), pts[:, :2].max(axis=0)
    background = (
        (pts[:, 2] < _FLOOR_Z)
        | (pts[:, :2] < lo + _WALL_MARGIN).any(axis=1)
        | (pts[:, :2] > hi - _WALL_MARGIN).any(axis=1)
    )
    parts = []
    if background.any():
        parts.append(
            voxel_downsample(
                PointCloud(pts[background], pc.colors[background]),
                _BACKGROUND_VOXEL_SCALE * voxel,
            )
        )
    if (~background).any():
        parts.append(voxel_downsample(PointCloud(pts[~background], pc.colors[~background]), voxel))
    return PointCloud.concatenate(parts)


def _halve_view(view: CameraView) -> CameraView:
    # pixel (i, j) of the half image averages the 2x2 block at (2i, 2j),
    # so its center maps to u_full = 2 u_half + 0.5
    return CameraView(
        fx=view.fx / 2.0,
        fy=view.fy / 2.0,
        cx=(view.cx - 0.5) / 2.0,
        cy=(view.cy - 0.5) / 2.0,
        width=view.width // 2,
        height=view.height // 2,
        rotation=view.rotation.copy(),
        translation=view.translation.copy(),
    )


def _training_frames(
    frames: list[tuple[CameraView, NDArray, NDArray]]
) -> list[tuple[CameraView, NDArray]]:
    """Evenly subsample the dataset and train at half resolution.

    Half-resolution targets cut per-iteration cost fourfold; the splats
    themselves are resolution-free, so goal views still render at the
    full observation size during unshuffle.
    """
    picks = np.unique(np.linspace(0, len(frames) - 1, _TRAIN_FRAME_CAP).round().astype(int))
    out = []
    for k in picks:
        view, img, _ = frames[k]
        h, w = img.shape[:2]
        if h % 2 == 0 and w % 2 == 0:
            half = img.reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))
            out.append((_halve_view(view), half))
        else:
            out.append((view, img))
    return out


def _checkpoint_sha256(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ── walkthrough stage ──────────────────────────────────────────────────


def run_walkthrough(cfg: PipelineConfig, ws: Workspace) -> dict:
    """Capture the goal setting and train its splat.

    An existing dataset in the workspace is used as-is (imported posed
    frames train without exploration); otherwise the synthetic scene for
    cfg.seed is explored within the walkthrough step budget. Writes the
    checkpoint and a walkthrough report, and returns the report.
    """
    status = "ok"
    explored = False
    steps_used = 0
    if not ws.poses_path.exists():
        scene = generate_scene(cfg.seed, cfg.difficulty)
        rng = np.random.default_rng([cfg.seed, _WALK_STREAM])
        result = explore_scene(scene, rng, cfg.map_resolution, cfg.walkthrough_step_budget)
        _write_dataset(ws, result.trace)
        explored = True
        steps_used = result.steps_used
        if not result.exhausted:
            status = "budget-exhausted"

    frames = _load_dataset(ws)
    pc = build_training_cloud(frames, cfg.voxel)
    train_frames = _training_frames(frames)
    tcfg = TrainConfig(
        iterations=cfg.train_iterations,
        ssim_weight=cfg.ssim_weight,
        seed=cfg.seed,
        voxel_size=cfg.voxel,
        sh_degree=cfg.sh_degree,
    )
    cloud, report = train(train_frames, pc, tcfg)
    write_checkpoint(ws.checkpoint_path, cloud)

    doc = {
        "format": WALKTHROUGH_FORMAT,
        "version": REPORT_VERSION,
        "seed": cfg.seed,
        "difficulty": cfg.difficulty,
        "status": status,
        "explored": explored,
        "steps_used": steps_used,
        "frames": len(frames),
        "train_frames": len(train_frames),
        "gaussians": len(cloud),
        "psnr_mean": float(np.mean(report.final_psnr)),
        "psnr_min": float(np.min(report.final_psnr)),
        "checkpoint_sha256": _checkpoint_sha256(ws.checkpoint_path),
        "config": asdict(cfg),
    }
    write_json(ws.walkthrough_report_path, doc)
    return doc


# ── concept table ──────────────────────────────────────────────────────


def _soft_histogram(px: NDArray[np.float64], bins: int = 4) -> NDArray[np.float64]:
    """Unit-norm trilinear color histogram: each pixel spreads its mass
    over the neighboring bins, so a small color shift moves mass
    gradually instead of jumping bins."""
    t = np.clip(np.asarray(px, dtype=np.float64), 0.0, 1.0) * bins - 0.5
    i0 = np.floor(t).astype(np.int64)
    f = t - i0
    hist = np.zeros(bins**3)
    for corner in np.ndindex(2, 2, 2):
        idx = np.clip(i0 + corner, 0, bins - 1)
        w = np.prod(np.where(corner, f, 1.0 - f), axis=1)
        np.add.at(hist, (idx[:, 0] * bins + idx[:, 1]) * bins + idx[:, 2], w)
    return hist / np.linalg.norm(hist)


def paint_histogram_embedding(crop: NDArray[np.float64]) -> NDArray[np.float64]:
    """Appearance embedding robust to background, shading, and blur.

    A change region's bbox is mostly background when the object is small
    in frame, and a plain histogram of it matches the floor concept
    better than any object, so near-gray pixels are dropped first. The
    paint pixels that remain are reduced to chroma direction,
    (px - min px) / max of that, which cancels additive gray mixing and
    multiplicative shading exactly: every tone, lit or unlit, sharp or
    splat-blurred, of one paint maps near one direction. A crop with no
    paint at all falls back to the plain histogram, so pure-surface
    regions still look like surfaces to the concept filter.
    """
    px = np.asarray(crop, dtype=np.float64).reshape(-1, 3)
    spread = px.max(axis=1) - px.min(axis=1)
    paint = px[spread > _PAINT_SPREAD]
    if len(paint) == 0:
        return color_histogram_embedding(px)
    chroma = paint - paint.min(axis=1, keepdims=True)
    return _soft_histogram(chroma / chroma.max(axis=1, keepdims=True))


def palette_concept_table() -> tuple[ConceptTable, list[str]]:
    """Catalog concepts for synthetic rooms: object paints vs surfaces.

    Object swatches sample each catalog color under the shading range
    the renderer can produce (two paint tones, lit and unlit faces, the
    sphere tones); the chroma embedding collapses those tones near one
    direction per paint. Conditioned entries cover the floor, the four
    wall tints, and the black sky, which have no paint and so land in
    the plain-histogram fallback space, so change regions showing bare
    surfaces are rejected. This is catalog knowledge, not per-scene
    state.
    """
    shades = (0.72, 0.85, 0.976)
    base_colors: list[NDArray] = [np.asarray(c, dtype=np.float64) for c in PALETTE]
    for pair in NEAR_PAIRS:
        base_colors.append(np.asarray(pair[0], dtype=np.float64))
        base_colors.append(np.asarray(pair[1], dtype=np.float64))
        base_colors.append(np.asarray(pair[1], dtype=np.float64) * 0.97 + 0.03)
    base_colors.append(np.array([0.15, 0.13, 0.12]))  # openable-box interior

    labels: list[str] = []
    rows: list[NDArray] = []
    for k, color in enumerate(base_colors):
        swatch = [s * color for s in shades]
        swatch += [s * 0.62 * color for s in shades]
        swatch += [color, 0.82 * 0.62 * color]
        labels.append(f"object:{k}")
        rows.append(paint_histogram_embedding(np.clip(np.array(swatch), 0.0, 1.0)))
    surfaces = [("floor", FLOOR_COLOR * 0.976), ("sky", np.zeros(3))]
    surfaces += [(f"wall:{k}", WALL_COLORS[k]) for k in range(len(WALL_COLORS))]
    for label, color in surfaces:
        labels.append(label)
        rows.append(paint_histogram_embedding(color.reshape(1, 3)))
    vocab = [label for label in labels if label.startswith("object:")]
    return ConceptTable(labels=labels, embeddings=np.stack(rows)), vocab


# ── object memory ──────────────────────────────────────────────────────


def _unproject(view: CameraView, depth: NDArray, mask: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    """World points for every masked pixel with valid depth.

    Returns (points, vv, uu) with one row per selected pixel.
    """
    vv, uu = np.nonzero(mask & (depth > 0))
    z = depth[vv, uu]
    x = (uu - view.cx) / view.fx * z
    y = (vv - view.cy) / view.fy * z
    pts = (np.stack([x, y, z], axis=1) - view.translation) @ view.rotation
    return pts, vv, uu


def region_node(
    region,
    image: NDArray,
    depth: NDArray,
    view: CameraView,
    setting: str,
    cfg: PipelineConfig,
) -> ObjectNode | None:
    """Lift a change region to an object node, or None for artifacts.

    The coarse patch mask is cut down to the pixels that can be object
    surface: inside a depth band anchored at the region's near mode,
    inside the height band objects live in, and paint-colored rather
    than bare surface. Regions that keep too few such pixels (wall blur,
    floor seams, sky) are dropped. The surviving mask becomes the node's
    refined mask; its pixels alone feed the cloud and the embedding.
    """
    try:
        node = node_from_region(
            region,
            image,
            depth,
            view,
            embedding=paint_histogram_embedding(region.crop(image)),
            setting=setting,
            patch_size=cfg.patch_size,
        )
    except ValueError:
        return None  # no valid depth under the mask
    return _refine_node(node, region, image, depth, view, cfg)


def _main_cluster(pts: NDArray[np.float64], cell: float = 0.08) -> NDArray[np.bool_]:
    """Boolean mask of the points in the largest xy-connected cluster.

    Points are hashed to a cell grid and clusters are 8-connected cell
    components, so points further than about two cells apart separate.
    """
    ij = np.floor(pts[:, :2] / cell).astype(np.int64)
    ij -= ij.min(axis=0)
    grid = np.zeros(ij.max(axis=0) + 1, dtype=bool)
    grid[ij[:, 0], ij[:, 1]] = True
    labels, count = ndimage.label(grid, structure=np.ones((3, 3), dtype=int))
    if count <= 1:
        return np.ones(len(pts), dtype=bool)
    pt_labels = labels[ij[:, 0], ij[:, 1]]
    sizes = np.bincount(pt_labels, minlength=count + 1)
    sizes[0] = 0
    return pt_labels == int(np.argmax(sizes))


def _refine_node(
    node: ObjectNode,
    region,
    image: NDArray,
    depth: NDArray,
    view: CameraView,
    cfg: PipelineConfig,
) -> ObjectNode | None:
    """Cut the node down to its object-surface pixels; None if too few."""
    image = np.asarray(image, dtype=np.float64)
    seed = rasterize_patch_mask(region.patch_mask, cfg.patch_size, depth.shape)
    sample = depth[seed & (depth > 0)]
    anchor = float(np.quantile(sample, _DEPTH_ANCHOR_Q))
    band = seed & (depth > anchor - _DEPTH_BAND[0]) & (depth < anchor + _DEPTH_BAND[1])
    pts, vv, uu = _unproject(view, depth, band)
    px = image[vv, uu]
    keep = (
        (pts[:, 2] > _OBJECT_Z[0])
        & (pts[:, 2] < _OBJECT_Z[1])
        & (px.max(axis=1) - px.min(axis=1) > _PAINT_SPREAD)
    )
    idx = np.flatnonzero(keep)
    if len(idx) < _MIN_OBJECT_POINTS:
        return None
    # one region can graze a second object; a node must describe one
    idx = idx[_main_cluster(pts[idx])]
    if len(idx) < _MIN_OBJECT_POINTS:
        return None
    vv, uu, pts, px = vv[idx], uu[idx], pts[idx], px[idx]
    pixel_mask = np.zeros(depth.shape, dtype=bool)
    pixel_mask[vv, uu] = True
    cloud = PointCloud(pts, px)
    embedding = paint_histogram_embedding(cloud.colors)
    return replace(
        node,
        embedding=embedding,
        embedding_accum=embedding.copy(),
        center=cloud.points.mean(axis=0),
        points=cloud,
        refined_mask=pixel_mask,
    )


def build_object_memory(
    trace: AgentTrace,
    splat: GaussianCloud,
    cfg: PipelineConfig,
) -> tuple[NodeStore, dict[int, tuple[NDArray, int]]]:
    """Detect changes on every traced frame and fold them into a store.

    Each frame is compared against the splat rendered at the same pose;
    current-side regions come from live pixels and depth, goal-side
    regions from the render. Returns the store and, per node, the agent
    pose (xy, heading) of the frame that first saw it, which is where
    the executor returns to for picking.
    """
    store = NodeStore()
    capture_pose: dict[int, tuple[NDArray, int]] = {}
    backend = PatchStatsBackend(patch_size=cfg.patch_size)
    dcfg = DetectConfig(tau_patch=cfg.tau_patch, min_patches=cfg.min_patches)
    ncfg = NodeStoreConfig(
        delta=cfg.delta, tau_sim=cfg.tau_sim, nn_dist_threshold=cfg.nn_dist_threshold
    )
    table, vocab = palette_concept_table()

    for step in trace:
        if step.image is None:
            continue
        goal_out = render(splat, step.view, settings=_DETECT_SETTINGS)
        current_regions, goal_regions = detect(
            step.image,
            goal_out.color,
            backend,
            dcfg,
            table=table,
            object_vocab=vocab,
            crop_embedder=paint_histogram_embedding,
        )
        heading = int(round(step.yaw / (np.pi / 2.0))) % 4
        sides = (
            (current_regions, step.image, step.depth, "shuffled"),
            (goal_regions, goal_out.color, goal_out.depth, "goal"),
        )
        for regions, image, depth, setting in sides:
            for region in regions:
                node = region_node(region, image, depth, step.view, setting, cfg)
                if node is None:
                    continue
                result = insert(store, node, ncfg)
                if not result.merged:
                    capture_pose[result.node_id] = (step.position[:2].copy(), heading)
    return store, capture_pose


def consolidate_nodes(
    store: NodeStore,
    capture_pose: dict[int, tuple[NDArray, int]],
    voxel: float,
) -> tuple[NodeStore, dict[int, tuple[NDArray, int]]]:
    """Fuse per-side nodes that describe one object instance.

    Embedding-threshold merging misses same-object sightings whose
    visible faces differ, leaving several nodes per object instance.
    Nodes are absorbed greedily (in node_id order) into the first
    cluster of the same setting whose paint agrees and that is spatially
    the same thing: either the point-weighted centroids nearly coincide,
    or the surface clouds touch (views of one object from different
    sides share edges; distinct objects always keep an air gap). The
    fused node keeps the earliest sighting's id, image, and masks;
    points are pooled and re-thinned; the embedding is the
    point-count-weighted mean, renormalized.
    """
    clusters: list[list[ObjectNode]] = []
    pooled: list[NDArray[np.float64]] = []  # cluster surface points
    for node in store.nodes:
        home = None
        for k, members in enumerate(clusters):
            if members[0].setting != node.setting:
                continue
            weights = np.array([len(m.points) for m in members], dtype=np.float64)
            emb = np.average([m.embedding for m in members], axis=0, weights=weights)
            if cosine(emb, node.embedding) <= _CONSOLIDATE_COSINE:
                continue
            centroid = np.average([m.center for m in members], axis=0, weights=weights)
            near = float(np.linalg.norm(node.center - centroid)) <= _CONSOLIDATE_RADIUS
            gap, _ = cKDTree(pooled[k]).query(node.points.points)
            if near or float(gap.min()) <= _BRIDGE_GAP:
                home = k
                break
        if home is None:
            clusters.append([node])
            pooled.append(node.points.points)
        else:
            clusters[home].append(node)
            pooled[home] = np.concatenate([pooled[home], node.points.points])

    out = NodeStore()
    pose_out: dict[int, tuple[NDArray, int]] = {}
    for members in clusters:
        first = members[0]
        if len(members) == 1:
            fused = first
        else:
            points = voxel_downsample(
                PointCloud.concatenate([m.points for m in members]), voxel
            )
            weights = np.array([len(m.points) for m in members], dtype=np.float64)
            emb = np.average([m.embedding for m in members], axis=0, weights=weights)
            emb = emb / np.linalg.norm(emb)
            fused = replace(
                first,
                embedding=emb,
                embedding_accum=emb.copy(),
                center=points.points.mean(axis=0),
                points=points,
                merge_count=sum(m.merge_count for m in members),
            )
        out.nodes.append(fused)
        if first.node_id in capture_pose:
            pose_out[first.node_id] = capture_pose[first.node_id]
    out.next_id = store.next_id
    return out, pose_out


# ── matching and planning ──────────────────────────────────────────────


def match_memories(store: NodeStore, cfg: PipelineConfig) -> MatchResult:
    matcher = match_hungarian if cfg.matcher == "hungarian" else match_greedy
    return matcher(store.in_setting("shuffled"), store.in_setting("goal"))


def filter_pairs(match: MatchResult, store: NodeStore) -> tuple[MatchResult, list[tuple]]:
    """Keep pairs worth acting on; return (kept, dropped-with-reason).

    A shuffled node already sitting at some goal slot of its own
    appearance describes an object that never moved (splat blur produces
    such echo pairs), and a pair below the cosine floor ties together
    two different-looking objects; executing either would disturb a
    correct room.
    """
    goal_nodes = store.in_setting("goal")
    kept, dropped = [], []
    for pair in match.pairs:
        if pair.similarity < _MIN_PAIR_COSINE:
            dropped.append((pair.shuffled_id, pair.goal_id, "appearance mismatch"))
            continue
        s_node = store.get(pair.shuffled_id)
        # nearest goal node that looks like this object, not just the
        # assigned partner: blur fragments one object into several goal
        # nodes, and the partner need not be the closest fragment
        gap = min(
            float(np.linalg.norm(s_node.center - g.center))
            for g in goal_nodes
            if float(np.dot(s_node.embedding, g.embedding)) >= _MIN_PAIR_COSINE
        )
        if gap < _SKIP_DISTANCE:
            dropped.append((pair.shuffled_id, pair.goal_id, "already in place"))
        else:
            kept.append(pair)
    return MatchResult(pairs=kept), dropped


# ── execution ──────────────────────────────────────────────────────────


def occupied_points(trace: AgentTrace, voxel: float) -> NDArray[np.float64]:
    """xy of every sensed point in the object height band, thinned.

    This is the agent's own evidence of where things stand, including
    objects that never produced a change region; the executor uses it to
    keep drops clear of them.
    """
    bands = []
    for step in trace:
        if step.depth is None:
            continue
        pts, _, _ = _unproject(step.view, step.depth, np.ones(step.depth.shape, dtype=bool))
        bands.append(pts[(pts[:, 2] > _OBJECT_Z[0]) & (pts[:, 2] < _OBJECT_Z[1])])
    if not bands:
        return np.zeros((0, 2))
    pts = np.concatenate(bands)
    thin = voxel_downsample(PointCloud(pts, np.zeros_like(pts)), voxel)
    return thin.points[:, :2]


def footprint_radius(node: ObjectNode) -> float:
    """Held-object footprint circumradius estimated from its cloud."""
    xy = node.points.points[:, :2]
    r = float(np.quantile(np.linalg.norm(xy - xy.mean(axis=0), axis=1), 0.98))
    return float(np.clip(r * _RADIUS_PAD, *_RADIUS_RANGE))


class _DropGuard:
    """Keeps a drop from overlapping anything the agent has sensed.

    Obstacle evidence is the exploration-time object-band cloud; a
    picked object's own neighborhood is forgiven (it is about to
    vacate), and every successful drop adds its footprint circle.
    """

    def __init__(self, occupied_xy: NDArray[np.float64]) -> None:
        self._tree = cKDTree(occupied_xy) if len(occupied_xy) else None
        self._vacated: list[tuple[NDArray[np.float64], float]] = []
        self._placed: list[tuple[NDArray[np.float64], float]] = []

    def vacate(self, xy: NDArray[np.float64], radius: float) -> None:
        self._vacated.append((np.asarray(xy, dtype=np.float64), radius + _VACATE_MARGIN))

    def commit(self, xy: NDArray[np.float64], radius: float) -> None:
        self._placed.append((np.asarray(xy, dtype=np.float64), radius))

    def _clear(self, xy: NDArray[np.float64], radius: float) -> bool:
        reach = radius + _DROP_MARGIN
        if self._tree is not None:
            for k in self._tree.query_ball_point(xy, reach):
                p = self._tree.data[k]
                if not any(np.linalg.norm(p - c) <= r for c, r in self._vacated):
                    return False
        return all(
            np.linalg.norm(xy - c) > radius + r + _DROP_MARGIN for c, r in self._placed
        )

    def adjust(self, xy: NDArray[np.float64], radius: float) -> NDArray[np.float64]:
        """The drop point itself when clear, else the nearest clear spot
        found by sliding away from the closest obstruction."""
        xy = np.asarray(xy, dtype=np.float64)
        if self._clear(xy, radius):
            return xy
        blockers = [c for c, _ in self._placed]
        if self._tree is not None:
            _, k = self._tree.query(xy)
            blockers.append(np.asarray(self._tree.data[k]))
        nearest = min(blockers, key=lambda c: np.linalg.norm(xy - c))
        away = xy - nearest
        norm = float(np.linalg.norm(away))
        away = away / norm if norm > 1e-9 else np.array([1.0, 0.0])
        steps = int(round(_NUDGE_LIMIT / _NUDGE_STEP))
        for k in range(1, steps + 1):
            cand = xy + away * (_NUDGE_STEP * k)
            if self._clear(cand, radius):
                return cand
        return xy + away * _NUDGE_LIMIT  # best effort: full slide away


def _chroma_dirs(colors: NDArray[np.float64]) -> NDArray[np.float64]:
    """Unit chroma direction per color; zero rows for pure grays."""
    chroma = colors - colors.min(axis=1, keepdims=True)
    peak = chroma.max(axis=1, keepdims=True)
    return np.divide(chroma, peak, out=np.zeros_like(chroma), where=peak > 0)


def slot_center(splat: GaussianCloud, g_node: ObjectNode) -> NDArray[np.float64] | None:
    """Goal footprint center read off the trained splat, or None.

    Gaussian means sit on the remembered surfaces (they are seeded from
    exact depth and barely move in training), so the slot geometry in
    the splat is far sharper than a cloud unprojected from its blurred
    renders. Selects the paint gaussians of the node's own hue around
    its center, keeps the largest cluster, and returns the xy box center
    of the top slab, which spans the whole footprint for both shapes.
    """
    dc = np.clip(SH_C0 * splat.sh[:, 0, :] + 0.5, 0.0, 1.0)
    near = (
        (np.linalg.norm(splat.means[:, :2] - g_node.center[:2], axis=1) <= _SLOT_RADIUS)
        & (splat.means[:, 2] > _OBJECT_Z[0])
        & (splat.means[:, 2] < _OBJECT_Z[1])
        & (dc.max(axis=1) - dc.min(axis=1) > _PAINT_SPREAD)
    )
    def unit(rows: NDArray[np.float64]) -> NDArray[np.float64]:
        norms = np.linalg.norm(rows, axis=-1, keepdims=True)
        return np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)

    node_dir = unit(_chroma_dirs(g_node.points.colors.mean(axis=0, keepdims=True)))[0]
    hue = unit(_chroma_dirs(dc[near])) @ node_dir >= _SLOT_HUE_COSINE
    pts = splat.means[near][hue]
    if len(pts) < _MIN_SLOT_GAUSSIANS:
        return None
    pts = pts[_main_cluster(pts)]
    if len(pts) < _MIN_SLOT_GAUSSIANS:
        return None
    slab = pts[pts[:, 2] >= pts[:, 2].max() - _TOP_BAND]
    return (slab[:, :2].min(axis=0) + slab[:, :2].max(axis=0)) / 2.0


def place_pose(
    s_node: ObjectNode,
    g_node: ObjectNode,
    extents: NDArray,
    splat: GaussianCloud | None = None,
) -> NDArray:
    """Where to put the held object: goal footprint center at rest height.

    The xy is read off the trained splat when it resolves the slot;
    otherwise it falls back to the percentile midpoint of the goal
    cloud's top-face slab, which spans the whole footprint and so stays
    viewpoint-unbiased even for single-view clouds. The z halves the
    shuffled cloud's top height, which is exact sensor depth (resting
    height equals half the object height for both shapes).
    """
    def mid(a: NDArray[np.float64]) -> float:
        return float(np.quantile(a, 0.05) + np.quantile(a, 0.95)) / 2.0

    xy = slot_center(splat, g_node) if splat is not None else None
    if xy is None:
        g_pts = g_node.points.points
        z_top = float(np.quantile(g_pts[:, 2], 0.98))
        slab = g_pts[g_pts[:, 2] >= z_top - _TOP_BAND]
        xy = np.array([mid(slab[:, 0]), mid(slab[:, 1])])
    half = extents[:2] / 2.0 - _PLACE_CLAMP
    xy = np.clip(xy, -half, half)
    z = float(np.quantile(s_node.points.points[:, 2], 0.98)) / 2.0
    return np.array([xy[0], xy[1], z])


def points_mask(
    view: CameraView, depth: NDArray, points: NDArray, radius: float
) -> NDArray[np.bool_]:
    """Pixels whose backprojection lands within radius of the points.

    Pixels outside the object height band are never selected; without
    that cut the floor ring around a small object would outnumber its
    own pixels and a pick on the mask would grab nothing.
    """
    pts, vv, uu = _unproject(view, depth, np.ones(depth.shape, dtype=bool))
    mask = np.zeros(depth.shape, dtype=bool)
    if len(pts) == 0 or len(points) == 0:
        return mask
    dist, _ = cKDTree(points).query(pts)
    near = (dist <= radius) & (pts[:, 2] > _OBJECT_Z[0]) & (pts[:, 2] < _OBJECT_Z[1])
    mask[vv[near], uu[near]] = True
    return mask


def execute_plan(
    scene: SynthScene,
    plan: RearrangePlan,
    store: NodeStore,
    capture_pose: dict[int, tuple[NDArray, int]],
    occupied_xy: NDArray[np.float64],
    splat: GaussianCloud,
    cfg: PipelineConfig,
    budget: int,
) -> tuple[SynthScene, list[tuple[int, int, str]]]:
    """Walk the plan: return to each pick view, grab, and place.

    Navigation targets the pose that first saw the shuffled node, so the
    remembered mask geometry lines up with the live view. The pick mask
    is re-derived from live depth against the remembered cloud (the room
    may have changed since capture); the stored refined mask is the
    fallback. A pair whose live crop no longer resembles the node is
    skipped rather than risk grabbing a freshly placed object. Drops are
    slid off anything the agent has sensed standing at the target.
    """
    log: list[tuple[int, int, str]] = []
    guard = _DropGuard(occupied_xy)
    start_steps = scene.steps
    by_pair: dict[tuple[int, int], dict] = {}
    for action in plan.actions:
        by_pair.setdefault((action.shuffled_id, action.goal_id), {})[action.kind] = action

    for (sid, gid), actions in by_pair.items():
        if scene.steps - start_steps >= budget:
            log.append((sid, gid, "step budget exhausted"))
            continue
        s_node, g_node = store.get(sid), store.get(gid)
        xy, heading = capture_pose[sid]
        res = act(scene, Navigate(xy, heading))
        if not res.ok:
            log.append((sid, gid, f"navigate failed: {res.reason}"))
            continue
        scene = res.scene

        view = agent_view(scene)
        rgb, depth = observe(scene, view)
        mask = points_mask(
            view, depth, s_node.points.points, _MASK_RADIUS_SCALE * cfg.nn_dist_threshold
        )
        if int(mask.sum()) < _MIN_MASK_PIXELS:
            mask = actions["pick"].mask
        if cosine(paint_histogram_embedding(rgb[mask]), s_node.embedding) < _PICK_GUARD_COSINE:
            log.append((sid, gid, "pick target changed"))
            continue
        res = act(scene, Pick(mask))
        if not res.ok and mask is not actions["pick"].mask:
            res = act(scene, Pick(actions["pick"].mask))
        if not res.ok:
            log.append((sid, gid, f"pick failed: {res.reason}"))
            continue
        scene = res.scene
        radius = footprint_radius(s_node)
        guard.vacate(s_node.center[:2], radius)

        pose = place_pose(s_node, g_node, scene.extents, splat)
        half = scene.extents[:2] / 2.0 - _PLACE_CLAMP
        pose[:2] = np.clip(guard.adjust(pose[:2], radius), -half, half)
        scene = _step_clear(scene, pose[:2])
        scene, landed = _settle_place(scene, pose)
        if landed is None:
            log.append((sid, gid, "place failed: no clear drop"))
            continue
        guard.commit(landed, radius)
        log.append((sid, gid, "placed"))
    return scene, log


def _settle_place(
    scene: SynthScene, pose: NDArray[np.float64]
) -> tuple[SynthScene, NDArray[np.float64] | None]:
    """Drop at the planned spot, or the nearest physically valid one.

    The sim validates object separation on the next state copy rather
    than inside the place action, so an overlapping drop would poison
    every action after it; each candidate is probed on a throwaway copy
    first. Candidates walk outward rings from the plan, so a clear plan
    is taken verbatim. None means even the widest ring was blocked and
    the object is still held.
    """
    half = scene.extents[:2] / 2.0 - _PLACE_CLAMP
    angles = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
    for ring in np.arange(0.0, _SETTLE_REACH + 1e-9, _NUDGE_STEP):
        offsets = [np.zeros(2)] if ring == 0 else [
            ring * np.array([np.cos(a), np.sin(a)]) for a in angles
        ]
        for off in offsets:
            xy = np.clip(pose[:2] + off, -half, half)
            res = act(scene, Place(np.array([xy[0], xy[1], pose[2]])))
            if not res.ok:
                continue
            try:
                res.scene.copy()
            except ValueError:
                continue  # would interpenetrate a standing object
            return res.scene, xy
    return scene, None


def _step_clear(scene: SynthScene, drop_xy: NDArray) -> SynthScene:
    """Sidestep before a drop that would land within the agent's
    clearance disc, which would strand it for later navigation.

    The place itself is never abandoned (a held object blocks every
    later pick), so when no standoff works the drop proceeds as planned.
    """
    offset = scene.agent_xy - np.asarray(drop_xy, dtype=np.float64)
    if float(np.linalg.norm(offset)) >= _AGENT_CLEAR:
        return scene
    norm = float(np.linalg.norm(offset))
    away = offset / norm if norm > 1e-9 else np.array([1.0, 0.0])
    side = np.array([-away[1], away[0]])
    for direction in (away, side, -side, -away):
        nav = act(scene, Navigate(drop_xy + _STANDOFF * direction, scene.agent_heading))
        if nav.ok and float(np.linalg.norm(nav.scene.agent_xy - drop_xy)) >= _AGENT_CLEAR:
            return nav.scene
    return scene


# ── unshuffle stage ────────────────────────────────────────────────────


def run_unshuffle(cfg: PipelineConfig, ws: Workspace) -> dict:
    """Rearrange the shuffled room back toward the remembered goal.

    Requires the walkthrough checkpoint. Builds the episode from the
    seed (shuffling cfg.shuffle_count objects), explores, detects
    against splat renders, matches, plans, executes, and scores. Writes
    report.json plus a node summary, and returns the report document.
    """
    if not ws.checkpoint_path.exists():
        raise FileNotFoundError(f"no checkpoint at {ws.checkpoint_path}; run walkthrough first")
    splat, _ = read_checkpoint(ws.checkpoint_path)

    goal_scene = generate_scene(cfg.seed, cfg.difficulty)
    goal_state = goal_scene.world_state()
    if cfg.shuffle_count > 0:
        spec = sample_shuffle(goal_scene, cfg.shuffle_count, _SHUFFLE_SEED_OFFSET + cfg.seed)
        scene = shuffle(goal_scene, spec)
    else:
        spec = ShuffleSpec()
        scene = goal_scene.copy()
    initial_state = scene.world_state()

    rng = np.random.default_rng([cfg.seed, _UNSHUFFLE_STREAM])
    explore_budget = int(cfg.unshuffle_step_budget * _EXPLORE_BUDGET_SHARE)
    result = explore_scene(scene, rng, cfg.map_resolution, explore_budget)
    scene = result.scene

    raw_store, raw_pose = build_object_memory(result.trace, splat, cfg)
    store, capture_pose = consolidate_nodes(raw_store, raw_pose, cfg.voxel)
    match = match_memories(store, cfg)
    kept, dropped = filter_pairs(match, store)
    plan = plan_rearrangement(kept, store)
    budget_left = cfg.unshuffle_step_budget - result.steps_used
    occupied = occupied_points(result.trace, cfg.voxel)
    scene, exec_log = execute_plan(
        scene, plan, store, capture_pose, occupied, splat, cfg, budget_left
    )

    tol = Tolerance(eps_pos=cfg.eps_pos, eps_open=cfg.eps_open, d_norm=cfg.d_norm)
    report = metrics(initial_state, scene.world_state(), goal_state, tol)

    doc = {
        "format": EPISODE_FORMAT,
        "version": REPORT_VERSION,
        "seed": cfg.seed,
        "difficulty": cfg.difficulty,
        "matcher": cfg.matcher,
        "shuffle_count": len(spec.moves),
        "metrics": {name: getattr(report, name) for name in _METRIC_FIELDS},
        "per_object": report.per_object,
        "counts": {
            "frames": len(result.trace),
            "raw_nodes": len(raw_store.nodes),
            "shuffled_nodes": len(store.in_setting("shuffled")),
            "goal_nodes": len(store.in_setting("goal")),
            "matched_pairs": len(match.pairs),
            "planned_pairs": len(kept.pairs),
            "steps": scene.steps,
        },
        "dropped_pairs": [list(item) for item in dropped],
        "execution": [list(item) for item in exec_log],
        "exploration": {"steps": result.steps_used, "exhausted": result.exhausted},
        "config": asdict(cfg),
    }
    write_json(ws.report_path, doc)
    write_json(
        ws.nodes_dir / "nodes.json",
        {
            "nodes": [
                {
                    "node_id": n.node_id,
                    "setting": n.setting,
                    "center": [float(c) for c in n.center],
                    "merge_count": n.merge_count,
                    "points": len(n.points),
                }
                for n in store.nodes
            ]
        },
    )
    return doc


# ── evaluation ─────────────────────────────────────────────────────────


def aggregate_reports(docs: list[dict]) -> dict:
    """Per-metric means over episode reports.

    Every document must be an episode report; the mean is a plain
    arithmetic mean over episodes (exact summation).
    """
    if not docs:
        raise ValueError("aggregation needs at least one report")
    for doc in docs:
        if doc.get("format") != EPISODE_FORMAT:
            raise ValueError("not an episode report")
        if doc.get("version") != REPORT_VERSION:
            raise ValueError("unsupported episode report version")
        missing = [m for m in _METRIC_FIELDS if m not in doc.get("metrics", {})]
        if missing:
            raise ValueError(f"report lacks metrics: {missing}")
    means = {
        name: math.fsum(doc["metrics"][name] for doc in docs) / len(docs)
        for name in _METRIC_FIELDS
    }
    return {
        "format": EVAL_FORMAT,
        "version": REPORT_VERSION,
        "episodes": len(docs),
        "means": means,
    }
