"""Persistent object memory built from detected change regions.

Each detection becomes an ObjectNode carrying the frame it was seen in,
its coarse patch mask, a unit appearance embedding, and world-space
geometry (pointcloud plus center). The shuffled and goal settings keep
separate memories inside one store. Re-observations of the same physical
object fold into the existing node: the embedding advances as a running
mean over every raw contribution, clouds union and thin on a voxel grid,
and the center tracks the merged centroid.

The store is single-writer; reads between inserts are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import CameraView, PointCloud, backproject
from .explore import voxel_downsample
from .features import ChangeRegion, rasterize_patch_mask

SETTINGS = ("shuffled", "goal")

# ── domain types ───────────────────────────────────────────────────────


@dataclass
class ObjectNode:
    """One remembered object in either the shuffled or the goal setting.

    Parameters
    ----------
    setting : str
        Which memory this node lives in, "shuffled" or "goal".
    image : NDArray
        H x W x 3 frame the object was first seen in.
    patch_mask : NDArray
        Boolean patch-grid mask of the detection (coarse; see
        refine_mask for the pixel-accurate version).
    patch_size : int
        Pixel size of one patch cell, needed to rasterize patch_mask.
    embedding : NDArray
        Unit-norm appearance vector used for matching.
    center : NDArray
        World-space (3,) centroid of the pointcloud.
    points : PointCloud
        Nonempty world-space geometry backing spatial similarity.
    merge_count : int
        Number of observations folded in so far; a fresh detection is 1.
    node_id : int
        Store-assigned identity; -1 until inserted.
    refined_mask : NDArray or None
        Optional externally produced pixel mask, returned verbatim by
        refine_mask when present.
    embedding_accum : NDArray or None
        Pre-normalization running mean over every raw embedding folded
        into this node. Kept separately so fusion stays an exact
        arithmetic mean even though the stored embedding is renormalized
        after each merge. Defaults to a copy of embedding.
    """

    setting: str
    image: NDArray[np.float64]
    patch_mask: NDArray[np.bool_]
    patch_size: int
    embedding: NDArray[np.float64]
    center: NDArray[np.float64]
    points: PointCloud
    merge_count: int = 1
    node_id: int = -1
    refined_mask: NDArray[np.bool_] | None = None
    embedding_accum: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("image must be H x W x 3")
        self.patch_mask = np.asarray(self.patch_mask, dtype=bool)
        if self.patch_mask.ndim != 2 or not self.patch_mask.any():
            raise ValueError("patch mask must be 2D with at least one set patch")
        if self.patch_size < 1:
            raise ValueError("patch size must be >= 1")
        self.embedding = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > 1e-4:
            raise ValueError(f"embedding norm {norm:.6f} is not 1 within 1e-4")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.center)):
            raise ValueError("center must be finite")
        if len(self.points) == 0:
            raise ValueError("node pointcloud is empty")
        # counts observations, so the running mean in insert() stays exact
        if self.merge_count < 1:
            raise ValueError("merge_count must be >= 1 (a fresh detection is one observation)")
        if self.refined_mask is not None:
            self.refined_mask = np.asarray(self.refined_mask, dtype=bool)
        if self.embedding_accum is None:
            self.embedding_accum = self.embedding.copy()
        else:
            self.embedding_accum = np.asarray(self.embedding_accum, dtype=np.float64).reshape(-1)
            if self.embedding_accum.shape != self.embedding.shape:
                raise ValueError("accumulator/embedding dimension mismatch")


@dataclass(frozen=True)
class NodeStoreConfig:
    """Similarity weighting and merge thresholds.

    delta balances appearance against geometry, tau_sim gates merging
    (strictly greater wins), and nn_dist_threshold is both the inclusive
    neighbor cutoff in meters and the voxel edge used to thin merged
    clouds; both express the same spatial scale.
    """

    delta: float = 0.5
    tau_sim: float = 0.75
    nn_dist_threshold: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not np.isfinite(self.tau_sim):
            raise ValueError("tau_sim must be finite")
        if self.nn_dist_threshold <= 0:
            raise ValueError("nn_dist_threshold must be positive")


@dataclass
class NodeStore:
    """Append-only collection of object nodes across both settings."""

    nodes: list[ObjectNode] = field(default_factory=list)
    next_id: int = 0

    def in_setting(self, setting: str) -> list[ObjectNode]:
        """Nodes of one setting, in ascending node_id order."""
        if setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        return [n for n in self.nodes if n.setting == setting]

    def get(self, node_id: int) -> ObjectNode:
        for node in self.nodes:
            if node.node_id == node_id:
                return node
        raise KeyError(f"no node with id {node_id}")


@dataclass(frozen=True)
class InsertResult:
    """Outcome of one insert: which node absorbed or became the detection."""

    merged: bool
    node_id: int


# ── similarity ─────────────────────────────────────────────────────────


def nnratio(p: PointCloud, p_i: PointCloud, nn_dist_threshold: float) -> float:
    """Fraction of points of p whose nearest neighbor in p_i is within reach.

    Parameters
    ----------
    p, p_i : PointCloud
        Query and reference clouds; both must be nonempty. The measure
        is directional: it asks how much of p is explained by p_i.
    nn_dist_threshold : float
        Inclusive Euclidean cutoff in meters.

    Returns
    -------
    float
        In [0, 1].
    """
    if len(p) == 0 or len(p_i) == 0:
        raise ValueError("nnratio needs nonempty clouds on both sides")
    if nn_dist_threshold <= 0:
        raise ValueError("nn_dist_threshold must be positive")
    dist, _ = cKDTree(p_i.points).query(p.points)
    return float(np.mean(dist <= nn_dist_threshold))


def node_similarity(node: ObjectNode, other: ObjectNode, cfg: NodeStoreConfig) -> float:
    """Blend of appearance cosine and pointcloud overlap.

    delta * cos(g, g_i) + (1 - delta) * nnratio(P, P_i). Lives in
    [-delta, 1]: the cosine may anti-correlate while nnratio cannot.
    Comparing across settings is refused; the two memories are separate.
    """
    if node.setting != other.setting:
        raise ValueError("cannot compare nodes across settings")
    g, g_i = node.embedding, other.embedding
    vis = float(g @ g_i / (np.linalg.norm(g) * np.linalg.norm(g_i)))
    sp = nnratio(node.points, other.points, cfg.nn_dist_threshold)
    return cfg.delta * vis + (1.0 - cfg.delta) * sp


# ── store updates ──────────────────────────────────────────────────────


def insert(store: NodeStore, incoming: ObjectNode, cfg: NodeStoreConfig) -> InsertResult:
    """Fold one detection into the store.

    The incoming node is compared against every stored node of its
    setting. If the best similarity exceeds tau_sim (strictly), the
    detection merges into that node (ties resolve to the lowest
    node_id); otherwise it is stored as a new node with the next id.

    A merge touches exactly one node: the embedding accumulator advances
    by one observation and the stored unit vector is renormalized from
    it, the clouds union and thin on a voxel grid of edge
    nn_dist_threshold, the center moves to the merged centroid, and
    merge_count increments. The first-seen image and patch mask are
    kept. The store takes ownership of the incoming node's buffers.
    """
    best: ObjectNode | None = None
    best_sim = -np.inf
    for cand in store.in_setting(incoming.setting):  # ascending ids: ties keep the first
        sim = node_similarity(incoming, cand, cfg)
        if sim > best_sim:
            best, best_sim = cand, sim

    if best is None or best_sim <= cfg.tau_sim:
        node = replace(incoming, node_id=store.next_id)
        store.nodes.append(node)
        store.next_id += 1
        return InsertResult(merged=False, node_id=node.node_id)

    n = best.merge_count
    accum = (n * best.embedding_accum + incoming.embedding) / (n + 1)
    norm = float(np.linalg.norm(accum))
    if norm < 1e-12:
        raise ValueError("fused embedding collapsed to zero")
    best.embedding_accum = accum
    best.embedding = accum / norm
    union = PointCloud.concatenate([best.points, incoming.points])
    best.points = voxel_downsample(union, cfg.nn_dist_threshold)
    best.center = best.points.points.mean(axis=0)
    best.merge_count = n + 1
    return InsertResult(merged=True, node_id=best.node_id)


# ── node construction ──────────────────────────────────────────────────


def node_from_region(
    region: ChangeRegion,
    image: NDArray[np.float64],
    depth: NDArray[np.float64],
    view: CameraView,
    embedding: NDArray[np.float64],
    setting: str,
    patch_size: int,
    voxel: float | None = None,
) -> ObjectNode:
    """Lift one detected region to an object node with world geometry.

    The pointcloud backprojects the depth pixels under the rasterized
    patch mask; the center is its centroid. voxel, when given, thins the
    cloud on creation so stores stay small. Raises when the mask covers
    no valid depth (nothing anchors the object in space).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) != (view.height, view.width):
        raise ValueError(f"image size {(h, w)} does not match the camera view")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (h, w):
        raise ValueError(f"depth shape {depth.shape} != image {(h, w)}")
    seed = rasterize_patch_mask(region.patch_mask, patch_size, (h, w))
    cloud = backproject(view, np.where(seed, depth, 0.0), image)
    if len(cloud) == 0:
        raise ValueError("region mask covers no valid depth")
    if voxel is not None:
        cloud = voxel_downsample(cloud, voxel)
    return ObjectNode(
        setting=setting,
        image=image,
        patch_mask=region.patch_mask,
        patch_size=patch_size,
        embedding=embedding,
        center=cloud.points.mean(axis=0),
        points=cloud,
    )


# ── mask refinement ────────────────────────────────────────────────────


def refine_mask(
    node: ObjectNode,
    depth: NDArray[np.float64] | None,
    band_scale: float = 3.0,
    min_band: float = 0.005,
) -> NDArray[np.bool_]:
    """Tighten a node's coarse patch mask to pixel accuracy using depth.

    Within the bounding box of the rasterized patch mask, keep pixels
    whose depth falls in a robust band (median +- band_scale * MAD over
    the seed region, never narrower than min_band meters, which absorbs
    quantized depth) and that connect 4-wise to the seed. Depth <= 0 is
    the invalid sentinel and never selected.

    Fallbacks: a mask already attached to the node (e.g. produced
    offline by a promptable segmenter) is returned verbatim; with no
    depth image, or no valid depth under the seed, the rasterized patch
    mask is returned unchanged.

    Returns
    -------
    NDArray
        H x W boolean mask; every set pixel lies inside the bbox.
    """
    if node.refined_mask is not None:
        return node.refined_mask.copy()
    h, w = node.image.shape[:2]
    seed = rasterize_patch_mask(node.patch_mask, node.patch_size, (h, w))
    if depth is None:
        return seed
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (h, w):
        raise ValueError(f"depth shape {depth.shape} != image {(h, w)}")

    rows = np.nonzero(seed.any(axis=1))[0]
    cols = np.nonzero(seed.any(axis=0))[0]
    top, bottom = int(rows[0]), int(rows[-1]) + 1
    left, right = int(cols[0]), int(cols[-1]) + 1
    box_depth = depth[top:bottom, left:right]
    box_seed = seed[top:bottom, left:right]

    sample = box_depth[box_seed & (box_depth > 0)]
    if sample.size == 0:
        return seed
    med = float(np.median(sample))
    mad = float(np.median(np.abs(sample - med)))
    band = max(band_scale * mad, min_band)

    in_band = (box_depth > 0) & (np.abs(box_depth - med) <= band)
    labels, _ = ndimage.label(in_band)  # default structure: 4-connected
    keep = np.unique(labels[box_seed & in_band])
    keep = keep[keep > 0]
    out = np.zeros((h, w), dtype=bool)
    out[top:bottom, left:right] = np.isin(labels, keep)
    return out
