"""Patch-wise feature comparison between observed and rendered views.

An image pair (current observation, rendered goal view) is reduced to a
grid of per-patch feature vectors by a backend, compared patch-by-patch
with cosine similarity, thresholded, and grouped into candidate object
regions. A concept table of label embeddings then rejects regions that
look more like a surface artifact (wall, mirror) than like any object.

Backends are deterministic per image. The built-in one computes hand
designed color and gradient statistics so synthetic scenes need no
network inference; a file-loader backend consumes precomputed embedding
files written by an external exporter.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .io import read_patch_embeddings

# ── domain types ───────────────────────────────────────────────────────


@dataclass
class PatchFeatureGrid:
    """rows x cols x dim feature vectors, one per image patch."""

    data: NDArray[np.float64]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("feature grid must be rows x cols x dim")
        if self.data.shape[0] * self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ValueError("feature grid must hold at least one patch")
        if not np.isfinite(self.data).all():
            raise ValueError("feature grid holds NaN or infinite entries")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass
class ChangeRegion:
    """One 8-connected group of changed patches.

    bbox is (top, left, bottom, right) in pixels, end-exclusive, already
    clipped to the unpadded image. source tells which frame the region's
    crop should be taken from.
    """

    patch_mask: NDArray[np.bool_]
    bbox: tuple[int, int, int, int]
    source: str = "current"

    def __post_init__(self):
        self.patch_mask = np.asarray(self.patch_mask, dtype=bool)
        if not self.patch_mask.any():
            raise ValueError("region mask is empty")
        _, n = ndimage.label(self.patch_mask, structure=np.ones((3, 3)))
        if n != 1:
            raise ValueError("region mask must be one 8-connected component")
        if self.source not in ("current", "goal"):
            raise ValueError("source must be 'current' or 'goal'")
        t, l, b, r = self.bbox
        if not (t < b and l < r):
            raise ValueError("bbox must have positive extent")

    @property
    def patch_count(self) -> int:
        return int(self.patch_mask.sum())

    def crop(self, image: NDArray[np.float64]) -> NDArray[np.float64]:
        t, l, b, r = self.bbox
        return image[t:b, l:r]


@dataclass
class ConceptTable:
    """Label -> unit embedding rows in one shared embedding space.

    Entries whose label is not in the caller's object vocabulary act as
    conditioned (artifact) concepts for the false-positive filter.
    """

    labels: list[str]
    embeddings: NDArray[np.float64]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.labels) != self.embeddings.shape[0]:
            raise ValueError("one embedding row per label required")
        if len(self.labels) == 0:
            return
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be labels x dim")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("embeddings must be unit-norm within 1e-4")

    def __len__(self) -> int:
        return len(self.labels)


# ── feature backends ───────────────────────────────────────────────────


def pad_to_multiple(image: NDArray[np.float64], patch_size: int) -> NDArray[np.float64]:
    """Replicate right/bottom edges until both dims divide patch_size."""
    H, W = image.shape[:2]
    ph = (-H) % patch_size
    pw = (-W) % patch_size
    if ph == 0 and pw == 0:
        return image
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (image.ndim - 2)
    return np.pad(image, pad, mode="edge")


def rasterize_patch_mask(
    patch_mask: NDArray[np.bool_], patch_size: int, image_size: tuple[int, int]
) -> NDArray[np.bool_]:
    """Expand a patch-grid mask to pixels, clipped to image_size (h, w).

    The grid must tile at least the whole image (it normally comes from
    the padded copy, so it may overhang the right/bottom edges).
    """
    patch_mask = np.asarray(patch_mask, dtype=bool)
    if patch_mask.ndim != 2:
        raise ValueError("patch mask must be 2D")
    if patch_size < 1:
        raise ValueError("patch size must be >= 1")
    h, w = image_size
    px = np.kron(patch_mask, np.ones((patch_size, patch_size), dtype=bool))
    if px.shape[0] < h or px.shape[1] < w:
        raise ValueError("patch mask does not cover the image")
    return px[:h, :w]


class PatchStatsBackend:
    """Hand-designed per-patch descriptor for synthetic imagery.

    Each patch maps to [centered RGB mean, per-channel std, 4-bin
    gradient orientation histogram, bias]. The constant bias keeps every
    descriptor nonzero, so identical flat patches compare at exactly 1
    instead of hitting the zero-vector convention, and it damps cosine
    swings between patches that differ only by slight shading.
    """

    dim = 11

    def __init__(self, patch_size: int = 8, bias: float = 0.25):
        if patch_size < 2:
            raise ValueError("patch_size must be at least 2")
        self.patch_size = patch_size
        self.bias = bias

    def extract(self, image: NDArray[np.float64], key: str | None = None) -> PatchFeatureGrid:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError("image must be H x W x 3")
        p = self.patch_size
        H, W = image.shape[:2]
        if H % p or W % p:
            raise ValueError("image dims must be multiples of patch_size; pad first")
        rows, cols = H // p, W // p
        # (rows, cols, p, p, 3) view of the patch tiling
        tiles = image.reshape(rows, p, cols, p, 3).transpose(0, 2, 1, 3, 4)
        mean = tiles.mean(axis=(2, 3))
        std = tiles.std(axis=(2, 3))

        gray = tiles.mean(axis=4)
        gy = np.diff(gray, axis=2, append=gray[:, :, -1:, :])
        gx = np.diff(gray, axis=3, append=gray[:, :, :, -1:])
        mag = np.sqrt(gx * gx + gy * gy)
        ang = np.arctan2(gy, gx)  # [-pi, pi]
        bins = np.minimum((ang + np.pi) / (2 * np.pi / 4), 3.999).astype(np.int64)
        hist = np.zeros((rows, cols, 4))
        for b in range(4):
            hist[:, :, b] = np.where(bins == b, mag, 0.0).sum(axis=(2, 3))

        feats = np.concatenate(
            [mean - 0.5, std, hist, np.full((rows, cols, 1), self.bias)], axis=2
        )
        return PatchFeatureGrid(feats)


class FileEmbeddingBackend:
    """Loads precomputed per-frame patch embeddings from disk.

    Files are looked up as <root>/<key>.emb; the image is only used to
    validate that the stored grid matches the image's patch tiling.
    """

    def __init__(self, root, patch_size: int, dim: int):
        self.root = Path(root)
        self.patch_size = patch_size
        self.dim = dim

    def extract(self, image: NDArray[np.float64], key: str | None = None) -> PatchFeatureGrid:
        if key is None:
            raise ValueError("file-loader backend needs a frame key")
        data = read_patch_embeddings(self.root / f"{key}.emb")
        grid = PatchFeatureGrid(data.astype(np.float64))
        H, W = np.asarray(image).shape[:2]
        p = self.patch_size
        if (grid.rows, grid.cols) != (H // p, W // p) or grid.dim != self.dim:
            raise ValueError(
                f"{key}: embedding grid {grid.rows}x{grid.cols}x{grid.dim} does not "
                f"match a {H}x{W} image at patch {p} and dim {self.dim}"
            )
        return grid


# ── patch comparison ───────────────────────────────────────────────────


def similarity_grid(fC: PatchFeatureGrid, fG: PatchFeatureGrid) -> NDArray[np.float64]:
    """Per-patch cosine similarity; zero-vector patches compare at 0."""
    if fC.data.shape != fG.data.shape:
        raise ValueError(
            f"feature grids disagree: {fC.data.shape} vs {fG.data.shape}"
        )
    dots = np.einsum("ijk,ijk->ij", fC.data, fG.data)
    na = np.linalg.norm(fC.data, axis=2)
    nb = np.linalg.norm(fG.data, axis=2)
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        S = np.where(denom > 0.0, dots / np.where(denom > 0.0, denom, 1.0), 0.0)
    return np.clip(S, -1.0, 1.0)


def changed_patches(S: NDArray[np.float64], tau_patch: float = 0.6) -> NDArray[np.bool_]:
    """Mask of patches whose similarity falls below the threshold."""
    if not -1.0 < tau_patch < 1.0:
        raise ValueError("tau_patch must lie in (-1, 1)")
    return np.asarray(S) < tau_patch


def group_regions(
    changed: NDArray[np.bool_],
    min_patches: int = 2,
    patch_size: int = 1,
    image_size: tuple[int, int] | None = None,
    source: str = "current",
) -> list[ChangeRegion]:
    """Maximal 8-connected components of the changed grid as regions.

    Components smaller than min_patches are dropped. Regions come back
    ordered by the (top, left) corner of their bbox; pixel bboxes are
    patch extents scaled by patch_size and clipped to image_size.
    """
    changed = np.asarray(changed, dtype=bool)
    labels, n = ndimage.label(changed, structure=np.ones((3, 3)))
    regions = []
    for idx in range(1, n + 1):
        mask = labels == idx
        if mask.sum() < min_patches:
            continue
        rows = np.any(mask, axis=1).nonzero()[0]
        cols = np.any(mask, axis=0).nonzero()[0]
        t, b = int(rows[0]) * patch_size, (int(rows[-1]) + 1) * patch_size
        l, r = int(cols[0]) * patch_size, (int(cols[-1]) + 1) * patch_size
        if image_size is not None:
            b = min(b, image_size[0])
            r = min(r, image_size[1])
        regions.append(ChangeRegion(patch_mask=mask, bbox=(t, l, b, r), source=source))
    regions.sort(key=lambda reg: (reg.bbox[0], reg.bbox[1]))
    return regions


# ── concept filtering ──────────────────────────────────────────────────


def color_histogram_embedding(
    crop: NDArray[np.float64], bins_per_channel: int = 4
) -> NDArray[np.float64]:
    """Unit-norm joint RGB histogram of a crop.

    Serves as the shared embedding space for region crops and concept
    table entries in synthetic scenes, standing in for a learned
    image/text encoder.
    """
    crop = np.asarray(crop, dtype=np.float64).reshape(-1, 3)
    if crop.shape[0] == 0:
        raise ValueError("cannot embed an empty crop")
    q = np.minimum((crop * bins_per_channel).astype(np.int64), bins_per_channel - 1)
    flat = (q[:, 0] * bins_per_channel + q[:, 1]) * bins_per_channel + q[:, 2]
    hist = np.bincount(flat, minlength=bins_per_channel**3).astype(np.float64)
    return hist / np.linalg.norm(hist)


def concept_filter(
    g_r: NDArray[np.float64], table: ConceptTable, object_vocab: list[str]
) -> bool:
    """True to keep the region, False to reject it as an artifact.

    Rejects when the most similar table entry is a conditioned one (a
    label outside the object vocabulary); exact ties break toward keep.
    """
    if len(table) == 0:
        raise ValueError("concept table is empty")
    g = np.asarray(g_r, dtype=np.float64)
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return True  # nothing to compare against, do not discard evidence
    sims = table.embeddings @ (g / norm)
    best = sims.max()
    vocab = set(object_vocab)
    for label, s in zip(table.labels, sims):
        if s == best and label in vocab:
            return True
    return False


# ── detection pipeline ─────────────────────────────────────────────────


@dataclass
class DetectConfig:
    tau_patch: float = 0.6
    min_patches: int = 2

    def __post_init__(self):
        if not -1.0 < self.tau_patch < 1.0:
            raise ValueError("tau_patch must lie in (-1, 1)")
        if self.min_patches < 1:
            raise ValueError("min_patches must be at least 1")


def detect(
    image_current: NDArray[np.float64],
    image_goal: NDArray[np.float64],
    backend,
    config: DetectConfig | None = None,
    table: ConceptTable | None = None,
    object_vocab: list[str] | tuple[str, ...] = (),
    crop_embedder=color_histogram_embedding,
    keys: tuple[str | None, str | None] = (None, None),
) -> tuple[list[ChangeRegion], list[ChangeRegion]]:
    """Changed regions between an observation and its rendered goal view.

    One symmetric changed-patch grid is grouped once; every region is
    then attributed to both frames, so the caller can crop the current
    side and the goal side of the same change. With a concept table the
    two sides are filtered independently, each on its own crop.
    """
    config = config if config is not None else DetectConfig()
    ic = np.asarray(image_current, dtype=np.float64)
    ig = np.asarray(image_goal, dtype=np.float64)
    if ic.shape != ig.shape:
        raise ValueError("current and goal images must share a shape")
    H, W = ic.shape[:2]
    p = backend.patch_size
    fC = backend.extract(pad_to_multiple(ic, p), key=keys[0])
    fG = backend.extract(pad_to_multiple(ig, p), key=keys[1])
    S = similarity_grid(fC, fG)
    changed = changed_patches(S, config.tau_patch)
    current_side = group_regions(
        changed, config.min_patches, p, image_size=(H, W), source="current"
    )
    goal_side = group_regions(
        changed, config.min_patches, p, image_size=(H, W), source="goal"
    )
    if table is not None:
        current_side = [
            r for r in current_side
            if concept_filter(crop_embedder(r.crop(ic)), table, list(object_vocab))
        ]
        goal_side = [
            r for r in goal_side
            if concept_filter(crop_embedder(r.crop(ig)), table, list(object_vocab))
        ]
    return current_side, goal_side
