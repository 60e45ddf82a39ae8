"""Optimization of GaussianCloud parameters against posed RGB frames.

The loss is the usual splatting compromise, (1-lambda) L1 + lambda (1-SSIM)
with an 11x11 sigma-1.5 Gaussian window. Both the value and its image-space
gradient are closed-form; the gradient then flows through render_backward.

SSIM gradient derivation, per channel, window correlation K (symmetric,
zero-padded, so K is self-adjoint): with mu_x = Kx, v_x = K(x^2),
v_xy = K(xy), A1 = 2 mu_x mu_y + C1, A2 = 2(v_xy - mu_x mu_y) + C2,
B1 = mu_x^2 + mu_y^2 + C1, B2 = (v_x - mu_x^2) + (v_y - mu_y^2) + C2,
s = A1 A2 / (B1 B2):

    ds/dmu_x = s (2 mu_y / A1 - 2 mu_y / A2 - 2 mu_x / B1 + 2 mu_x / B2)
    ds/dv_x  = -s / B2
    ds/dv_xy = 2 s / A2
    dSSIM/dx = (K ds/dmu_x + 2x K ds/dv_x + y K ds/dv_xy) / P
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .core import CameraView, GaussianCloud, PointCloud, sigmoid
from .grads import ParamGrads, render_backward
from .render import (
    DEFAULT_SETTINGS,
    RenderOutput,
    RenderSettings,
    SH_C0,
    project_cloud,
    rasterize,
)

# widened footprint so footprint-boundary truncation cannot starve
# gradients of thin splats during optimization; display rendering keeps
# the 3-sigma default. Single precision suffices for descent directions
# (parameters and Adam moments stay float64)
TRAIN_SETTINGS = RenderSettings(chi2_cutoff=16.0, compute_dtype="float32")

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _ssim_window(size: int = 11, sigma: float = 1.5) -> NDArray[np.float64]:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


_WINDOW = _ssim_window()


def _filt(img: NDArray[np.float64]) -> NDArray[np.float64]:
    """Separable 11x11 window correlation, same size, zero padding."""
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def ssim_and_grad(
    x: NDArray[np.float64], y: NDArray[np.float64]
) -> tuple[float, NDArray[np.float64]]:
    """Mean SSIM over pixels and channels plus d(mean SSIM)/dx."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
        y = y[:, :, None]
    total = 0.0
    grad = np.empty_like(x)
    P = x.size
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]
        mu_x, mu_y = _filt(xc), _filt(yc)
        v_x, v_y, v_xy = _filt(xc * xc), _filt(yc * yc), _filt(xc * yc)
        A1 = 2.0 * mu_x * mu_y + _SSIM_C1
        A2 = 2.0 * (v_xy - mu_x * mu_y) + _SSIM_C2
        B1 = mu_x**2 + mu_y**2 + _SSIM_C1
        B2 = (v_x - mu_x**2) + (v_y - mu_y**2) + _SSIM_C2
        s = (A1 * A2) / (B1 * B2)
        total += float(s.sum())
        ds_dmu = s * (2.0 * mu_y / A1 - 2.0 * mu_y / A2 - 2.0 * mu_x / B1 + 2.0 * mu_x / B2)
        ds_dvx = -s / B2
        ds_dvxy = 2.0 * s / A2
        grad[:, :, c] = (_filt(ds_dmu) + 2.0 * xc * _filt(ds_dvx) + yc * _filt(ds_dvxy)) / P
    return total / P, (grad[:, :, 0] if squeeze else grad)


def loss(rendered: RenderOutput, target: NDArray[np.float64], ssim_weight: float) -> float:
    """(1 - lambda) L1 + lambda (1 - SSIM) between rendered color and target."""
    value, _ = loss_and_image_grad(rendered.color, target, ssim_weight)
    return value


def loss_and_image_grad(
    pred: NDArray[np.float64], target: NDArray[np.float64], ssim_weight: float
) -> tuple[float, NDArray[np.float64]]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"image shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    l1 = float(np.mean(np.abs(diff)))
    dl1 = np.sign(diff) / diff.size
    if ssim_weight == 0.0:
        return l1, dl1
    s, ds = ssim_and_grad(pred, target)
    value = (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - s)
    grad = (1.0 - ssim_weight) * dl1 - ssim_weight * ds
    return value, grad


def psnr(a: NDArray[np.float64], b: NDArray[np.float64]) -> float:
    """Peak-1 PSNR in dB, capped at 120 for identical images."""
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return -10.0 * np.log10(max(mse, 1e-12))


# ── config, report, optimizer ──────────────────────────────────────────


@dataclass
class TrainConfig:
    iterations: int = 7000
    lr_mean: float = 1.6e-4  # scaled by scene extent inside train()
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    ssim_weight: float = 0.2
    opacity_prune_threshold: float = 0.005
    prune_interval: int = 500
    seed: int = 0
    voxel_size: float = 0.05
    sh_degree: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        for name in ("lr_mean", "lr_log_scale", "lr_rotation", "lr_opacity", "lr_sh"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ssim_weight < 1.0:
            raise ValueError("ssim_weight must be in [0,1)")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    final_psnr: list[float] = field(default_factory=list)
    gaussian_counts: list[tuple[int, int]] = field(default_factory=list)


_GROUPS = ("means", "log_scales", "rotations", "opacities", "sh")


@dataclass
class AdamState:
    """Per-group first/second moments; rows track the cloud through pruning."""

    m: dict[str, NDArray[np.float64]]
    v: dict[str, NDArray[np.float64]]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros_like(cloud: GaussianCloud) -> "AdamState":
        return AdamState(
            m={g: np.zeros_like(getattr(cloud, g)) for g in _GROUPS},
            v={g: np.zeros_like(getattr(cloud, g)) for g in _GROUPS},
        )

    def step(self, cloud: GaussianCloud, grads: ParamGrads, lrs: dict[str, float]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for g in _GROUPS:
            grad = getattr(grads, g)
            self.m[g] = self.beta1 * self.m[g] + (1.0 - self.beta1) * grad
            self.v[g] = self.beta2 * self.v[g] + (1.0 - self.beta2) * grad**2
            mhat = self.m[g] / bc1
            vhat = self.v[g] / bc2
            param = getattr(cloud, g)
            param -= lrs[g] * mhat / (np.sqrt(vhat) + self.eps)

    def keep_rows(self, mask: NDArray[np.bool_]) -> None:
        for g in _GROUPS:
            self.m[g] = self.m[g][mask]
            self.v[g] = self.v[g][mask]


# ── initialization ─────────────────────────────────────────────────────


def init_from_pointcloud(
    pc: PointCloud, voxel_size: float, sh_degree: int = 0
) -> GaussianCloud:
    """One Gaussian per occupied voxel: centroid mean, mean color as the
    SH DC term, isotropic scale from the 3rd-nearest-neighbor distance,
    opacity logit 0.1, identity rotation."""
    if len(pc) == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    keys = np.floor(pc.points / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    n = uniq.shape[0]
    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    centroids = np.zeros((n, 3))
    colors = np.zeros((n, 3))
    for d in range(3):
        centroids[:, d] = np.bincount(inverse, weights=pc.points[:, d], minlength=n)
        colors[:, d] = np.bincount(inverse, weights=pc.colors[:, d], minlength=n)
    centroids /= counts[:, None]
    colors /= counts[:, None]

    if n >= 4:
        dist, _ = cKDTree(centroids).query(centroids, k=4)
        d3 = dist[:, 3]
    else:
        d3 = np.full(n, voxel_size)
    log_scales = np.log(np.maximum(d3, 1e-6))[:, None].repeat(3, axis=1)

    n_coeffs = (sh_degree + 1) ** 2
    sh = np.zeros((n, n_coeffs, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        means=centroids,
        log_scales=log_scales,
        rotations=rot,
        opacities=np.full(n, 0.1),
        sh=sh,
        sh_degree=sh_degree,
    )


# ── training ───────────────────────────────────────────────────────────


def backward(
    cloud: GaussianCloud,
    view: CameraView,
    target: NDArray[np.float64],
    ssim_weight: float,
    background: NDArray[np.float64] | None = None,
    settings: RenderSettings = TRAIN_SETTINGS,
) -> tuple[float, ParamGrads]:
    """Loss value and analytic gradients for one frame."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    ps = project_cloud(cloud, view, settings)
    cache: list = []
    out = rasterize(ps, view, bg, settings, tile_cache=cache)
    value, dimg = loss_and_image_grad(out.color, target, ssim_weight)
    grads = render_backward(cloud, view, ps, dimg, bg, settings, tile_cache=cache)
    return value, grads


def scene_extent(points: NDArray[np.float64]) -> float:
    """Radius of the bounding sphere around the centroid."""
    center = points.mean(axis=0)
    return float(max(np.linalg.norm(points - center, axis=1).max(), 1e-6))


def prune_low_opacity(
    cloud: GaussianCloud, state: AdamState, threshold: float
) -> tuple[GaussianCloud, AdamState, NDArray[np.bool_]]:
    """Drop Gaussians whose activated opacity fell below threshold.

    Optimizer moments follow the surviving rows. At least one Gaussian
    always survives (the most opaque), so a trained cloud stays nonempty.
    """
    active = np.asarray(sigmoid(cloud.opacities))
    mask = active >= threshold
    if not mask.any():
        mask[int(np.argmax(active))] = True
    if mask.all():
        return cloud, state, mask
    cloud = GaussianCloud(
        cloud.means[mask],
        cloud.log_scales[mask],
        cloud.rotations[mask],
        cloud.opacities[mask],
        cloud.sh[mask],
        cloud.sh_degree,
    )
    state.keep_rows(mask)
    return cloud, state, mask


def train(
    frames: list[tuple[CameraView, NDArray[np.float64]]],
    pc: PointCloud,
    cfg: TrainConfig,
    settings: RenderSettings = TRAIN_SETTINGS,
) -> tuple[GaussianCloud, TrainReport]:
    """Adam-optimize a cloud initialized from pc against posed frames.

    Deterministic given cfg.seed: frame order is a fresh seeded
    permutation per epoch and pruning happens on a fixed schedule.
    """
    if not frames:
        raise ValueError("training requires at least one frame")
    cloud = init_from_pointcloud(pc, cfg.voxel_size, cfg.sh_degree)
    state = AdamState.zeros_like(cloud)
    extent = scene_extent(cloud.means)
    lrs = {
        "means": cfg.lr_mean * extent,
        "log_scales": cfg.lr_log_scale,
        "rotations": cfg.lr_rotation,
        "opacities": cfg.lr_opacity,
        "sh": cfg.lr_sh,
    }
    bg = np.asarray(cfg.background, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(gaussian_counts=[(0, len(cloud))])

    order = rng.permutation(len(frames))
    cursor = 0
    for it in range(1, cfg.iterations + 1):
        if cursor >= len(order):
            order = rng.permutation(len(frames))
            cursor = 0
        view, target = frames[order[cursor]]
        cursor += 1

        value, grads = backward(cloud, view, target, cfg.ssim_weight, bg, settings)
        report.losses.append(value)
        state.step(cloud, grads, lrs)
        # keep quaternions on the unit sphere; the gradient is tangent but
        # finite steps still drift radially
        norms = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
        cloud.rotations /= np.maximum(norms, 1e-12)

        if cfg.prune_interval > 0 and it % cfg.prune_interval == 0:
            cloud, state, _ = prune_low_opacity(cloud, state, cfg.opacity_prune_threshold)
            report.gaussian_counts.append((it, len(cloud)))

    for view, target in frames:
        out = rasterize(project_cloud(cloud, view, DEFAULT_SETTINGS), view, bg, DEFAULT_SETTINGS)
        report.final_psnr.append(psnr(out.color, target))
    return cloud, report
