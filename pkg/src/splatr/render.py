"""Forward tile-based rasterization of a GaussianCloud.

The pipeline is the standard EWA splatting chain: world-frame Gaussians
are transformed into the camera frame, projected through the perspective
Jacobian to 2D covariances, depth-sorted front-to-back, binned into
16x16 pixel tiles by a conservative ellipse bound, and alpha-composited
per pixel with early termination.

Everything here is pure numpy over the whole cloud (or a tile's worth of
pixels x splats) at once; the per-pixel sequential semantics the tests
pin down are reproduced exactly by prefix products along the sorted axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .core import CameraView, Gaussian, GaussianCloud, covariances_from, sigmoid

# ── spherical harmonics ────────────────────────────────────────────────

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_basis(dirs: NDArray[np.float64], degree: int) -> NDArray[np.float64]:
    """Real SH basis values for unit directions: (N,3) -> (N, (degree+1)^2)."""
    if not 0 <= degree <= 3:
        raise ValueError(f"sh degree {degree} unsupported")
    n = dirs.shape[0]
    out = np.empty((n, (degree + 1) ** 2))
    out[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[:, 4] = SH_C2[0] * xy
        out[:, 5] = SH_C2[1] * yz
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * xz
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = SH_C3[1] * xy * z
        out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: NDArray[np.float64], degree: int) -> NDArray[np.float64]:
    """d basis / d direction, (N, (degree+1)^2, 3), for unnormalized chain use."""
    n = dirs.shape[0]
    out = np.zeros((n, (degree + 1) ** 2, 3))
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        out[:, 1, 1] = -SH_C1
        out[:, 2, 2] = SH_C1
        out[:, 3, 0] = -SH_C1
    if degree >= 2:
        out[:, 4, 0] = SH_C2[0] * y
        out[:, 4, 1] = SH_C2[0] * x
        out[:, 5, 1] = SH_C2[1] * z
        out[:, 5, 2] = SH_C2[1] * y
        out[:, 6, 0] = SH_C2[2] * (-2.0 * x)
        out[:, 6, 1] = SH_C2[2] * (-2.0 * y)
        out[:, 6, 2] = SH_C2[2] * (4.0 * z)
        out[:, 7, 0] = SH_C2[3] * z
        out[:, 7, 2] = SH_C2[3] * x
        out[:, 8, 0] = SH_C2[4] * (2.0 * x)
        out[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9, 0] = SH_C3[0] * (6.0 * x * y)
        out[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        out[:, 10, 0] = SH_C3[1] * (y * z)
        out[:, 10, 1] = SH_C3[1] * (x * z)
        out[:, 10, 2] = SH_C3[1] * (x * y)
        out[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
        out[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        out[:, 11, 2] = SH_C3[2] * (8.0 * y * z)
        out[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
        out[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
        out[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        out[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
        out[:, 13, 2] = SH_C3[4] * (8.0 * x * z)
        out[:, 14, 0] = SH_C3[5] * (2.0 * x * z)
        out[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
        out[:, 14, 2] = SH_C3[5] * (xx - yy)
        out[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        out[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return out


def evaluate_sh(
    sh: NDArray[np.float64], degree: int, dirs: NDArray[np.float64]
) -> NDArray[np.float64]:
    """View-dependent RGB from SH coefficients, pre-clip.

    sh: (N, (degree+1)^2, 3); dirs: (N, 3) unit vectors toward each
    Gaussian from the camera. Returns (N, 3); callers clip to [0, 1].
    """
    basis = sh_basis(dirs, degree)
    return np.einsum("nk,nkc->nc", basis, sh) + 0.5


# ── settings and projected form ────────────────────────────────────────


@dataclass(frozen=True)
class RenderSettings:
    """Rasterizer knobs. Defaults are the display-rendering contract;

    training widens chi2_cutoff so gradients are not truncated at the
    footprint boundary. chi2_cutoff None means unbounded support.
    compute_dtype selects the per-pixel arithmetic width: float64 for
    reference-exact output, float32 to halve memory traffic in the
    optimizer's inner loop (projection math is always float64).
    """

    tile_size: int = 16
    chi2_cutoff: float | None = 9.0  # squared Mahalanobis bound (3 sigma)
    dilation: float = 0.3
    z_near: float = 0.01
    transmittance_min: float = 1e-4
    alpha_max: float = 0.999
    frustum_margin: float = 1.3
    compute_dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.float32 if self.compute_dtype == "float32" else np.float64


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class Splat2D:
    """A single projected Gaussian (the per-splat record of the rasterizer)."""

    center: NDArray[np.float64]
    cov2d: NDArray[np.float64]
    depth: float
    opacity: float
    color: NDArray[np.float64]


@dataclass
class ProjectedSplats:
    """Struct-of-arrays output of project_cloud over the visible subset.

    index maps each row back to the cloud; saved fields carry everything
    the backward pass needs to avoid reprojecting.
    """

    index: NDArray[np.int64]        # (M,) rows into the cloud
    center: NDArray[np.float64]     # (M,2) pixel coordinates
    cov2d: NDArray[np.float64]      # (M,2,2) after dilation
    conic: NDArray[np.float64]      # (M,2,2) inverse of cov2d
    depth: NDArray[np.float64]      # (M,) camera z
    alpha: NDArray[np.float64]      # (M,) activated opacity
    color: NDArray[np.float64]      # (M,3) SH evaluated, clipped
    radius: NDArray[np.float64]     # (M,2) half extents of the support AABB
    # saved intermediates for the backward pass
    t_cam: NDArray[np.float64]      # (M,3) camera-frame means
    J: NDArray[np.float64]          # (M,2,3) perspective Jacobians
    clamp_x: NDArray[np.bool_]      # frustum clamp active on x/z
    clamp_y: NDArray[np.bool_]
    tx: NDArray[np.float64]         # clamped x/z, y/z used inside J
    ty: NDArray[np.float64]
    color_preclip: NDArray[np.float64]
    dirs: NDArray[np.float64]       # (M,3) unit view directions (world)
    dist: NDArray[np.float64]       # (M,) distance camera->mean


@dataclass
class RenderOutput:
    color: NDArray[np.float64]   # H,W,3 in [0,1]
    alpha: NDArray[np.float64]   # H,W
    depth: NDArray[np.float64]   # H,W alpha-weighted mean depth, 0 where empty


def project_cloud(
    cloud: GaussianCloud,
    view: CameraView,
    settings: RenderSettings = DEFAULT_SETTINGS,
) -> ProjectedSplats:
    """EWA-project every Gaussian; keep those in front of the near plane."""
    t_all = cloud.means @ view.rotation.T + view.translation
    keep = t_all[:, 2] > settings.z_near
    index = np.nonzero(keep)[0]
    t = t_all[keep]
    m = index.shape[0]
    z = t[:, 2]

    # frustum-clamped view-space tangents stabilize J off-screen
    lim_x = settings.frustum_margin * (0.5 * view.width / view.fx)
    lim_y = settings.frustum_margin * (0.5 * view.height / view.fy)
    tx_raw = t[:, 0] / z
    ty_raw = t[:, 1] / z
    tx = np.clip(tx_raw, -lim_x, lim_x)
    ty = np.clip(ty_raw, -lim_y, lim_y)
    clamp_x = tx != tx_raw
    clamp_y = ty != ty_raw

    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = view.fx / z
    J[:, 0, 2] = -view.fx * tx / z
    J[:, 1, 1] = view.fy / z
    J[:, 1, 2] = -view.fy * ty / z

    cov3d = covariances_from(cloud.log_scales[keep], cloud.rotations[keep])
    Vc = view.rotation @ cov3d @ view.rotation.T
    cov2d = J @ Vc @ np.transpose(J, (0, 2, 1))
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = -b / det
    conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det

    center = np.stack(
        [view.fx * tx_raw + view.cx, view.fy * ty_raw + view.cy], axis=1
    )
    if settings.chi2_cutoff is None:
        sigma_mult = np.inf
    else:
        sigma_mult = np.sqrt(settings.chi2_cutoff)
    radius = sigma_mult * np.sqrt(np.stack([a, c], axis=1))

    cam = view.camera_center
    offs = cloud.means[keep] - cam
    dist = np.linalg.norm(offs, axis=1)
    dirs = offs / np.maximum(dist, 1e-12)[:, None]
    color_preclip = evaluate_sh(cloud.sh[keep], cloud.sh_degree, dirs)
    color = np.clip(color_preclip, 0.0, 1.0)

    return ProjectedSplats(
        index=index,
        center=center,
        cov2d=cov2d,
        conic=conic,
        depth=z,
        alpha=np.asarray(sigmoid(cloud.opacities[keep])),
        color=color,
        radius=radius,
        t_cam=t,
        J=J,
        clamp_x=clamp_x,
        clamp_y=clamp_y,
        tx=tx,
        ty=ty,
        color_preclip=color_preclip,
        dirs=dirs,
        dist=dist,
    )


def project_gaussian(
    g: Gaussian, view: CameraView, settings: RenderSettings = DEFAULT_SETTINGS
) -> Splat2D | None:
    """Project one Gaussian; None when culled by the near plane."""
    cloud = GaussianCloud(
        means=g.mean[None],
        log_scales=g.log_scale[None],
        rotations=g.rotation[None],
        opacities=np.array([g.opacity]),
        sh=g.sh[None],
        sh_degree=int(np.sqrt(g.sh.shape[0])) - 1,
    )
    ps = project_cloud(cloud, view, settings)
    if ps.index.shape[0] == 0:
        return None
    return Splat2D(
        center=ps.center[0],
        cov2d=ps.cov2d[0],
        depth=float(ps.depth[0]),
        opacity=float(ps.alpha[0]),
        color=ps.color[0],
    )


# ── depth sort and tile binning ────────────────────────────────────────


def sort_and_bin(
    ps: ProjectedSplats, view: CameraView, settings: RenderSettings
) -> tuple[NDArray[np.int64], dict[tuple[int, int], NDArray[np.int64]]]:
    """Global front-to-back order plus tile -> sorted-row-index bins.

    The order is canonical: depth ascending, ties broken by cloud row via
    the stable sort, so storage permutations cannot change the composite.
    Binning is conservative: an axis-aligned bound picks the tile range
    and a circumscribed-circle test against each tile rectangle drops
    (splat, tile) pairs whose support cannot reach any of its pixels.
    """
    order = np.lexsort((ps.index, ps.depth))
    ts = settings.tile_size
    n_ty = (view.height + ts - 1) // ts
    n_tx = (view.width + ts - 1) // ts

    cu = ps.center[order, 0]
    cv = ps.center[order, 1]
    ru = ps.radius[order, 0]
    rv = ps.radius[order, 1]
    # pixel centers sit at integer coordinates; AABB in tile units.
    # unbounded support (chi2_cutoff None) -> huge but finite extents
    big = 1e9
    ru = np.where(np.isfinite(ru), ru, big)
    rv = np.where(np.isfinite(rv), rv, big)
    tx0 = np.clip(np.floor((cu - ru) / ts).astype(np.int64), 0, n_tx - 1)
    tx1 = np.clip(np.floor((cu + ru) / ts).astype(np.int64), 0, n_tx - 1)
    ty0 = np.clip(np.floor((cv - rv) / ts).astype(np.int64), 0, n_ty - 1)
    ty1 = np.clip(np.floor((cv + rv) / ts).astype(np.int64), 0, n_ty - 1)
    # drop splats whose AABB misses the image entirely
    on = (cu + ru >= 0) & (cu - ru <= view.width - 1) & (cv + rv >= 0) & (
        cv - rv <= view.height - 1
    )

    wx = tx1 - tx0 + 1
    wy = ty1 - ty0 + 1
    counts = np.where(on, wx * wy, 0)
    total = int(counts.sum())
    bins: dict[tuple[int, int], NDArray[np.int64]] = {}
    if total == 0:
        return order, bins
    rows = np.repeat(np.arange(order.shape[0]), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - starts[rows]
    dx = local % wx[rows]
    dy = local // wx[rows]
    tile_x = tx0[rows] + dx
    tile_y = ty0[rows] + dy

    if settings.chi2_cutoff is not None:
        # squared distance from the splat center to the tile's pixel rect
        # versus the circumscribed support circle chi2 * lambda_max(cov2d)
        a = ps.cov2d[order, 0, 0]
        b = ps.cov2d[order, 0, 1]
        c = ps.cov2d[order, 1, 1]
        lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        r2 = settings.chi2_cutoff * lam_max
        lo_x = tile_x * ts
        hi_x = np.minimum(lo_x + ts, view.width) - 1
        lo_y = tile_y * ts
        hi_y = np.minimum(lo_y + ts, view.height) - 1
        ddx = np.clip(cu[rows], lo_x, hi_x) - cu[rows]
        ddy = np.clip(cv[rows], lo_y, hi_y) - cv[rows]
        keep_pair = ddx * ddx + ddy * ddy <= r2[rows]
        rows = rows[keep_pair]
        tile_x = tile_x[keep_pair]
        tile_y = tile_y[keep_pair]
        total = rows.shape[0]
        if total == 0:
            return order, bins

    tile_keys = tile_y * n_tx + tile_x
    # stable sort by tile keeps the depth order inside each bin
    perm = np.argsort(tile_keys, kind="stable")
    tile_keys = tile_keys[perm]
    rows = rows[perm]
    uniq, starts = np.unique(tile_keys, return_index=True)
    ends = np.append(starts[1:], total)
    for k, s, e in zip(uniq, starts, ends):
        bins[(int(k) // n_tx, int(k) % n_tx)] = rows[s:e]
    return order, bins


# ── compositing ────────────────────────────────────────────────────────


def _tile_pixels(
    ty: int, tx: int, view: CameraView, ts: int
) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    v0, v1 = ty * ts, min((ty + 1) * ts, view.height)
    u0, u1 = tx * ts, min((tx + 1) * ts, view.width)
    vv, uu = np.mgrid[v0:v1, u0:u1]
    return vv.ravel(), uu.ravel()


def composite_tile(
    ps: ProjectedSplats,
    srows: NDArray[np.int64],
    order: NDArray[np.int64],
    uu: NDArray[np.int64],
    vv: NDArray[np.int64],
    settings: RenderSettings,
) -> dict[str, NDArray[np.float64]]:
    """Front-to-back compositing for one tile's pixels.

    srows index into the sorted order; returns per-pixel accumulators and
    the per-(pixel, splat) weights needed by both forward and backward.
    """
    rows = order[srows]
    dt = settings.np_dtype
    cen = ps.center[rows].astype(dt, copy=False)
    du = uu.astype(dt)[:, None] - cen[:, 0][None, :]
    dv = vv.astype(dt)[:, None] - cen[:, 1][None, :]
    A = ps.conic[rows].astype(dt, copy=False)
    power = du * du * (dt(0.5) * A[:, 0, 0])[None, :]
    power += du * dv * A[:, 0, 1][None, :]
    power += dv * dv * (dt(0.5) * A[:, 1, 1])[None, :]
    g = np.exp(-power)
    if settings.chi2_cutoff is not None:
        g[power > dt(0.5 * settings.chi2_cutoff)] = 0.0
    a = np.minimum(ps.alpha[rows].astype(dt, copy=False)[None, :] * g, dt(settings.alpha_max))

    t_incl = np.cumprod(dt(1.0) - a, axis=1)
    t_excl = np.empty_like(t_incl)
    t_excl[:, 0] = 1.0
    t_excl[:, 1:] = t_incl[:, :-1]
    live = t_excl >= dt(settings.transmittance_min)  # prefix property: monotone
    w = a * t_excl
    w[~live] = 0.0

    t_ext = np.concatenate([np.ones((t_incl.shape[0], 1), dtype=dt), t_incl], axis=1)
    n_processed = live.sum(axis=1)
    t_final = np.take_along_axis(t_ext, n_processed[:, None], axis=1)[:, 0]

    color = w @ ps.color[rows].astype(dt, copy=False)
    weight = w.sum(axis=1)
    depth = w @ ps.depth[rows].astype(dt, copy=False)
    return {
        "rows": rows,
        "du": du,
        "dv": dv,
        "g": g,
        "a": a,
        "w": w,
        "live": live,
        "t_excl": t_excl,
        "t_final": t_final,
        "color": color,
        "weight": weight,
        "depth": depth,
    }


def rasterize(
    ps: ProjectedSplats,
    view: CameraView,
    background: NDArray[np.float64],
    settings: RenderSettings = DEFAULT_SETTINGS,
    tile_cache: list | None = None,
) -> RenderOutput:
    """Composite projected splats into an image.

    Passing a list as tile_cache stores each tile's intermediates for a
    following backward pass, sparing it the per-tile recompute.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = view.height, view.width
    color = np.tile(background, (H, W, 1))
    alpha = np.zeros((H, W))
    depth = np.zeros((H, W))
    if ps.index.shape[0]:
        order, bins = sort_and_bin(ps, view, settings)
        ts = settings.tile_size
        for (ty, tx), srows in bins.items():
            vv, uu = _tile_pixels(ty, tx, view, ts)
            acc = composite_tile(ps, srows, order, uu, vv, settings)
            px_color = acc["color"] + acc["t_final"][:, None] * background
            color[vv, uu] = px_color
            alpha[vv, uu] = 1.0 - acc["t_final"]
            wsum = acc["weight"]
            depth[vv, uu] = np.where(wsum > 1e-12, acc["depth"] / np.maximum(wsum, 1e-12), 0.0)
            if tile_cache is not None:
                tile_cache.append((vv, uu, acc))
    return RenderOutput(color=color, alpha=alpha, depth=depth)


def render(
    cloud: GaussianCloud,
    view: CameraView,
    background: NDArray[np.float64] | None = None,
    settings: RenderSettings = DEFAULT_SETTINGS,
) -> RenderOutput:
    """Render a cloud into color, alpha, and expected-depth images."""
    if background is None:
        background = np.zeros(3)
    ps = project_cloud(cloud, view, settings)
    return rasterize(ps, view, np.asarray(background, dtype=np.float64), settings)


def render_trajectory(
    cloud: GaussianCloud,
    views: list[CameraView],
    background: NDArray[np.float64] | None = None,
    settings: RenderSettings = DEFAULT_SETTINGS,
) -> list[RenderOutput]:
    return [render(cloud, v, background, settings) for v in views]
