"""Analytic backward pass of the rasterizer.

Given dL/d(color image), produce gradients for every Gaussian parameter
group. The chain runs compositing -> 2D Gaussian -> conic -> projected
covariance -> (Jacobian, camera covariance) -> 3D covariance -> (quat,
log-scale), plus the center, SH-color, and opacity paths.

The compositing stage uses the suffix-sum identity: with weights
w_i = a_i E_i and E_i the exclusive transmittance,

    dC/da_i = c_i E_i - S_i / (1 - a_i),
    S_i = sum_{j>i} c_j w_j + bg * E_final,

so one reverse cumulative sum per tile replaces the per-splat rescan.
Early-exit and support cutoffs are hard zeros in the forward; their
gradients are zero by construction (the masked g already is 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import CameraView, GaussianCloud, quats_to_rotmats
from .render import (
    DEFAULT_SETTINGS,
    ProjectedSplats,
    RenderSettings,
    _tile_pixels,
    composite_tile,
    sh_basis,
    sh_basis_grad,
    sort_and_bin,
)


@dataclass
class ParamGrads:
    """dLoss/d(parameter) arrays, same shapes as the cloud's storage."""

    means: NDArray[np.float64]
    log_scales: NDArray[np.float64]
    rotations: NDArray[np.float64]
    opacities: NDArray[np.float64]
    sh: NDArray[np.float64]

    @staticmethod
    def zeros_like(cloud: GaussianCloud) -> "ParamGrads":
        return ParamGrads(
            np.zeros_like(cloud.means),
            np.zeros_like(cloud.log_scales),
            np.zeros_like(cloud.rotations),
            np.zeros_like(cloud.opacities),
            np.zeros_like(cloud.sh),
        )

    def scaled(self, f: float) -> "ParamGrads":
        return ParamGrads(
            self.means * f,
            self.log_scales * f,
            self.rotations * f,
            self.opacities * f,
            self.sh * f,
        )


def _rotmat_quat_jacobian(qhat: NDArray[np.float64]) -> NDArray[np.float64]:
    """dR/dq for unit quaternions: (M,4) -> (M,4,3,3)."""
    w, x, y, z = qhat.T
    zero = np.zeros_like(w)
    J = np.empty((qhat.shape[0], 4, 3, 3))
    J[:, 0] = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=1,
    )
    J[:, 1] = 2.0 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2 * x, -w], axis=-1),
            np.stack([z, w, -2 * x], axis=-1),
        ],
        axis=1,
    )
    J[:, 2] = 2.0 * np.stack(
        [
            np.stack([-2 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2 * y], axis=-1),
        ],
        axis=1,
    )
    J[:, 3] = 2.0 * np.stack(
        [
            np.stack([-2 * z, -w, x], axis=-1),
            np.stack([w, -2 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=1,
    )
    return J


def render_backward(
    cloud: GaussianCloud,
    view: CameraView,
    ps: ProjectedSplats,
    dL_dcolor: NDArray[np.float64],
    background: NDArray[np.float64],
    settings: RenderSettings = DEFAULT_SETTINGS,
    tile_cache: list | None = None,
) -> ParamGrads:
    """Backpropagate an image-space gradient into cloud parameters.

    ps must be the project_cloud output of the same (cloud, view,
    settings). A tile_cache produced by rasterize skips the per-tile
    recompute; without it tiles are rebuilt here.
    """
    grads = ParamGrads.zeros_like(cloud)
    m = ps.index.shape[0]
    if m == 0:
        return grads
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    d_center = np.zeros((m, 2))
    d_conic = np.zeros((m, 2, 2))
    d_color = np.zeros((m, 3))
    d_alpha = np.zeros(m)

    if tile_cache is None:
        order, bins = sort_and_bin(ps, view, settings)
        ts = settings.tile_size
        tiles = [
            (vv, uu, composite_tile(ps, srows, order, uu, vv, settings))
            for (ty, tx), srows in bins.items()
            for vv, uu in [_tile_pixels(ty, tx, view, ts)]
        ]
    else:
        tiles = tile_cache
    dt = settings.np_dtype
    for vv, uu, acc in tiles:
        rows = acc["rows"]
        cdot = dL_dcolor[vv, uu].astype(dt, copy=False)  # (P,3)
        w = acc["w"]
        g = acc["g"]
        a = acc["a"]
        t_excl = acc["t_excl"]
        cols = ps.color[rows].astype(dt, copy=False)  # (K,3)

        d_color[rows] += w.T @ cdot

        # suffix-sum identity on the channel-contracted contributions:
        # da_k = cdot . (c_k E_k - S_k / (1 - a_k))
        cd = cdot @ cols.T  # (P,K)
        contrib = w * cd
        csum = np.cumsum(contrib, axis=1)
        s_dot = csum[:, -1:] - csum  # exclusive suffix of cdot . (c_j w_j)
        s_dot += (acc["t_final"] * (cdot @ bg.astype(dt)))[:, None]
        da = cd * t_excl
        da -= s_dot / (dt(1.0) - a)
        da[~acc["live"]] = 0.0
        da[a >= dt(settings.alpha_max)] = 0.0  # opacity clamp

        dg = da * ps.alpha[rows].astype(dt, copy=False)[None, :]
        dpower = g * dg
        dpower = -dpower

        du = acc["du"]
        dv = acc["dv"]
        A = ps.conic[rows].astype(dt, copy=False)
        pdu = dpower * du
        pdv = dpower * dv
        ddu = pdu * A[None, :, 0, 0] + pdv * A[None, :, 0, 1]
        ddv = pdu * A[None, :, 0, 1] + pdv * A[None, :, 1, 1]

        d_alpha[rows] += (da * g).sum(axis=0)
        d_center[rows, 0] += -ddu.sum(axis=0)
        d_center[rows, 1] += -ddv.sum(axis=0)
        half_uv = 0.5 * (pdu * dv).sum(axis=0)
        d_conic[rows, 0, 0] += 0.5 * (pdu * du).sum(axis=0)
        d_conic[rows, 0, 1] += half_uv
        d_conic[rows, 1, 0] += half_uv
        d_conic[rows, 1, 1] += 0.5 * (pdv * dv).sum(axis=0)

    # ── conic -> projected covariance ──────────────────────────────────
    A = ps.conic
    d_cov2d = -np.einsum("nij,njk,nkl->nil", A, d_conic, A)

    # ── projected covariance -> J and camera-frame covariance ─────────
    keep = ps.index
    R = view.rotation
    Rq = quats_to_rotmats(cloud.rotations[keep])
    s_act = np.exp(cloud.log_scales[keep])
    M3 = Rq * s_act[:, None, :]
    cov3d = M3 @ np.transpose(M3, (0, 2, 1))
    Vc = R @ cov3d @ R.T
    J = ps.J

    sym = d_cov2d + np.transpose(d_cov2d, (0, 2, 1))
    dJ = np.einsum("nab,nbi,nij->naj", sym, J, Vc)
    dVc = np.einsum("nai,nab,nbj->nij", J, d_cov2d, J)
    d_cov3d = np.einsum("ai,nab,bj->nij", R, dVc, R)

    # ── 3D covariance -> quaternion and log-scale ─────────────────────
    symc = d_cov3d + np.transpose(d_cov3d, (0, 2, 1))
    dM3 = symc @ M3
    dRq = dM3 * s_act[:, None, :]
    d_logs = np.einsum("nab,nab->nb", dM3, Rq) * s_act

    q = cloud.rotations[keep]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    qhat = q / qn
    dRdq = _rotmat_quat_jacobian(qhat)
    dqhat = np.einsum("nab,niab->ni", dRq, dRdq)
    d_quat = (dqhat - (dqhat * qhat).sum(axis=1, keepdims=True) * qhat) / qn

    # ── center and J -> camera-frame mean ──────────────────────────────
    t = ps.t_cam
    X, Y, Z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = view.fx, view.fy
    dt = np.zeros((m, 3))
    # center: u = fx X / Z + cx, v = fy Y / Z + cy (never clamped)
    dt[:, 0] += d_center[:, 0] * fx / Z
    dt[:, 1] += d_center[:, 1] * fy / Z
    dt[:, 2] += -d_center[:, 0] * fx * X / Z**2 - d_center[:, 1] * fy * Y / Z**2
    # J entries; the frustum clamp freezes tx, ty where active
    free_x = ~ps.clamp_x
    free_y = ~ps.clamp_y
    dt[:, 0] += np.where(free_x, dJ[:, 0, 2] * (-fx / Z**2), 0.0)
    dt[:, 1] += np.where(free_y, dJ[:, 1, 2] * (-fy / Z**2), 0.0)
    dt[:, 2] += dJ[:, 0, 0] * (-fx / Z**2) + dJ[:, 1, 1] * (-fy / Z**2)
    dt[:, 2] += np.where(
        free_x, dJ[:, 0, 2] * (2.0 * fx * X / Z**3), dJ[:, 0, 2] * (fx * ps.tx / Z**2)
    )
    dt[:, 2] += np.where(
        free_y, dJ[:, 1, 2] * (2.0 * fy * Y / Z**3), dJ[:, 1, 2] * (fy * ps.ty / Z**2)
    )
    d_mean = dt @ R  # x_cam = R x_world + t, so dL/dx_world = R^T dL/dx_cam

    # ── color -> SH coefficients and view direction ────────────────────
    clip_open = (ps.color_preclip > 0.0) & (ps.color_preclip < 1.0)
    dcol = np.where(clip_open, d_color, 0.0)
    degree = cloud.sh_degree
    basis = sh_basis(ps.dirs, degree)
    d_sh = np.einsum("nc,nk->nkc", dcol, basis)
    if degree > 0:
        bgrad = sh_basis_grad(ps.dirs, degree)
        sh_keep = cloud.sh[keep]
        ddir = np.einsum("nc,nkc,nka->na", dcol, sh_keep, bgrad)
        r_eff = np.maximum(ps.dist, 1e-12)
        radial = (ddir * ps.dirs).sum(axis=1, keepdims=True)
        d_mean += (ddir - ps.dirs * radial) / r_eff[:, None]

    d_opacity = d_alpha * ps.alpha * (1.0 - ps.alpha)

    grads.means[keep] += d_mean
    grads.log_scales[keep] += d_logs
    grads.rotations[keep] += d_quat
    grads.opacities[keep] += d_opacity
    grads.sh[keep] += d_sh
    return grads
