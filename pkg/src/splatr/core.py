"""Domain types and geometry shared by every other module.

Conventions, asserted in tests rather than re-documented at each call site:

* quaternions are scalar-first (w, x, y, z) and normalized before use
* camera poses are world->camera (x_cam = R @ x_world + t)
* pixel coordinates are continuous with integer values at pixel centers
* depth images use 0 as the invalid-pixel sentinel
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray


# ── small numeric helpers ──────────────────────────────────────────────


def quat_normalize(q: NDArray[np.float64]) -> NDArray[np.float64]:
    """Return q / |q|. Raises on zero or non-finite input."""
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"cannot normalize quaternion {q!r}")
    return q / n


def quat_to_rotmat(q: NDArray[np.float64]) -> NDArray[np.float64]:
    """Rotation matrix for a scalar-first unit quaternion.

    The input is normalized internally, so callers may pass raw
    optimizer state.
    """
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(rot: NDArray[np.float64]) -> NDArray[np.float64]:
    """Scalar-first unit quaternion of a rotation matrix, with w >= 0.

    Shepperd's method: branch on the largest of trace and diagonal
    entries so the divisor is always well away from zero.
    """
    m = np.asarray(rot, dtype=np.float64).reshape(3, 3)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > max(m[0, 0], m[1, 1], m[2, 2]):
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quats_to_rotmats(q: NDArray[np.float64]) -> NDArray[np.float64]:
    """Vectorized quat_to_rotmat: (N,4) -> (N,3,3), normalizing each row."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=1, keepdims=True)
    if not np.all(np.isfinite(n)) or np.any(n == 0.0):
        raise ValueError("non-finite or zero-norm quaternion in batch")
    w, x, y, z = (q / n).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def sigmoid(x: NDArray[np.float64] | float) -> NDArray[np.float64] | float:
    # stable in both tails
    return np.where(
        np.asarray(x) >= 0,
        1.0 / (1.0 + np.exp(-np.clip(x, -500, 500))),
        np.exp(np.clip(x, -500, 500)) / (1.0 + np.exp(np.clip(x, -500, 500))),
    )


def inverse_sigmoid(p: NDArray[np.float64] | float) -> NDArray[np.float64] | float:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ── domain types ───────────────────────────────────────────────────────


@dataclass
class ObjectState:
    """Rigid-body state of one scene object.

    openness is None for objects that cannot be opened; otherwise a
    scalar in [0, 1].
    """

    object_id: str
    position: NDArray[np.float64]
    orientation: NDArray[np.float64]
    openness: float | None = None

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(self.orientation)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"orientation norm {n} != 1 for {self.object_id}")
        if self.openness is not None and not 0.0 <= self.openness <= 1.0:
            raise ValueError(f"openness {self.openness} outside [0,1]")


@dataclass
class WorldState:
    """Ordered collection of object states; ids must be unique."""

    objects: list[ObjectState] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object_id in WorldState")

    def get(self, object_id: str) -> ObjectState:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)


@dataclass
class CameraView:
    """Pinhole intrinsics plus a world->camera rigid transform.

    rotation/translation satisfy x_cam = rotation @ x_world + translation.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        RtR = self.rotation.T @ self.rotation
        if not np.allclose(RtR, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("pose rotation must have det +1")

    @property
    def camera_center(self) -> NDArray[np.float64]:
        """Camera origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        return points @ self.rotation.T + self.translation

    def project(self, points_world: NDArray[np.float64]) -> NDArray[np.float64]:
        """Project world points to (u, v, z) pixel coordinates + camera depth.

        No culling here; callers decide what to do with z <= 0.
        """
        pc = self.world_to_camera(np.atleast_2d(points_world))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v, z], axis=1)


@dataclass
class Gaussian:
    """One splat primitive. Storage domains match the optimizer:

    log_scale activates through exp, opacity through the logistic.
    sh holds 3*(L+1)^2 coefficients, DC first, as a (n_coeffs, 3) block.
    """

    mean: NDArray[np.float64]
    log_scale: NDArray[np.float64]
    rotation: NDArray[np.float64]
    opacity: float
    sh: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)


@dataclass
class GaussianCloud:
    """Struct-of-arrays over Gaussian fields.

    means (N,3), log_scales (N,3), rotations (N,4) scalar-first,
    opacities (N,) pre-activation, sh (N, (L+1)^2, 3).
    """

    means: NDArray[np.float64]
    log_scales: NDArray[np.float64]
    rotations: NDArray[np.float64]
    opacities: NDArray[np.float64]
    sh: NDArray[np.float64]
    sh_degree: int = 0

    def __post_init__(self) -> None:
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(n)
        coeffs = (self.sh_degree + 1) ** 2
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64).reshape(n, coeffs, 3)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity=float(self.opacities[i]),
            sh=self.sh[i].copy(),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacities.copy(),
            self.sh.copy(),
            self.sh_degree,
        )

    @staticmethod
    def empty(sh_degree: int = 0) -> "GaussianCloud":
        coeffs = (sh_degree + 1) ** 2
        return GaussianCloud(
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 4)),
            np.zeros((0,)),
            np.zeros((0, coeffs, 3)),
            sh_degree,
        )


@dataclass
class PointCloud:
    points: NDArray[np.float64]
    colors: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] != self.colors.shape[0]:
            raise ValueError("points/colors length mismatch")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite point coordinates")
        if self.colors.size and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise ValueError("colors outside [0,1]")

    def __len__(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud.empty()
        return PointCloud(
            np.concatenate([c.points for c in clouds], axis=0),
            np.concatenate([c.colors for c in clouds], axis=0),
        )


# ── geometry operations ────────────────────────────────────────────────


def covariance_from(
    log_scale: NDArray[np.float64], rotation: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Covariance Sigma = R S S^T R^T from log-scales and a quaternion.

    Parameters
    ----------
    log_scale : (3,) log-domain scales; activated here by exp.
    rotation : (4,) scalar-first quaternion, normalized internally.

    Returns
    -------
    (3, 3) symmetric positive-definite matrix.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not np.all(np.isfinite(log_scale)) or not np.all(np.isfinite(rotation)):
        raise ValueError("non-finite covariance parameters")
    R = quat_to_rotmat(np.asarray(rotation, dtype=np.float64))
    M = R * np.exp(log_scale)[None, :]  # R @ diag(s)
    return M @ M.T


def covariances_from(
    log_scales: NDArray[np.float64], rotations: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Vectorized covariance_from: (N,3),(N,4) -> (N,3,3)."""
    R = quats_to_rotmats(rotations)
    M = R * np.exp(np.asarray(log_scales, dtype=np.float64))[:, None, :]
    return M @ np.transpose(M, (0, 2, 1))


def evaluate_gaussian(g: Gaussian, x: NDArray[np.float64]) -> float:
    """Unnormalized density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)) in (0, 1]."""
    cov = covariance_from(g.log_scale, g.rotation)
    d = np.asarray(x, dtype=np.float64).reshape(3) - g.mean
    m = d @ np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * m))


def backproject(
    view: CameraView,
    depth: NDArray[np.float64],
    color: NDArray[np.float64] | None = None,
) -> PointCloud:
    """Lift a depth image to a world-frame point cloud.

    Pixels with depth <= 0 (the invalid sentinel) are skipped. When a
    color image is given it must be H x W x 3 in [0,1]; otherwise points
    are mid-gray.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (view.height, view.width):
        raise ValueError(f"depth shape {depth.shape} != view {view.height, view.width}")
    vv, uu = np.nonzero(depth > 0)
    z = depth[vv, uu]
    x = (uu - view.cx) / view.fx * z
    y = (vv - view.cy) / view.fy * z
    pts_cam = np.stack([x, y, z], axis=1)
    pts_world = (pts_cam - view.translation) @ view.rotation
    if color is None:
        cols = np.full((pts_world.shape[0], 3), 0.5)
    else:
        color = np.asarray(color, dtype=np.float64)
        cols = color[vv, uu]
    return PointCloud(pts_world, cols)
