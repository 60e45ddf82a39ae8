"""Analytic-vs-finite-difference checks for the rasterizer backward pass."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from splatr.core import GaussianCloud, inverse_sigmoid
from splatr.grads import render_backward
from splatr.render import RenderSettings, project_cloud, rasterize

from oracles import fd_param_grads
from scenes import dc_for_rgb, make_fd_scene, make_test_view

BG = np.array([0.15, 0.1, 0.2])


def quadratic_loss(cloud, view, target, settings):
    out = rasterize(project_cloud(cloud, view, settings), view, BG, settings)
    return 0.5 * float(np.sum((out.color - target) ** 2))


def analytic_grads(cloud, view, target, settings):
    ps = project_cloud(cloud, view, settings)
    out = rasterize(ps, view, BG, settings)
    return render_backward(cloud, view, ps, out.color - target, BG, settings)


def check_scene(seed, rtol=1e-3, eps=1e-5):
    cloud, view, target, settings = make_fd_scene(seed)
    ag = analytic_grads(cloud, view, target, settings)
    fd = fd_param_grads(
        lambda c: quadratic_loss(c, view, target, settings), cloud, eps=eps
    )
    failures = []
    for attr in ("means", "log_scales", "rotations", "opacities", "sh"):
        a = getattr(ag, attr)
        f = fd[attr]
        mask = np.abs(f) > 1e-6
        if not mask.any():
            continue
        rel = np.abs(a[mask] - f[mask]) / np.maximum(np.abs(f[mask]), 1e-12)
        if rel.max() > rtol:
            failures.append((attr, float(rel.max())))
    return failures


class TestFiniteDifferences:
    @pytest.mark.parametrize("seed", list(range(12)))
    def test_all_groups_match_fd(self, seed):
        failures = check_scene(seed)
        assert not failures, f"scene {seed}: rel errors {failures}"

    def test_zero_upstream_gives_zero_grads(self):
        cloud, view, target, settings = make_fd_scene(3)
        ps = project_cloud(cloud, view, settings)
        g = render_backward(
            cloud, view, ps, np.zeros((view.height, view.width, 3)), BG, settings
        )
        for attr in ("means", "log_scales", "rotations", "opacities", "sh"):
            assert_allclose(getattr(g, attr), 0.0)

    def test_quat_grad_orthogonal_to_unit_quaternion(self):
        # normalization projects out the radial component exactly
        cloud, view, target, settings = make_fd_scene(5)
        norms = np.linalg.norm(cloud.rotations, axis=1)
        assert_allclose(norms, 1.0, atol=1e-9)  # builder normalizes
        g = analytic_grads(cloud, view, target, settings)
        radial = (g.rotations * cloud.rotations).sum(axis=1)
        assert_allclose(radial, 0.0, atol=1e-9)

    def test_culled_gaussian_gets_no_gradient(self):
        view = make_test_view(width=8, height=8, fx=10.0, fy=10.0)
        cloud = GaussianCloud(
            means=np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -3.0]]),
            log_scales=np.full((2, 3), -1.0),
            rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
            opacities=np.array([inverse_sigmoid(0.5)] * 2),
            sh=np.stack([dc_for_rgb([0.7, 0.3, 0.3]), dc_for_rgb([0.3, 0.7, 0.3])]),
        )
        settings = RenderSettings(chi2_cutoff=None)
        target = np.zeros((8, 8, 3))
        g = analytic_grads(cloud, view, target, settings)
        assert_allclose(g.means[1], 0.0)
        assert_allclose(g.opacities[1], 0.0)
        assert np.abs(g.means[0]).max() > 0.0

    def test_grads_match_fd_with_support_cutoff_safely_inside(self):
        # with a footprint cutoff the check still passes when every probe
        # point is far from the boundary: one fat splat centered on-image
        view = make_test_view(width=7, height=7, fx=12.0, fy=12.0)
        cloud = GaussianCloud(
            means=np.array([[0.0, 0.0, 1.5]]),
            log_scales=np.full((1, 3), -0.3),
            rotations=np.array([[1.0, 0, 0, 0]]),
            opacities=np.array([inverse_sigmoid(0.6)]),
            sh=dc_for_rgb([0.25, 0.55, 0.75])[None],
        )
        settings = RenderSettings(chi2_cutoff=9.0)
        rng = np.random.default_rng(0)
        target = rng.uniform(0, 1, (7, 7, 3))
        ag = analytic_grads(cloud, view, target, settings)
        fd = fd_param_grads(
            lambda c: quadratic_loss(c, view, target, settings), cloud, eps=1e-6
        )
        for attr in ("means", "log_scales", "opacities"):
            a, f = getattr(ag, attr), fd[attr]
            mask = np.abs(f) > 1e-6
            rel = np.abs(a[mask] - f[mask]) / np.abs(f[mask])
            assert rel.max() < 2e-3, attr
