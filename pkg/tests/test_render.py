import math

import numpy as np
import pytest

from ovfield.camera import Camera, look_at
from ovfield.field import VoxelField, inverse_softplus, logit
from ovfield.render import (Ray, RayBatch, composite_weights, make_rays, render_ray,
                            render_ray_gradient, render_rays, render_view, sample_depths)

import oracles
from test_field import random_field

BOUNDS = [[-1, -1, -1], [1, 1, 1]]


def random_ray(rng):
    o = rng.uniform(-2.5, 2.5, 3)
    target = rng.uniform(-0.5, 0.5, 3)
    d = target - o
    d /= np.linalg.norm(d)
    dist = np.linalg.norm(target - o)
    return Ray(o, d, max(dist - 1.8, 0.01), dist + 1.8)


def test_make_rays_center_pixel_is_optical_axis():
    cam = Camera(np.array([0, 0, 3.0]), look_at([0, 0, 3.0], [0, 0, 0], up=(0, 1, 0)), 50.0,
                 (32.5, 16.5), 33, 65, 1.0, 5.0)
    rays = make_rays(cam)
    assert len(rays) == 33 * 65
    center = rays.directions[16 * 65 + 32]
    np.testing.assert_allclose(center, cam.optical_axis, atol=1e-12)


def test_make_rays_single_pixel():
    cam = Camera(np.zeros(3), np.eye(3), 1.0, (0.5, 0.5), 1, 1, 0.1, 1.0)
    rays = make_rays(cam)
    assert len(rays) == 1
    np.testing.assert_allclose(rays.directions[0], [0, 0, 1])


def test_make_rays_corner_pixel_pinhole():
    rot = look_at([3.0, 1.0, 2.0], [0, 0, 0])
    cam = Camera(np.array([3.0, 1.0, 2.0]), rot, 64.0, (32.0, 32.0), 64, 64, 1.0, 6.0)
    rays = make_rays(cam)
    # Pixel (row 63, col 0): camera-frame direction ((0.5-32)/64, (63.5-32)/64, 1).
    dc = np.array([-31.5 / 64, 31.5 / 64, 1.0])
    expected = rot @ (dc / math.sqrt(dc @ dc))
    np.testing.assert_allclose(rays.directions[63 * 64], expected, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)


def test_sample_depths_midpoints_and_last_interval():
    t, d = sample_depths(np.array([1.0]), np.array([3.0]), 4)
    np.testing.assert_allclose(t[0], [1.25, 1.75, 2.25, 2.75])
    np.testing.assert_allclose(d[0], [0.5, 0.5, 0.5, 0.25])


def test_stratified_samples_stay_in_bins():
    t, _ = sample_depths(np.zeros(100), np.ones(100), 8, True, np.random.default_rng(0))
    bins = np.floor(t * 8)
    assert np.all(bins == np.arange(8))


def test_empty_field_renders_black():
    f = VoxelField.zeros((4, 4, 4), BOUNDS, 3)
    f.density_raw[...] = -1e4
    r = render_ray(f, Ray(np.array([0, 0, -3.0]), np.array([0, 0, 1.0]), 1.0, 5.0), 16)
    assert np.abs(r.color).max() < 1e-12
    assert np.abs(r.embedding).max() < 1e-12
    assert r.weights.max() < 1e-12


def test_opaque_first_hit():
    f = VoxelField.zeros((4, 4, 4), BOUNDS, 3)
    f.density_raw[...] = inverse_softplus(1e7)
    f.color_raw[...] = logit(np.array([1 - 1e-9, 1e-9, 1e-9]))
    u = np.array([0.6, 0.0, 0.8])
    f.embedding[...] = u
    r = render_ray(f, Ray(np.array([0, 0, -0.99]), np.array([0, 0, 1.0]), 0.0, 1.9), 8)
    np.testing.assert_allclose(r.color, [1, 0, 0], atol=1e-4)
    np.testing.assert_allclose(r.embedding, u, atol=1e-4)


def test_matches_loop_oracle_and_weight_invariants(rng):
    worst = 0.0
    for _ in range(100):
        f = random_field(rng, dim=3)
        f.density_raw *= 2.0
        ray = random_ray(rng)
        r = render_ray(f, ray, 8)
        c, e, w, T = oracles.render_ray_loop(f, ray.origin, ray.direction, ray.t_near, ray.t_far, 8)
        worst = max(worst, np.abs(r.color - c).max(), np.abs(r.embedding - e).max(),
                    np.abs(r.weights - w).max())
        assert np.all(r.weights >= 0) and r.weights.sum() <= 1 + 1e-6
        assert np.all(np.diff(T) <= 1e-15) and T[0] == 1.0
    assert worst < 1e-6


def test_color_and_embedding_share_weights(rng):
    f = random_field(rng, dim=5)
    rays = RayBatch.from_rays([random_ray(rng) for _ in range(20)])
    b = render_rays(f, rays, 12, stratified=True, seed=3)
    # Recompute both composites from the returned weights.
    for i in range(len(rays)):
        pts = rays.origins[i] + b.depths[i][:, None] * rays.directions[i]
        samples = [oracles.field_at(f, p) for p in pts]
        col = sum(w * s[1] for w, s in zip(b.weights[i], samples))
        emb = sum(w * s[2] for w, s in zip(b.weights[i], samples))
        np.testing.assert_allclose(b.color[i], col, atol=1e-10)
        np.testing.assert_allclose(b.embedding[i], emb, atol=1e-10)


def test_embedding_linearity(rng):
    f1 = random_field(rng, dim=4)
    f2 = f1.copy()
    f2.embedding[...] = rng.normal(size=f2.embedding.shape)
    mix = f1.copy()
    mix.embedding[...] = 2.0 * f1.embedding - 0.5 * f2.embedding
    rays = RayBatch.from_rays([random_ray(rng) for _ in range(10)])
    e1 = render_rays(f1, rays, 10).embedding
    e2 = render_rays(f2, rays, 10).embedding
    np.testing.assert_allclose(render_rays(mix, rays, 10).embedding, 2 * e1 - 0.5 * e2, atol=1e-10)


def test_stratified_render_deterministic_in_seed(rng):
    f = random_field(rng)
    rays = RayBatch.from_rays([random_ray(rng) for _ in range(5)])
    a = render_rays(f, rays, 16, True, seed=9)
    b = render_rays(f, rays, 16, True, seed=9)
    c = render_rays(f, rays, 16, True, seed=10)
    np.testing.assert_array_equal(a.color, b.color)
    assert not np.array_equal(a.depths, c.depths)


def test_gradient_zero_upstream(rng):
    f = random_field(rng)
    g = render_ray_gradient(f, random_ray(rng), 8, np.zeros(3), np.zeros(3))
    assert g.is_zero()


def test_single_sample_closed_form():
    # One sample at a voxel center of a constant field: dC/dsigma = delta * exp(-sigma delta) * c.
    f = VoxelField.zeros((4, 4, 4), BOUNDS, 2, np.float64)
    f.density_raw[...] = 0.3
    f.color_raw[...] = logit(np.array([0.2, 0.5, 0.7]))
    ray = Ray(np.array([0.25, 0.25, -1.5]), np.array([0, 0, 1.0]), 1.0, 2.0)
    # The single sample sits at t = 1.5 (z = 0), delta = 0.5.
    sigma, delta = np.log1p(np.exp(0.3)), 0.5
    up = np.array([1.0, 0.0, 0.0])
    g = render_ray_gradient(f, ray, 1, up, None)
    d_sigma = delta * np.exp(-sigma * delta) * 0.2
    # Sum over the stencil of dL/draw = dL/dsigma * softplus'(raw), weights summing to one.
    assert g.density.sum() == pytest.approx(d_sigma / (1 + np.exp(-0.3)), rel=1e-10)


def test_gradient_matches_finite_differences(rng):
    h = 1e-3
    checked = 0
    while checked < 100:
        f = random_field(rng, dim=3)
        ray = random_ray(rng)
        gc, ge = rng.normal(size=3), rng.normal(size=3)

        def objective(field_, density_source=None):
            r = render_ray(field_, ray, 6)
            if density_source is None:
                return gc @ r.color + ge @ r.embedding
            # Embedding term with density frozen at density_source.
            frozen = field_.copy()
            frozen.density_raw[...] = density_source.density_raw
            return gc @ r.color + ge @ render_ray(frozen, ray, 6).embedding

        g = render_ray_gradient(f, ray, 6, gc, ge)
        frozen_src = f.copy()
        for name, analytic in (("density_raw", g.density), ("color_raw", g.color),
                               ("embedding", g.embedding)):
            grid = getattr(f, name)
            nz = np.flatnonzero(analytic.ravel())
            for flat in rng.choice(nz, size=min(4, nz.size), replace=False) if nz.size else []:
                idx = np.unravel_index(flat, grid.shape)
                old = grid[idx]
                grid[idx] = old + h
                fp = objective(f, frozen_src)
                grid[idx] = old - h
                fm = objective(f, frozen_src)
                grid[idx] = old
                fd = (fp - fm) / (2 * h)
                a = analytic[idx]
                assert abs(a - fd) <= 1e-3 * max(abs(a), abs(fd), 1e-6), (name, idx, a, fd)
                checked += 1


def test_render_view_empty_and_constant():
    cam = Camera(np.array([0, 0, -3.0]), look_at([0, 0, -3.0], [0, 0, 0], up=(0, 1, 0)), 20.0,
                 (4, 4), 8, 8, 1.0, 5.0)
    f = VoxelField.zeros((4, 4, 4), BOUNDS, 2)
    f.density_raw[...] = -1e4
    rgb, emb, acc = render_view(f, cam, 16)
    assert rgb.shape == (8, 8, 3) and emb.shape == (8, 8, 2) and acc.shape == (8, 8)
    assert np.abs(rgb).max() < 1e-12 and np.abs(emb).max() < 1e-12
    f.density_raw[...] = inverse_softplus(1e6)
    f.color_raw[...] = logit(np.array([0.3, 0.6, 0.9]))
    rgb, _, acc = render_view(f, cam, 16)
    np.testing.assert_allclose(rgb, np.broadcast_to([0.3, 0.6, 0.9], rgb.shape), atol=1e-9)


def test_composite_weights_transmittance():
    w, T = composite_weights(np.array([[1.0, 2.0, 0.0, 3.0]]), np.array([[0.5, 0.5, 0.5, 0.5]]))
    np.testing.assert_allclose(T[0], np.exp(-np.array([0, 0.5, 1.5, 1.5])))
    np.testing.assert_allclose(w[0], T[0] * (1 - np.exp(-np.array([0.5, 1.0, 0.0, 1.5]))))


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.0, 1.0)
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 2.0, 1.0)
