"""Alpha-compositing volume renderer for color and embeddings.

Color and embedding share the same per-sample weights
``w_n = T_n * (1 - exp(-sigma_n * delta_n))`` with
``T_n = exp(-sum_{k<n} sigma_k * delta_k)``. Rays composite against black.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .field import (FieldGradient, Stencil, VoxelField, interpolate_raw, activate,
                    raw_gradient, scatter, stencil)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass
class RayBatch:
    origins: np.ndarray     # (n, 3)
    directions: np.ndarray  # (n, 3)
    near: np.ndarray        # (n,)
    far: np.ndarray         # (n,)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Ray(self.origins[idx], self.directions[idx], float(self.near[idx]),
                       float(self.far[idx]))
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    @classmethod
    def from_rays(cls, rays: list[Ray]) -> "RayBatch":
        return cls(np.stack([r.origin for r in rays]), np.stack([r.direction for r in rays]),
                   np.array([r.t_near for r in rays]), np.array([r.t_far for r in rays]))


@dataclass
class RenderResult:
    color: np.ndarray
    embedding: np.ndarray
    weights: np.ndarray
    depths: np.ndarray


@dataclass
class RenderBatch:
    color: np.ndarray      # (n, 3)
    embedding: np.ndarray  # (n, dim)
    weights: np.ndarray    # (n, s)
    depths: np.ndarray     # (n, s)
    deltas: np.ndarray     # (n, s)
    transmittance: np.ndarray  # (n, s)

    def __getitem__(self, i) -> RenderResult:
        return RenderResult(self.color[i], self.embedding[i], self.weights[i], self.depths[i])


def make_rays(cam: Camera) -> RayBatch:
    """One ray per pixel through its center, row-major order."""
    rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    cx, cy = cam.principal
    d_cam = np.stack([(cols.ravel() + 0.5 - cx) / cam.focal,
                      (rows.ravel() + 0.5 - cy) / cam.focal,
                      np.ones(rows.size)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n = dirs.shape[0]
    return RayBatch(np.broadcast_to(cam.position, (n, 3)).copy(), dirs,
                    np.full(n, cam.t_near), np.full(n, cam.t_far))


def sample_depths(near: np.ndarray, far: np.ndarray, n_samples: int, stratified: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Depths at bin midpoints (or jittered inside bins) and interval lengths.

    ``delta_n = t_{n+1} - t_n`` and the last interval runs to ``far``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    if stratified:
        if rng is None:
            rng = np.random.default_rng(0)
        u = rng.random((near.shape[0], n_samples))
    else:
        u = np.full((near.shape[0], n_samples), 0.5)
    t = near + (far - near) * (np.arange(n_samples) + u) / n_samples
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far[:, 0] - t[:, -1]
    return t, delta


def composite_weights(sigma: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weights and transmittance, both shaped like ``sigma``."""
    tau = sigma * delta
    trans = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    return trans * -np.expm1(-tau), trans


@dataclass
class _Cache:
    stencil: Stencil
    raw: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    emb: np.ndarray
    batch: RenderBatch


def _forward(field: VoxelField, rays: RayBatch, t: np.ndarray, delta: np.ndarray,
             packed: np.ndarray | None = None) -> _Cache:
    n, s = t.shape
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    st = stencil(field, pts.reshape(-1, 3))
    raw = interpolate_raw(field.packed() if packed is None else packed, st)
    sigma, rgb, emb = activate(raw)
    out = ~st.inside
    sigma[out] = 0.0
    rgb[out] = 0.0
    emb[out] = 0.0
    sigma = sigma.reshape(n, s)
    rgb = rgb.reshape(n, s, 3)
    emb = emb.reshape(n, s, -1)
    w, trans = composite_weights(sigma, delta)
    batch = RenderBatch(np.einsum("ns,nsc->nc", w, rgb), np.einsum("ns,nsc->nc", w, emb),
                        w, t, delta, trans)
    return _Cache(st, raw, sigma, rgb, emb, batch)


def _backward(field: VoxelField, cache: _Cache, d_color: np.ndarray | None,
              d_embedding: np.ndarray | None) -> FieldGradient:
    b = cache.batch
    n, s = b.weights.shape
    dim = cache.emb.shape[-1]
    if d_color is None:
        d_color = np.zeros((n, 3))
    if d_embedding is None:
        d_embedding = np.zeros((n, dim))
    # Color path only: density is treated as a constant inside the embedding composite.
    a = b.weights * np.einsum("nsc,nc->ns", cache.rgb, d_color)
    suffix = np.cumsum(a[:, ::-1], axis=1)[:, ::-1] - a
    trans_next = b.transmittance * np.exp(-cache.sigma * b.deltas)
    g_sigma = b.deltas * (trans_next * np.einsum("nsc,nc->ns", cache.rgb, d_color) - suffix)
    g_rgb = b.weights[..., None] * d_color[:, None, :]
    g_emb = b.weights[..., None] * d_embedding[:, None, :]
    inside = cache.stencil.inside.reshape(n, s)
    g_sigma = np.where(inside, g_sigma, 0.0)
    g_raw = raw_gradient(cache.raw, g_sigma.ravel(), g_rgb.reshape(-1, 3), g_emb.reshape(-1, dim))
    return scatter(field, cache.stencil, g_raw)


def render_rays(field: VoxelField, rays: RayBatch, n_samples: int, stratified: bool = False,
                seed: int = 0) -> RenderBatch:
    t, delta = sample_depths(rays.near, rays.far, n_samples, stratified,
                             np.random.default_rng(seed))
    return _forward(field, rays, t, delta).batch


def render_ray(field: VoxelField, ray: Ray, n_samples: int, stratified: bool = False,
               seed: int = 0) -> RenderResult:
    return render_rays(field, RayBatch.from_rays([ray]), n_samples, stratified, seed)[0]


def render_rays_gradient(field: VoxelField, rays: RayBatch, n_samples: int,
                         d_color: np.ndarray | None, d_embedding: np.ndarray | None,
                         stratified: bool = False, seed: int = 0) -> FieldGradient:
    """Gradient of ``sum(d_color * C) + sum(d_embedding * E)`` w.r.t. the raw grids.

    The sample positions are regenerated from ``seed`` exactly as in
    :func:`render_rays`. The embedding term reaches only the embedding grid and
    the color term reaches only density and color.
    """
    t, delta = sample_depths(rays.near, rays.far, n_samples, stratified,
                             np.random.default_rng(seed))
    cache = _forward(field, rays, t, delta)
    return _backward(field, cache, None if d_color is None else np.atleast_2d(d_color),
                     None if d_embedding is None else np.atleast_2d(d_embedding))


def render_ray_gradient(field: VoxelField, ray: Ray, n_samples: int, d_color, d_embedding,
                        stratified: bool = False, seed: int = 0) -> FieldGradient:
    return render_rays_gradient(field, RayBatch.from_rays([ray]), n_samples, d_color,
                                d_embedding, stratified, seed)


def render_view(field: VoxelField, cam: Camera, n_samples: int, seed: int = 0,
                stratified: bool = False, chunk: int = 4096):
    """Render a full view: ``(rgb (H,W,3), embedding (H,W,dim), weight sum (H,W))``."""
    rays = make_rays(cam)
    packed = field.packed()
    rng = np.random.default_rng(seed)
    rgb, emb, acc = [], [], []
    for start in range(0, len(rays), chunk):
        sub = rays[start:start + chunk]
        t, delta = sample_depths(sub.near, sub.far, n_samples, stratified, rng)
        b = _forward(field, sub, t, delta, packed).batch
        rgb.append(b.color)
        emb.append(b.embedding)
        acc.append(b.weights.sum(axis=1))
    h, w = cam.height, cam.width
    return (np.concatenate(rgb).reshape(h, w, 3), np.concatenate(emb).reshape(h, w, -1),
            np.concatenate(acc).reshape(h, w))
