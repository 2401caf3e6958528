"""Dense voxel grid holding raw density, color and embedding values.

Values live at voxel centers and are trilinearly interpolated in raw space,
then activated: softplus for density, logistic for color, identity for the
embedding. Nothing here takes a viewing direction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .errors import FormatError

CHECKPOINT_MAGIC = b"OFCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI3I6fI")


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.clip(y, 1e-300, 30.0))))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class FieldSample:
    density: float
    color: np.ndarray
    embedding: np.ndarray


@dataclass
class FieldGradient:
    """Dense gradient with the same layout as the field's raw grids."""

    density: np.ndarray
    color: np.ndarray
    embedding: np.ndarray

    @classmethod
    def zeros_like(cls, field: "VoxelField") -> "FieldGradient":
        return cls(np.zeros(field.density_raw.shape), np.zeros(field.color_raw.shape),
                   np.zeros(field.embedding.shape))

    def __iadd__(self, other: "FieldGradient") -> "FieldGradient":
        self.density += other.density
        self.color += other.color
        self.embedding += other.embedding
        return self

    def nonzero_voxels(self) -> np.ndarray:
        """Integer (k, 3) array of voxels with any nonzero component."""
        touched = (self.density != 0) | (self.color != 0).any(-1) | (self.embedding != 0).any(-1)
        return np.argwhere(touched)

    def is_zero(self) -> bool:
        return not (self.density.any() or self.color.any() or self.embedding.any())


@dataclass
class VoxelField:
    """Raw grids indexed ``[ix, iy, iz, channel]``; bounds is ``[[lo], [hi]]``."""

    density_raw: np.ndarray
    color_raw: np.ndarray
    embedding: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        res = self.density_raw.shape
        if len(res) != 3 or min(res) < 1:
            raise ValueError(f"density grid must be 3-D, got shape {res}")
        if self.color_raw.shape != (*res, 3):
            raise ValueError("color grid resolution differs from density grid")
        if self.embedding.ndim != 4 or self.embedding.shape[:3] != res:
            raise ValueError("embedding grid resolution differs from density grid")
        if not (self.bounds[1] > self.bounds[0]).all():
            raise ValueError("bounds must satisfy lo < hi on every axis")

    @classmethod
    def zeros(cls, resolution, bounds, dim: int, dtype=np.float32) -> "VoxelField":
        res = tuple(int(r) for r in resolution)
        return cls(np.zeros(res, dtype), np.zeros((*res, 3), dtype),
                   np.zeros((*res, dim), dtype), np.asarray(bounds, dtype=np.float64))

    @classmethod
    def initial(cls, resolution, bounds, dim: int, seed: int = 0, density_raw: float = -5.0,
                noise: float = 0.01, dtype=np.float32) -> "VoxelField":
        """Near-empty starting point for training: low density, gray color, zero embedding."""
        f = cls.zeros(resolution, bounds, dim, dtype)
        rng = np.random.default_rng(seed)
        f.density_raw[...] = density_raw + noise * rng.standard_normal(f.density_raw.shape)
        f.color_raw[...] = noise * rng.standard_normal(f.color_raw.shape)
        return f

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.density_raw.shape)

    @property
    def dim(self) -> int:
        return self.embedding.shape[-1]

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / np.array(self.resolution)

    def voxel_centers(self) -> np.ndarray:
        """World positions of all voxel centers, shape (nx, ny, nz, 3)."""
        axes = [self.bounds[0, a] + (np.arange(n) + 0.5) * self.voxel_size[a]
                for a, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "VoxelField":
        return VoxelField(self.density_raw.copy(), self.color_raw.copy(),
                          self.embedding.copy(), self.bounds.copy())

    def packed(self) -> np.ndarray:
        """All raw channels as one (num_voxels, 4 + dim) array."""
        n = self.density_raw.size
        return np.concatenate([self.density_raw.reshape(n, 1), self.color_raw.reshape(n, 3),
                               self.embedding.reshape(n, self.dim)], axis=1)

    def apply_update(self, grad: FieldGradient, lr_radiance: float, lr_embedding: float) -> None:
        """Plain gradient-descent step, in place."""
        if lr_radiance != 0.0:
            self.density_raw -= (lr_radiance * grad.density).astype(self.density_raw.dtype)
            self.color_raw -= (lr_radiance * grad.color).astype(self.color_raw.dtype)
        if lr_embedding != 0.0:
            self.embedding -= (lr_embedding * grad.embedding).astype(self.embedding.dtype)

    def bitwise_equal(self, other: "VoxelField") -> bool:
        return all(a.dtype == b.dtype and a.tobytes() == b.tobytes() for a, b in [
            (self.density_raw, other.density_raw), (self.color_raw, other.color_raw),
            (self.embedding, other.embedding), (self.bounds, other.bounds)])


@dataclass
class Stencil:
    """Trilinear support of a batch of points: 8 flat voxel indices and weights each."""

    index: np.ndarray   # (n, 8) int64
    weight: np.ndarray  # (n, 8) float64, zero for points outside the bounds
    inside: np.ndarray  # (n,) bool


@numba.njit(cache=True)
def _axis_support(x, lo, size, n):
    u = (x - lo) / size - 0.5
    f = np.floor(u)
    k = np.int64(f)
    return min(max(k, 0), n - 1), min(max(k + 1, 0), n - 1), u - f


@numba.njit(cache=True)
def _stencil_kernel(xs, lo, hi, size, res, index, weight, inside):
    ny, nz = res[1], res[2]
    for i in range(xs.shape[0]):
        x, y, z = xs[i, 0], xs[i, 1], xs[i, 2]
        ok = (lo[0] <= x <= hi[0]) and (lo[1] <= y <= hi[1]) and (lo[2] <= z <= hi[2])
        inside[i] = ok
        x0, x1, fx = _axis_support(x, lo[0], size[0], res[0])
        y0, y1, fy = _axis_support(y, lo[1], size[1], res[1])
        z0, z1, fz = _axis_support(z, lo[2], size[2], res[2])
        c = 0
        for ix, wx in ((x0, 1.0 - fx), (x1, fx)):
            for iy, wy in ((y0, 1.0 - fy), (y1, fy)):
                for iz, wz in ((z0, 1.0 - fz), (z1, fz)):
                    index[i, c] = (ix * ny + iy) * nz + iz
                    weight[i, c] = wx * wy * wz if ok else 0.0
                    c += 1


@numba.njit(cache=True)
def _gather_kernel(packed, index, weight):
    n = index.shape[0]
    k = packed.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for c in range(8):
            w = weight[i, c]
            if w == 0.0:
                continue
            j = index[i, c]
            for q in range(k):
                out[i, q] += w * packed[j, q]
    return out


@numba.njit(cache=True)
def _scatter_kernel(g, index, weight, nvox):
    k = g.shape[1]
    out = np.zeros((nvox, k))
    for i in range(index.shape[0]):
        for c in range(8):
            w = weight[i, c]
            if w == 0.0:
                continue
            j = index[i, c]
            for q in range(k):
                out[j, q] += w * g[i, q]
    return out


def stencil(field: VoxelField, xs: np.ndarray) -> Stencil:
    xs = np.ascontiguousarray(np.asarray(xs, dtype=np.float64).reshape(-1, 3))
    n = xs.shape[0]
    index = np.empty((n, 8), dtype=np.int64)
    weight = np.empty((n, 8), dtype=np.float64)
    inside = np.empty(n, dtype=np.bool_)
    _stencil_kernel(xs, field.bounds[0], field.bounds[1], field.voxel_size,
                    np.array(field.resolution, dtype=np.int64), index, weight, inside)
    return Stencil(index, weight, inside)


def interpolate_raw(packed: np.ndarray, st: Stencil) -> np.ndarray:
    return _gather_kernel(np.ascontiguousarray(packed, dtype=np.float64), st.index, st.weight)


def activate(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return softplus(raw[:, 0]), expit(raw[:, 1:4]), raw[:, 4:]


def sample_points(field: VoxelField, xs: np.ndarray, packed: np.ndarray | None = None):
    """Vectorised :func:`sample`.

    Returns ``(density (n,), color (n, 3), embedding (n, dim), raw (n, 4+dim), stencil)``.
    Points outside the bounds get all-zero outputs, including zero color.
    """
    st = stencil(field, xs)
    if packed is None:
        packed = field.packed()
    raw = interpolate_raw(packed, st)
    sigma, rgb, emb = activate(raw)
    out = ~st.inside
    sigma[out] = 0.0
    rgb[out] = 0.0
    emb[out] = 0.0
    return sigma, rgb, emb, raw, st


def sample(field: VoxelField, x) -> FieldSample:
    sigma, rgb, emb, _, _ = sample_points(field, np.asarray(x, dtype=np.float64)[None])
    return FieldSample(float(sigma[0]), rgb[0], emb[0])


def raw_gradient(raw: np.ndarray, d_density, d_color, d_embedding) -> np.ndarray:
    """Chain rule through the activations: upstream w.r.t. activated values -> raw."""
    g = np.empty_like(raw)
    g[:, 0] = d_density * expit(raw[:, 0])
    s = expit(raw[:, 1:4])
    g[:, 1:4] = d_color * s * (1.0 - s)
    g[:, 4:] = d_embedding
    return g


def scatter(field: VoxelField, st: Stencil, g_raw: np.ndarray) -> FieldGradient:
    """Distribute per-point raw gradients onto the grid with the trilinear weights.

    Accumulation runs in a fixed point order, so results are reproducible.
    """
    grid = _scatter_kernel(np.ascontiguousarray(g_raw, dtype=np.float64), st.index, st.weight,
                           field.density_raw.size)
    res = field.resolution
    return FieldGradient(grid[:, 0].reshape(res), grid[:, 1:4].reshape(*res, 3),
                         grid[:, 4:].reshape(*res, field.dim))


def sample_gradient(field: VoxelField, x, upstream: FieldSample) -> FieldGradient:
    """Gradient of ``<upstream, sample(field, x)>`` w.r.t. the raw grids."""
    xs = np.asarray(x, dtype=np.float64)[None]
    st = stencil(field, xs)
    raw = interpolate_raw(field.packed(), st)
    g = raw_gradient(raw, np.array([upstream.density]), np.asarray(upstream.color)[None],
                     np.asarray(upstream.embedding)[None])
    return scatter(field, st, g)


def _x_fastest(grid: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(grid, (2, 1, 0, 3)), dtype="<f4")


def checkpoint_save(field: VoxelField) -> bytes:
    nx, ny, nz = field.resolution
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, nx, ny, nz,
                          *field.bounds.ravel().tolist(), field.dim)
    return b"".join([header, _x_fastest(field.density_raw[..., None]).tobytes(),
                     _x_fastest(field.color_raw).tobytes(), _x_fastest(field.embedding).tobytes()])


def checkpoint_load(buf: bytes) -> VoxelField:
    if len(buf) < _HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, nx, ny, nz, *rest = _HEADER.unpack_from(buf)
    bounds, dim = rest[:6], rest[6]
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    nvox = nx * ny * nz
    expected = _HEADER.size + nvox * (4 + dim) * 4
    if len(buf) != expected:
        raise FormatError(f"checkpoint size {len(buf)} != expected {expected}")
    off = _HEADER.size
    grids = []
    for ch in (1, 3, dim):
        arr = np.frombuffer(buf, dtype="<f4", count=nvox * ch, offset=off)
        grids.append(np.ascontiguousarray(arr.reshape(nz, ny, nx, ch).transpose(2, 1, 0, 3),
                                          dtype=np.float32))
        off += nvox * ch * 4
    return VoxelField(grids[0][..., 0].copy(), grids[1], grids[2],
                      np.array(bounds, dtype=np.float64).reshape(2, 3))


def checkpoint_header_size() -> int:
    return _HEADER.size
