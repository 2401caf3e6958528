"""Relevancy scoring against query embeddings.

A field trained on both supervision levels stores ``2 * D`` embedding
channels: the object level (which also carries the background) followed by
the part level. A field with exactly ``D`` channels is treated as having one
level that serves as both.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera
from .errors import ConfigError, ConsistencyError
from .field import VoxelField, sample_points, softplus
from .render import render_view
from .scene_oracle import Level
from .tensorio import read_tensor

DENSITY_FLOOR = 0.01
DEFAULT_LEVEL_PIXELS = 100


@dataclass
class Query:
    embedding: np.ndarray
    tau: float = 0.5
    n_pixels: int = DEFAULT_LEVEL_PIXELS
    text: str = ""

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64).ravel()
        if abs(np.linalg.norm(self.embedding) - 1.0) > 1e-6:
            raise ConfigError("query embedding must be unit length (use Query.from_vector)")
        if self.n_pixels < 1:
            raise ConfigError("n_pixels must be >= 1")

    @classmethod
    def from_vector(cls, vec, **kwargs) -> "Query":
        v = np.asarray(vec, dtype=np.float64).ravel()
        n = np.linalg.norm(v)
        if n == 0:
            raise ConfigError("query embedding is the zero vector")
        return cls(v / n, **kwargs)

    @property
    def dim(self) -> int:
        return self.embedding.shape[0]


def parse_query_file(path) -> Query:
    """Read a ``key=value`` query file.

    Keys: ``embedding_file`` (OFTN tensor, path relative to the query file),
    ``tau``, ``n_pixels``, ``text``.
    """
    path = Path(path)
    kv = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ("embedding_file", "tau", "n_pixels", "text"):
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        kv[key] = value
    if "embedding_file" not in kv:
        raise ConfigError(f"{path}: embedding_file is required")
    vec = read_tensor(path.parent / kv["embedding_file"])
    return Query.from_vector(vec, tau=float(kv.get("tau", 0.5)),
                             n_pixels=int(kv.get("n_pixels", DEFAULT_LEVEL_PIXELS)),
                             text=kv.get("text", ""))


def split_levels(emb: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(object-level, part-level) views of an embedding array's last axis."""
    c = emb.shape[-1]
    if c == 2 * dim:
        return emb[..., :dim], emb[..., dim:]
    if c == dim:
        return emb, emb
    raise ConsistencyError(f"field has {c} embedding channels; query dimension is {dim}")


def point_relevancy(field_: VoxelField, x, q: Query, level: Level = Level.OBJECT) -> float:
    _, _, emb, _, _ = sample_points(field_, np.asarray(x, dtype=np.float64)[None])
    obj, part = split_levels(emb[0], q.dim)
    return float((obj if level is Level.OBJECT else part) @ q.embedding)


def select_level(object_scores: np.ndarray, part_scores: np.ndarray, n_pixels: int) -> Level:
    """Part level iff at least ``n_pixels`` part scores beat the best object score."""
    beat = np.count_nonzero(np.asarray(part_scores) > np.max(object_scores))
    return Level.PART if beat >= n_pixels else Level.OBJECT


@dataclass
class RelevancyMap:
    view_id: int
    object_scores: np.ndarray
    part_scores: np.ndarray
    selected_level: Level

    @property
    def selected_scores(self) -> np.ndarray:
        return self.object_scores if self.selected_level is Level.OBJECT else self.part_scores


def relevancy_from_embeddings(emb: np.ndarray, q: Query, view_id: int = 0) -> RelevancyMap:
    """Score an (H, W, C) rendered embedding image against ``q``."""
    obj, part = split_levels(emb, q.dim)
    s_obj = obj @ q.embedding
    s_part = part @ q.embedding
    return RelevancyMap(view_id, s_obj, s_part, select_level(s_obj, s_part, q.n_pixels))


def view_relevancy(field_: VoxelField, cam: Camera, q: Query, n_samples: int = 48,
                   view_id: int = 0) -> RelevancyMap:
    _, emb, _ = render_view(field_, cam, n_samples)
    return relevancy_from_embeddings(emb, q, view_id)


def segment_view(rm: RelevancyMap, tau: float) -> np.ndarray:
    return rm.selected_scores > tau


def decompose_3d(field_: VoxelField, q: Query, stride: int = 1, level: Level | str = Level.OBJECT,
                 density_floor: float = DENSITY_FLOOR, tau: float | None = None) -> np.ndarray:
    """Voxels whose center scores above ``tau`` and is not empty space.

    Voxel centers are scored every ``stride`` voxels and each result fills
    its ``stride^3`` block. ``level="auto"`` keeps whichever level reaches
    the higher maximum score over non-empty voxels.
    """
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    tau = q.tau if tau is None else tau
    dim = q.dim
    sub = (slice(None, None, stride),) * 3
    dens = softplus(field_.density_raw[sub].astype(np.float64))
    obj, part = split_levels(field_.embedding[sub].astype(np.float64), dim)
    s_obj, s_part = obj @ q.embedding, part @ q.embedding
    solid = dens > density_floor
    if level == "auto":
        best = lambda s: s[solid].max() if solid.any() else -np.inf
        level = Level.PART if best(s_part) > best(s_obj) else Level.OBJECT
    scores = s_obj if Level(level) is Level.OBJECT else s_part
    coarse = (scores > tau) & solid
    full = coarse.repeat(stride, 0).repeat(stride, 1).repeat(stride, 2)
    res = field_.resolution
    return np.ascontiguousarray(full[:res[0], :res[1], :res[2]])
