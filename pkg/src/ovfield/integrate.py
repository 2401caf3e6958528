"""Cross-view alignment and fusion of mask embeddings.

Each mask is matched to the tracking id that occurs most often under it;
masks sharing ``(id, level)`` form one object whose embeddings are summed and
renormalised. The fused vectors are then painted back into per-view,
per-level embedding images that supervise the embedding field.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, DegenerateFusionError, FormatError
from .scene_oracle import CorruptionConfig, Level, ProposalSet, SyntheticScene
from .tensorio import read_tensor

logger = logging.getLogger(__name__)

FUSION_EPS = 1e-8


def align_mask(mask: np.ndarray, id_map: np.ndarray) -> int:
    """Most frequent tracking id under ``mask``; ties go to the smallest id."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != id_map.shape:
        raise ConsistencyError(f"mask shape {mask.shape} != id_map shape {id_map.shape}")
    if not mask.any():
        raise ValueError("cannot align an empty mask")
    counts = np.bincount(np.asarray(id_map)[mask].astype(np.int64))
    return int(np.argmax(counts))


def fuse_embeddings(embeddings) -> np.ndarray:
    """Sum of the per-view unit embeddings, rescaled to unit length."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise ValueError("need a nonempty list of embeddings")
    total = e.sum(axis=0)
    norm = np.linalg.norm(total)
    if norm < FUSION_EPS:
        raise DegenerateFusionError(f"embeddings cancel out (|sum| = {norm:.3g})")
    return total / norm


@dataclass
class AlignedObject:
    object_key: int
    level: Level
    observations: list[tuple[int, int]] = field(default_factory=list)
    embeddings: list[np.ndarray] = field(default_factory=list)
    fused: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.observations)


@dataclass
class IntegrationIssue:
    kind: str  # "skipped-mask" or "degenerate-fusion"
    detail: str
    view_id: int | None = None
    mask_index: int | None = None
    object_key: int | None = None


def lift_ids(id_map: np.ndarray, parents: dict[int, int] | None) -> np.ndarray:
    """Replace part tracking ids by their whole-object ids."""
    if not parents:
        return id_map
    lut = np.arange(max(int(id_map.max(initial=0)), max(parents)) + 1)
    for child, parent in parents.items():
        lut[child] = parent
    return lut[id_map]


def integrate_views(proposal_sets: list[ProposalSet], parents: dict[int, int] | None = None,
                    issues: list[IntegrationIssue] | None = None) -> list[AlignedObject]:
    """Group every mask by ``(aligned id, level)`` and fuse each group.

    ``parents`` maps part tracking ids to whole-object ids. When given,
    object-level masks are aligned against the lifted id map so a whole
    object made of parts keeps one identity across views. Skipped masks and
    dropped objects are appended to ``issues`` and logged.
    """
    if issues is None:
        issues = []
    view_ids = [ps.view_id for ps in proposal_sets]
    if len(set(view_ids)) != len(view_ids):
        raise ConsistencyError("view ids must be unique")
    groups: dict[tuple[int, int], AlignedObject] = {}
    for ps in sorted(proposal_sets, key=lambda s: s.view_id):
        lifted = lift_ids(ps.id_map, parents)
        for i, m in enumerate(ps.masks):
            ids = lifted if m.level is Level.OBJECT else ps.id_map
            try:
                key = align_mask(m.pixels, ids)
            except (ValueError, ConsistencyError) as exc:
                issues.append(IntegrationIssue("skipped-mask", str(exc), ps.view_id, i))
                logger.warning("view %d mask %d skipped: %s", ps.view_id, i, exc)
                continue
            obj = groups.setdefault((m.level.code, key), AlignedObject(key, m.level))
            obj.observations.append((ps.view_id, i))
            obj.embeddings.append(np.asarray(m.embedding, dtype=np.float64))
    out = []
    for gkey in sorted(groups):
        obj = groups[gkey]
        try:
            obj.fused = fuse_embeddings(obj.embeddings)
        except DegenerateFusionError as exc:
            issues.append(IntegrationIssue("degenerate-fusion", str(exc), object_key=obj.object_key))
            logger.warning("object %d (%s) dropped: %s", obj.object_key, obj.level.value, exc)
            continue
        out.append(obj)
    return out


@dataclass
class EmbeddingImage:
    view_id: int
    object_level: np.ndarray  # (H, W, D)
    part_level: np.ndarray    # (H, W, D)
    assigned_object: np.ndarray
    assigned_part: np.ndarray

    @property
    def dim(self) -> int:
        return self.object_level.shape[-1]

    def stacked(self) -> np.ndarray:
        """Object level followed by part level along the channel axis."""
        return np.concatenate([self.object_level, self.part_level], axis=-1)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def assemble_embedding_image(view: ProposalSet, aligned: list[AlignedObject],
                             background: np.ndarray, use_fused: bool = True) -> EmbeddingImage:
    """Paint each mask's embedding into its level's image.

    With ``use_fused`` (the default) a mask receives the fused embedding of
    the object it was aligned to; otherwise its own per-view embedding is
    used, which is the ablation without cross-view integration. Where masks
    of one level overlap the smaller mask wins. Uncovered pixels keep the
    background vector.
    """
    h, w = view.id_map.shape
    background = np.asarray(background)
    if background.ndim != 3 or background.shape[:2] != (h, w):
        raise ConsistencyError(f"background shape {background.shape} does not match view {(h, w)}")
    dim = background.shape[2]
    lookup = {}
    for obj in aligned:
        for obs in obj.observations:
            lookup[obs] = obj.fused
    images, covered = {}, {}
    for level in Level:
        img = background.astype(np.float32, copy=True)
        cov = np.zeros((h, w), dtype=bool)
        order = sorted((i for i, m in enumerate(view.masks) if m.level is level),
                       key=lambda i: (-view.masks[i].area, -i))
        for i in order:
            m = view.masks[i]
            if m.pixels.shape != (h, w):
                raise ConsistencyError(f"mask {i} shape {m.pixels.shape} != view {(h, w)}")
            vec = lookup.get((view.view_id, i)) if use_fused else _unit(m.embedding)
            if vec is None:
                continue
            if vec.shape != (dim,):
                raise ConsistencyError(f"embedding dim {vec.shape[0]} != background dim {dim}")
            img[m.pixels] = vec
            cov |= m.pixels
        images[level], covered[level] = img, cov
    return EmbeddingImage(view.view_id, images[Level.OBJECT], images[Level.PART],
                          covered[Level.OBJECT], covered[Level.PART])


def background_embedding(scene: SyntheticScene, height: int, width: int,
                         corruption: CorruptionConfig | None = None,
                         view_id: int = 0) -> np.ndarray:
    """Per-pixel background embeddings from the oracle.

    Constant background-class embedding, optionally with per-pixel isotropic
    noise of ``corruption.embed_noise_sigma`` followed by renormalisation.
    """
    base = scene.objects[scene.background_label].canonical_embedding
    img = np.broadcast_to(base, (height, width, base.shape[0])).astype(np.float64)
    if corruption is not None and corruption.embed_noise_sigma > 0:
        rng = np.random.default_rng([corruption.rng_seed, view_id, 1])
        img = img + corruption.embed_noise_sigma * rng.standard_normal(img.shape)
        img /= np.linalg.norm(img, axis=-1, keepdims=True)
    return img.astype(np.float32)


def load_background(path, height: int, width: int, dim: int) -> np.ndarray:
    arr = read_tensor(path)
    if arr.shape != (height, width, dim):
        raise FormatError(f"background tensor has shape {arr.shape}, expected {(height, width, dim)}")
    return arr


def aligned_report(objects: list[AlignedObject],
                   canonical: dict[int, np.ndarray] | None = None) -> str:
    """One line per object: ``object_key level L fused_norm [dot_to_canonical]``."""
    lines = []
    for obj in objects:
        fields = [str(obj.object_key), obj.level.value, str(obj.count),
                  f"{np.linalg.norm(obj.fused):.9f}"]
        if canonical is not None and obj.object_key in canonical:
            fields.append(f"{float(obj.fused @ canonical[obj.object_key]):.9f}")
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def write_aligned_report(path, objects, canonical=None) -> None:
    Path(path).write_text(aligned_report(objects, canonical))
