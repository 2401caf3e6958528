"""Synthetic scenes and the 2D knowledge oracle.

The oracle stands in for a region-proposal generator, a promptable mask
model, an image encoder and a video tracker. It reads masks straight off the
ground-truth id image, emits each object's canonical embedding, and can be
told to misbehave (drop masks, perturb embeddings, split masks) so the
integration step has something to repair.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import Camera
from .errors import ConsistencyError, EmptyViewError, FormatError, PlacementError, SpecError
from .field import Stencil, VoxelField, inverse_softplus, logit, sample_points
from .render import composite_weights, make_rays, render_view, sample_depths

DEFAULT_N_SAMPLES = 64
EMPTY_DENSITY_RAW = -12.0
DEFAULT_DENSITY = 40.0
MIN_RESOLUTION = 8
PROPOSAL_MAGIC = b"OPNF"
PROPOSAL_VERSION = 1


class Level(str, enum.Enum):
    OBJECT = "object"
    PART = "part"

    @property
    def code(self) -> int:
        return 0 if self is Level.OBJECT else 1

    @classmethod
    def from_code(cls, code: int) -> "Level":
        if code == 0:
            return cls.OBJECT
        if code == 1:
            return cls.PART
        raise FormatError(f"unknown mask level code {code}")


# ---------------------------------------------------------------------------
# scene description

@dataclass
class ObjectSpec:
    id: int
    shape: str = "box"
    params: dict = field(default_factory=dict)
    parent: int | None = None
    color: tuple[float, float, float] | None = None
    density: float | None = None


@dataclass
class SceneSpec:
    resolution: tuple[int, int, int] = (16, 16, 16)
    bounds: tuple[float, ...] = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
    embed_dim: int = 16
    objects: dict[int, ObjectSpec] = field(default_factory=dict)


def _floats(value: str, n: int, key: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in value.split())
    except ValueError:
        raise SpecError(f"{key}: expected {n} numbers, got {value!r}") from None
    if len(vals) != n:
        raise SpecError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse the ``key=value`` scene description.

    Recognised keys: ``resolution``, ``bounds`` (xmin ymin zmin xmax ymax
    zmax), ``embed_dim`` and ``object.<id>.<attr>`` with attr one of
    ``shape`` (box | sphere | rest), ``min``, ``max``, ``center``, ``radius``,
    ``parent``, ``color``, ``density``.
    """
    spec = SceneSpec()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "resolution":
            res = tuple(int(v) for v in _floats(value, 3, key))
            spec.resolution = res
        elif key == "bounds":
            spec.bounds = _floats(value, 6, key)
        elif key == "embed_dim":
            spec.embed_dim = int(_floats(value, 1, key)[0])
        elif key.startswith("object."):
            parts = key.split(".")
            if len(parts) != 3 or not parts[1].isdigit():
                raise SpecError(f"line {lineno}: bad object key {key!r}")
            oid, attr = int(parts[1]), parts[2]
            obj = spec.objects.setdefault(oid, ObjectSpec(oid))
            if attr == "shape":
                if value not in ("box", "sphere", "rest"):
                    raise SpecError(f"object {oid}: unknown shape {value!r}")
                obj.shape = value
            elif attr in ("min", "max", "center"):
                obj.params[attr] = _floats(value, 3, key)
            elif attr == "radius":
                obj.params[attr] = _floats(value, 1, key)[0]
            elif attr == "parent":
                obj.parent = int(value)
            elif attr == "color":
                obj.color = _floats(value, 3, key)
            elif attr == "density":
                obj.density = _floats(value, 1, key)[0]
            else:
                raise SpecError(f"object {oid}: unknown attribute {attr!r}")
        else:
            raise SpecError(f"line {lineno}: unknown key {key!r}")
    return spec


def load_scene_spec(path) -> SceneSpec:
    return parse_scene_spec(Path(path).read_text())


# ---------------------------------------------------------------------------
# scenes

@dataclass
class SceneObject:
    id: int
    parent_id: int | None
    density_value: float
    color: np.ndarray
    canonical_embedding: np.ndarray
    occupancy: np.ndarray  # bool grid

    @property
    def is_part(self) -> bool:
        return self.parent_id is not None


@dataclass
class SyntheticScene:
    resolution: tuple[int, int, int]
    bounds: np.ndarray  # (2, 3)
    labels: np.ndarray  # leaf object id per voxel
    objects: list[SceneObject]
    background_label: int = 0

    @property
    def embed_dim(self) -> int:
        return self.objects[0].canonical_embedding.shape[0]

    def children(self, oid: int) -> list[int]:
        return [o.id for o in self.objects if o.parent_id == oid]

    def leaf_ids(self, oid: int) -> list[int]:
        return self.children(oid) or [oid]

    def whole_ids(self) -> list[int]:
        return [o.id for o in self.objects[1:] if not o.is_part]

    def part_ids(self) -> list[int]:
        return [o.id for o in self.objects if o.is_part]

    def parent_map(self) -> dict[int, int]:
        return {o.id: o.parent_id for o in self.objects if o.is_part}

    def whole_of(self, oid: int) -> int:
        return self.objects[oid].parent_id if self.objects[oid].is_part else oid


def _shape_voxels(obj: ObjectSpec, centers: np.ndarray) -> np.ndarray:
    p = obj.params
    if obj.shape == "box":
        if "min" not in p or "max" not in p:
            raise SpecError(f"object {obj.id}: box needs min and max")
        lo, hi = np.array(p["min"]), np.array(p["max"])
        if (hi <= lo).any():
            raise SpecError(f"object {obj.id}: zero-volume box")
        return ((centers >= lo) & (centers <= hi)).all(-1)
    if obj.shape == "sphere":
        if "center" not in p or "radius" not in p:
            raise SpecError(f"object {obj.id}: sphere needs center and radius")
        if p["radius"] <= 0:
            raise SpecError(f"object {obj.id}: zero-volume sphere")
        return np.linalg.norm(centers - np.array(p["center"]), axis=-1) <= p["radius"]
    raise SpecError(f"object {obj.id}: shape {obj.shape!r} is only valid for parts")


def _canonical_embeddings(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, dim))
    for i in range(n):
        while True:
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if i == 0 or (out[:i] @ v).max() < 0.99:
                break
        out[i] = v
    return out


def generate_scene(spec: SceneSpec | str, seed: int) -> SyntheticScene:
    """Voxelise the described objects and draw canonical embeddings.

    Deterministic in ``(spec, seed)``. Object ids must be dense ``1..K``; id 0
    is the background. Parts (objects with a ``parent``) must tile their
    parent; a part with ``shape=rest`` takes whatever its siblings leave.
    """
    if isinstance(spec, str):
        spec = parse_scene_spec(spec)
    res = tuple(spec.resolution)
    if len(res) != 3 or min(res) < MIN_RESOLUTION:
        raise SpecError(f"grid resolution must be at least {MIN_RESOLUTION}^3, got {res}")
    if not spec.objects:
        raise SpecError("scene needs at least one object")
    ids = sorted(spec.objects)
    if ids != list(range(1, len(ids) + 1)):
        raise SpecError(f"object ids must be dense 1..K, got {ids}")
    if spec.embed_dim < 1:
        raise SpecError("embed_dim must be positive")
    bounds = np.array(spec.bounds, dtype=np.float64).reshape(2, 3)
    if not (bounds[1] > bounds[0]).all():
        raise SpecError("bounds must satisfy min < max")

    proto = VoxelField.zeros(res, bounds, 0, np.float32)
    centers = proto.voxel_centers()
    labels = np.zeros(res, dtype=np.int64)
    occupancy: dict[int, np.ndarray] = {}

    wholes = [spec.objects[i] for i in ids if spec.objects[i].parent is None]
    parts = [spec.objects[i] for i in ids if spec.objects[i].parent is not None]
    for obj in wholes:
        occ = _shape_voxels(obj, centers)
        if not occ.any():
            raise SpecError(f"object {obj.id} covers no voxel centers")
        clash = labels[occ]
        if clash.any():
            raise PlacementError(f"object {obj.id} overlaps object {int(clash[clash > 0][0])}")
        labels[occ] = obj.id
        occupancy[obj.id] = occ

    by_parent: dict[int, list[ObjectSpec]] = {}
    for obj in parts:
        parent = spec.objects.get(obj.parent)
        if parent is None or parent.parent is not None:
            raise SpecError(f"part {obj.id}: parent {obj.parent} is not a whole object")
        by_parent.setdefault(obj.parent, []).append(obj)
    for pid, plist in by_parent.items():
        parent_occ = occupancy[pid]
        claimed = np.zeros(res, dtype=bool)
        rest = [p for p in plist if p.shape == "rest"]
        if len(rest) > 1:
            raise SpecError(f"object {pid}: at most one part may use shape=rest")
        for obj in (p for p in plist if p.shape != "rest"):
            occ = _shape_voxels(obj, centers) & parent_occ
            if not occ.any():
                raise SpecError(f"part {obj.id} covers no voxels of its parent")
            if (occ & claimed).any():
                raise PlacementError(f"part {obj.id} overlaps a sibling part")
            claimed |= occ
            occupancy[obj.id] = occ
        remaining = parent_occ & ~claimed
        if rest:
            if not remaining.any():
                raise SpecError(f"part {rest[0].id}: siblings leave no voxels")
            occupancy[rest[0].id] = remaining
        elif remaining.any():
            raise SpecError(f"parts of object {pid} do not cover it; add a shape=rest part")
        for obj in plist:
            labels[occupancy[obj.id]] = obj.id

    rng = np.random.default_rng(seed)
    emb = _canonical_embeddings(len(ids) + 1, spec.embed_dim, rng)
    objects = [SceneObject(0, None, 0.0, np.zeros(3), emb[0], labels == 0)]
    for i in ids:
        o = spec.objects[i]
        color = np.array(o.color if o.color is not None else rng.uniform(0.1, 0.9, 3))
        if ((color < 0) | (color > 1)).any():
            raise SpecError(f"object {i}: color outside [0, 1]")
        density = o.density
        if density is None:
            density = spec.objects[o.parent].density if o.parent is not None else None
        density = DEFAULT_DENSITY if density is None else density
        if density < 0:
            raise SpecError(f"object {i}: negative density")
        objects.append(SceneObject(i, o.parent, float(density), color, emb[i], occupancy[i]))
    return SyntheticScene(res, bounds, labels, objects)


def ground_truth_field(scene: SyntheticScene, hierarchical: bool = False) -> VoxelField:
    """Voxel field whose activated values reproduce the scene.

    Empty voxels borrow the color of the nearest occupied voxel so object
    boundaries do not bleed toward gray. The embedding grid holds the
    object-level canonical embedding; with ``hierarchical`` a part-level
    block follows (part embedding on parts, background embedding elsewhere).
    """
    dim = scene.embed_dim
    field_ = VoxelField.zeros(scene.resolution, scene.bounds, 2 * dim if hierarchical else dim,
                              np.float32)
    dens = np.array([o.density_value for o in scene.objects])
    cols = np.stack([o.color for o in scene.objects])
    occupied = scene.labels > 0
    vox_density = dens[scene.labels]
    field_.density_raw[...] = np.where(vox_density > 0,
                                       inverse_softplus(np.maximum(vox_density, 1e-6)),
                                       EMPTY_DENSITY_RAW)
    nearest = scene.labels
    if occupied.any() and not occupied.all():
        idx = ndimage.distance_transform_edt(~occupied, return_distances=False, return_indices=True)
        nearest = scene.labels[tuple(idx)]
    field_.color_raw[...] = logit(np.clip(cols[nearest], 1e-3, 1 - 1e-3))
    emb = np.stack([o.canonical_embedding for o in scene.objects])
    whole = np.array([scene.whole_of(o.id) for o in scene.objects])
    field_.embedding[..., :dim] = emb[whole[scene.labels]]
    if hierarchical:
        part_src = np.array([o.id if o.is_part else 0 for o in scene.objects])
        field_.embedding[..., dim:] = emb[part_src[scene.labels]]
    return field_


def _frustum_hits_bounds(cam: Camera, bounds: np.ndarray) -> bool:
    rays = make_rays(cam)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays.directions
        t0 = (bounds[0] - rays.origins) * inv
        t1 = (bounds[1] - rays.origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    lo = np.maximum(tmin, cam.t_near)
    hi = np.minimum(tmax, cam.t_far)
    return bool((hi >= lo).any())


def sample_labels(scene: SyntheticScene, st: Stencil) -> np.ndarray:
    """Object credited with each sample's density.

    Density at a sample comes from its 8 trilinear corners, so the sample is
    credited to the object whose occupied corners carry the largest total
    weight (ties to the smallest id). Samples with no occupied corner, or
    outside the bounds, are background.
    """
    corner_labels = scene.labels.ravel()[st.index]
    best = np.zeros(st.index.shape[0], dtype=np.int64)
    best_w = np.zeros(st.index.shape[0])
    for k in range(1, len(scene.objects)):
        wk = np.where(corner_labels == k, st.weight, 0.0).sum(axis=1)
        take = wk > best_w
        best[take] = k
        best_w[take] = wk[take]
    return best


def render_ground_truth(scene: SyntheticScene, cam: Camera,
                        n_samples: int = DEFAULT_N_SAMPLES) -> tuple[np.ndarray, np.ndarray]:
    """RGB image and leaf-id image of one view.

    Every sample's rendering weight is credited to one object (see
    :func:`sample_labels`); a pixel takes the label with the most weight
    (ties to the smallest id) and is background when its total weight is
    below 0.5.
    """
    if not _frustum_hits_bounds(cam, scene.bounds):
        raise EmptyViewError("camera frustum misses the scene bounds")
    gt = ground_truth_field(scene)
    rgb, _, _ = render_view(gt, cam, n_samples)
    rays = make_rays(cam)
    t, delta = sample_depths(rays.near, rays.far, n_samples)
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    sigma, _, _, _, st = sample_points(gt, pts.reshape(-1, 3))
    w, _ = composite_weights(sigma.reshape(t.shape), delta)
    lab = sample_labels(scene, st).reshape(t.shape)
    nobj = len(scene.objects)
    acc = np.zeros((w.shape[0], nobj))
    for k in range(nobj):
        acc[:, k] = np.where(lab == k, w, 0.0).sum(axis=1)
    ids = np.argmax(acc, axis=1)
    ids[w.sum(axis=1) < 0.5] = scene.background_label
    return rgb, ids.reshape(cam.height, cam.width)


# ---------------------------------------------------------------------------
# proposals

@dataclass
class CorruptionConfig:
    drop_prob: float = 0.0
    embed_noise_sigma: float = 0.0
    split_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("drop_prob", "split_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.embed_noise_sigma < 0:
            raise ValueError("embed_noise_sigma must be nonnegative")


@dataclass
class MaskProposal:
    pixels: np.ndarray      # (H, W) bool
    level: Level
    embedding: np.ndarray   # (D,) float32
    source_box: tuple[int, int, int, int]  # row0, col0, row1, col1 (half-open)

    @property
    def area(self) -> int:
        return int(self.pixels.sum())

    def __eq__(self, other):
        return (isinstance(other, MaskProposal) and self.level == other.level
                and tuple(self.source_box) == tuple(other.source_box)
                and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.embedding, other.embedding))


@dataclass
class ProposalSet:
    view_id: int
    masks: list[MaskProposal]
    id_map: np.ndarray  # (H, W) integer

    def __eq__(self, other):
        return (isinstance(other, ProposalSet) and self.view_id == other.view_id
                and np.array_equal(self.id_map, other.id_map) and self.masks == other.masks)


def bounding_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def split_mask(mask: np.ndarray) -> list[np.ndarray]:
    """Bisect the mask's bounding box across its longer side.

    Returns the original mask alone when the box is one pixel thick along
    that side.
    """
    r0, c0, r1, c1 = bounding_box(mask)
    axis = 0 if (r1 - r0) >= (c1 - c0) else 1
    lo, hi = (r0, r1) if axis == 0 else (c0, c1)
    if hi - lo < 2:
        return [mask]
    cut = (lo + hi) // 2
    coord = np.arange(mask.shape[axis])[:, None] if axis == 0 else np.arange(mask.shape[1])[None, :]
    first = mask & (coord < cut)
    return [first, mask & ~first]


def _perturb(v: np.ndarray, sigma: float, noise: np.ndarray) -> np.ndarray:
    if sigma == 0.0:
        return v.astype(np.float32)
    e = v + sigma * noise
    return (e / np.linalg.norm(e)).astype(np.float32)


def oracle_proposals_from_ids(scene: SyntheticScene, id_image: np.ndarray,
                              corruption: CorruptionConfig | None = None,
                              view_id: int = 0) -> ProposalSet:
    """Proposals for a view whose ground-truth id image is already known."""
    corruption = corruption or CorruptionConfig()
    rng = np.random.default_rng([corruption.rng_seed, view_id])
    dim = scene.embed_dim
    candidates = []
    for oid in scene.whole_ids():
        candidates.append((np.isin(id_image, scene.leaf_ids(oid)), Level.OBJECT, oid))
    for oid in scene.part_ids():
        candidates.append((id_image == oid, Level.PART, oid))
    masks = []
    for mask, level, oid in candidates:
        # Fixed number of draws per candidate keeps the stream aligned across configs.
        u_drop, u_split = rng.random(2)
        noise = rng.standard_normal((2, dim))
        if not mask.any() or u_drop < corruption.drop_prob:
            continue
        canon = scene.objects[oid].canonical_embedding
        frags = split_mask(mask) if u_split < corruption.split_prob else [mask]
        for k, frag in enumerate(frags):
            masks.append(MaskProposal(frag, level, _perturb(canon, corruption.embed_noise_sigma,
                                                            noise[k]), bounding_box(frag)))
    return ProposalSet(view_id, masks, np.asarray(id_image, dtype=np.int64).copy())


def oracle_proposals(scene: SyntheticScene, cam: Camera, corruption: CorruptionConfig | None = None,
                     view_id: int = 0, n_samples: int = DEFAULT_N_SAMPLES) -> ProposalSet:
    _, ids = render_ground_truth(scene, cam, n_samples)
    return oracle_proposals_from_ids(scene, ids, corruption, view_id)


def check_proposal_set(ps: ProposalSet, dim: int | None = None) -> None:
    h, w = ps.id_map.shape
    for i, m in enumerate(ps.masks):
        if m.pixels.shape != (h, w):
            raise ConsistencyError(f"view {ps.view_id} mask {i}: shape {m.pixels.shape} "
                                   f"!= id_map {(h, w)}")
        if not m.pixels.any():
            raise ConsistencyError(f"view {ps.view_id} mask {i}: empty mask")
        r0, c0, r1, c1 = m.source_box
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise ConsistencyError(f"view {ps.view_id} mask {i}: box outside the image")
        inner = np.zeros((h, w), dtype=bool)
        inner[r0:r1, c0:c1] = True
        if (m.pixels & ~inner).any():
            raise ConsistencyError(f"view {ps.view_id} mask {i}: box does not contain mask")
        if dim is not None and m.embedding.shape != (dim,):
            raise ConsistencyError(f"view {ps.view_id} mask {i}: embedding dim "
                                   f"{m.embedding.shape} != {dim}")


def proposals_to_bytes(sets: list[ProposalSet], dim: int | None = None) -> bytes:
    if dim is None:
        dims = {m.embedding.shape[0] for s in sets for m in s.masks}
        if len(dims) > 1:
            raise ConsistencyError(f"mixed embedding dimensions {sorted(dims)}")
        if not dims:
            raise ConsistencyError("cannot infer embedding dimension from zero masks")
        dim = dims.pop()
    out = io.BytesIO()
    out.write(struct.pack("<4sIII", PROPOSAL_MAGIC, PROPOSAL_VERSION, dim, len(sets)))
    for ps in sorted(sets, key=lambda s: s.view_id):
        check_proposal_set(ps, dim)
        h, w = ps.id_map.shape
        if ps.id_map.min(initial=0) < 0:
            raise ConsistencyError("tracking ids must be nonnegative")
        out.write(struct.pack("<III", ps.view_id, h, w))
        out.write(np.ascontiguousarray(ps.id_map, dtype="<u4").tobytes())
        out.write(struct.pack("<I", len(ps.masks)))
        for m in ps.masks:
            out.write(struct.pack("<B4I", m.level.code, *m.source_box))
            out.write(np.packbits(m.pixels.astype(bool), axis=1).tobytes())
            out.write(np.ascontiguousarray(m.embedding, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"proposal container truncated at byte {self.off}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def proposals_from_bytes(buf: bytes) -> list[ProposalSet]:
    r = _Reader(buf)
    magic, version, dim, nviews = r.unpack("<4sIII")
    if magic != PROPOSAL_MAGIC:
        raise FormatError(f"bad proposal magic {magic!r}")
    if version != PROPOSAL_VERSION:
        raise FormatError(f"unsupported proposal container version {version}")
    sets = []
    for _ in range(nviews):
        view_id, h, w = r.unpack("<III")
        id_map = np.frombuffer(r.take(4 * h * w), dtype="<u4").reshape(h, w).astype(np.int64)
        (nmasks,) = r.unpack("<I")
        row_bytes = (w + 7) // 8
        masks = []
        for _ in range(nmasks):
            code, *box = r.unpack("<B4I")
            bits = np.frombuffer(r.take(h * row_bytes), dtype=np.uint8).reshape(h, row_bytes)
            pixels = np.unpackbits(bits, axis=1, count=w).astype(bool)
            emb = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(np.float32)
            masks.append(MaskProposal(pixels, Level.from_code(code), emb, tuple(box)))
        sets.append(ProposalSet(view_id, masks, id_map))
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes after proposal container")
    ids = [s.view_id for s in sets]
    if len(set(ids)) != len(ids):
        raise ConsistencyError("duplicate view ids in proposal container")
    for ps in sets:
        check_proposal_set(ps, dim)
    return sorted(sets, key=lambda s: s.view_id)


def export_proposals(path, sets: list[ProposalSet], dim: int | None = None) -> None:
    Path(path).write_bytes(proposals_to_bytes(sets, dim))


def ingest_proposals(path) -> list[ProposalSet]:
    return proposals_from_bytes(Path(path).read_bytes())
