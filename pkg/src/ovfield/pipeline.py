"""File-level stages of a run: generate, extract, train, query, eval, ablate.

Each stage reads the directories written by earlier stages and writes its
own output directory with a ``manifest.txt``. Stages are pure functions of
their inputs and seed, so rerunning one reproduces its outputs byte for byte.

Directory layouts
-----------------
scene dir:     scene.txt, seed.txt, cameras.txt, rgb_###.png, ids_###.png
proposal dir:  proposals.opnf, background_###.oftn, parents.txt
train dir:     field.ofck, train_report.csv, aligned.txt, train_config.txt
query dir:     relevancy_###.oftn, heatmap_###.png, mask_###.png,
               decomposition.oftn, query_report.txt
eval dir:      metrics.csv, decomposition.csv
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .camera import Camera, orbit_cameras, read_cameras, write_cameras
from .errors import ConfigError, ConsistencyError, FormatError
from .field import VoxelField, checkpoint_load, checkpoint_save
from .integrate import (IntegrationIssue, assemble_embedding_image, background_embedding,
                        integrate_views, load_background, write_aligned_report)
from .metrics import UndefinedMetricError, iou, metric_row
from .query import Query, decompose_3d, relevancy_from_embeddings, segment_view
from .render import render_view
from .scene_oracle import (CorruptionConfig, Level, SyntheticScene, export_proposals,
                           generate_scene, ingest_proposals, oracle_proposals_from_ids,
                           render_ground_truth)
from .tensorio import (read_id_png, read_rgb_png, write_heatmap_png, write_id_png,
                       write_rgb_png, write_tensor)
from .train import TrainConfig, TrainView, train

logger = logging.getLogger(__name__)

DEFAULT_VIEWS = 20
DEFAULT_EVAL_VIEWS = 2
DEFAULT_DECOMPOSE_TAU = 0.8
ABLATION_CORRUPTION = dict(drop_prob=0.3, embed_noise_sigma=0.1, split_prob=0.2)


# ---------------------------------------------------------------------------
# manifests

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, seed: int, files: list[str],
                   inputs: dict[str, Path] | None = None, extra: dict | None = None) -> Path:
    """``key: value`` lines; every listed file gets a ``sha256.<name>`` entry.

    Keys: ``tool``, ``version``, ``command``, ``seed``, ``input.<role>`` (path
    relative to the manifest) with ``input_sha256.<role>``, ``file.<name>`` (path relative to the
    manifest) with ``sha256.<name>``, plus command-specific extras.
    """
    lines = ["tool: ovfield", f"version: {__version__}", f"command: {command}", f"seed: {seed}"]
    for role, p in sorted((inputs or {}).items()):
        lines.append(f"input.{role}: {Path(os.path.relpath(p, out)).as_posix()}")
        if Path(p).is_file():
            lines.append(f"input_sha256.{role}: {sha256_file(p)}")
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key}: {value}")
    for name in sorted(files):
        lines.append(f"file.{name}: {name}")
        lines.append(f"sha256.{name}: {sha256_file(out / name)}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if ": " in line:
            k, v = line.split(": ", 1)
            out[k] = v
    return out


def verify_manifest(path) -> list[str]:
    """Names of listed files that are missing or whose hash no longer matches."""
    path = Path(path)
    m = read_manifest(path)
    bad = []
    for key, value in m.items():
        if key.startswith("file."):
            name = key[5:]
            f = path.parent / value
            if not f.is_file() or sha256_file(f) != m.get(f"sha256.{name}"):
                bad.append(name)
    return bad


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# scene directories

@dataclass
class SceneDir:
    path: Path
    scene: SyntheticScene
    seed: int
    cameras: list[Camera]

    @classmethod
    def load(cls, path) -> "SceneDir":
        path = Path(path)
        _require(path / "scene.txt", "scene description (run `generate` first)")
        seed = int(_require(path / "seed.txt", "scene seed file").read_text().strip())
        scene = generate_scene((path / "scene.txt").read_text(), seed)
        cams = read_cameras(_require(path / "cameras.txt", "camera file"))
        return cls(path, scene, seed, cams)

    def rgb(self, k: int) -> np.ndarray:
        return read_rgb_png(_require(self.path / f"rgb_{k:03d}.png", "view image"))

    def ids(self, k: int) -> np.ndarray:
        return read_id_png(_require(self.path / f"ids_{k:03d}.png", "id image"))


def rig_from_cameras(cams: list[Camera]) -> dict:
    """Orbit parameters of a camera ring written by ``generate`` (target at the origin)."""
    c = cams[0]
    r = float(np.linalg.norm(c.position))
    return dict(radius=r, elevation_deg=math.degrees(math.asin(c.position[2] / r)),
                height=c.height, width=c.width, focal=c.focal)


def heldout_cameras(cams: list[Camera], n_views: int) -> list[Camera]:
    """``n_views`` ring cameras rotated half a training step off the training poses."""
    rig = rig_from_cameras(cams)
    start = math.atan2(cams[0].position[1], cams[0].position[0])
    return orbit_cameras(n_views, offset=start + math.pi / len(cams), **rig)


# ---------------------------------------------------------------------------
# stages

def generate(spec_text: str, out, seed: int = 0, n_views: int = DEFAULT_VIEWS,
             height: int = 64, width: int = 64) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(spec_text, seed)
    cams = orbit_cameras(n_views, height=height, width=width)
    (out / "scene.txt").write_text(spec_text)
    (out / "seed.txt").write_text(f"{seed}\n")
    write_cameras(out / "cameras.txt", cams)
    files = ["scene.txt", "seed.txt", "cameras.txt"]
    for k, cam in enumerate(cams):
        rgb, ids = render_ground_truth(scene, cam)
        write_rgb_png(out / f"rgb_{k:03d}.png", rgb)
        write_id_png(out / f"ids_{k:03d}.png", ids)
        files += [f"rgb_{k:03d}.png", f"ids_{k:03d}.png"]
    return write_manifest(out, "generate", seed, files, extra={"views": n_views})


def extract(scene_dir, out, corruption: CorruptionConfig, background_noise: float = 0.0) -> Path:
    """Oracle proposals for every scene view, plus background embedding images."""
    sd = SceneDir.load(scene_dir)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sets = [oracle_proposals_from_ids(sd.scene, sd.ids(k), corruption, k)
            for k in range(len(sd.cameras))]
    export_proposals(out / "proposals.opnf", sets, sd.scene.embed_dim)
    files = ["proposals.opnf", "parents.txt"]
    bg_corruption = CorruptionConfig(embed_noise_sigma=background_noise,
                                     rng_seed=corruption.rng_seed)
    for k, cam in enumerate(sd.cameras):
        bg = background_embedding(sd.scene, cam.height, cam.width, bg_corruption, k)
        write_tensor(out / f"background_{k:03d}.oftn", bg)
        files.append(f"background_{k:03d}.oftn")
    (out / "parents.txt").write_text("".join(f"{c} {p}\n" for c, p in
                                             sorted(sd.scene.parent_map().items())))
    return write_manifest(out, "extract", corruption.rng_seed, files,
                          inputs={"scene": sd.path / "manifest.txt"},
                          extra={"drop_prob": corruption.drop_prob,
                                 "embed_noise_sigma": corruption.embed_noise_sigma,
                                 "split_prob": corruption.split_prob,
                                 "background_noise": background_noise})


def read_parents(path) -> dict[int, int]:
    path = Path(path)
    if not path.exists():
        return {}
    parents = {}
    for line in path.read_text().splitlines():
        if line.strip():
            try:
                c, p = (int(v) for v in line.split())
            except ValueError:
                raise FormatError(f"{path}: expected 'child parent' per line, got {line!r}") from None
            parents[c] = p
    return parents


def build_train_views(sd: SceneDir, proposal_dir, use_fused: bool = True,
                      issues: list[IntegrationIssue] | None = None):
    proposal_dir = Path(proposal_dir)
    sets = ingest_proposals(_require(proposal_dir / "proposals.opnf", "proposal file"))
    by_view = {ps.view_id: ps for ps in sets}
    dim = sd.scene.embed_dim
    aligned = integrate_views(sets, read_parents(proposal_dir / "parents.txt"), issues)
    views = []
    for k, cam in enumerate(sd.cameras):
        if k not in by_view:
            raise ConsistencyError(f"proposal file has no view {k}")
        ps = by_view[k]
        if ps.id_map.shape != (cam.height, cam.width):
            raise ConsistencyError(f"view {k}: id_map {ps.id_map.shape} vs camera "
                                   f"{(cam.height, cam.width)}")
        bg = load_background(_require(proposal_dir / f"background_{k:03d}.oftn",
                                      "background embedding"), cam.height, cam.width, dim)
        views.append(TrainView(cam, sd.rgb(k), assemble_embedding_image(ps, aligned, bg, use_fused)))
    return views, aligned


def train_stage(scene_dir, proposal_dir, out, cfg: TrainConfig, use_fused: bool = True,
                progress=None) -> Path:
    sd = SceneDir.load(scene_dir)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    issues: list[IntegrationIssue] = []
    views, aligned = build_train_views(sd, proposal_dir, use_fused, issues)
    dim = sd.scene.embed_dim
    field_ = VoxelField.initial(sd.scene.resolution, sd.scene.bounds, 2 * dim, seed=cfg.seed)
    report = train(field_, views, cfg, progress)
    (out / "field.ofck").write_bytes(checkpoint_save(field_))
    report.write_csv(out / "train_report.csv")
    canonical = {o.id: o.canonical_embedding for o in sd.scene.objects}
    write_aligned_report(out / "aligned.txt", aligned, canonical)
    (out / "train_config.txt").write_text(cfg.to_text())
    (out / "issues.txt").write_text("".join(f"{i.kind} view={i.view_id} mask={i.mask_index} "
                                            f"object={i.object_key}: {i.detail}\n" for i in issues))
    return write_manifest(out, "train", cfg.seed,
                          ["field.ofck", "train_report.csv", "aligned.txt", "train_config.txt",
                           "issues.txt"],
                          inputs={"scene": sd.path / "manifest.txt",
                                  "proposals": Path(proposal_dir) / "manifest.txt"},
                          extra={"supervision": "fused" if use_fused else "per-view",
                                 "final_psnr": f"{report.final_psnr:.6f}"})


def load_field(path) -> VoxelField:
    return checkpoint_load(_require(Path(path), "checkpoint").read_bytes())


def query_stage(checkpoint, cameras: list[Camera], q: Query, out, tau: float | None = None,
                n_samples: int = 48) -> Path:
    """Relevancy maps, segmentations and a 3D decomposition for one query."""
    field_ = load_field(checkpoint)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tau = q.tau if tau is None else tau
    files, lines = [], [f"text: {q.text}", f"tau: {tau!r}", f"n_pixels: {q.n_pixels}"]
    for k, cam in enumerate(cameras):
        _, emb, _ = render_view(field_, cam, n_samples)
        rm = relevancy_from_embeddings(emb, q, k)
        mask = segment_view(rm, tau)
        write_tensor(out / f"relevancy_{k:03d}.oftn", rm.selected_scores)
        write_heatmap_png(out / f"heatmap_{k:03d}.png", rm.selected_scores)
        write_heatmap_png(out / f"mask_{k:03d}.png", mask.astype(np.float64), 0.0, 1.0)
        files += [f"relevancy_{k:03d}.oftn", f"heatmap_{k:03d}.png", f"mask_{k:03d}.png"]
        lines.append(f"view {k}: level={rm.selected_level.value} pixels={int(mask.sum())}")
    vox = decompose_3d(field_, q, tau=tau)
    write_tensor(out / "decomposition.oftn", vox.astype(np.float32))
    lines.append(f"voxels: {int(vox.sum())}")
    (out / "query_report.txt").write_text("\n".join(lines) + "\n")
    files += ["decomposition.oftn", "query_report.txt"]
    return write_manifest(out, "query", 0, files, inputs={"checkpoint": Path(checkpoint)})


@dataclass
class EvalRow:
    query: str
    view: int
    auprc: float
    fpr95: float
    auroc: float
    level: str


def evaluate_field(field_: VoxelField, scene: SyntheticScene, cameras: list[Camera],
                   n_pixels: int = 100, n_samples: int = 48) -> list[EvalRow]:
    """Per-(query, view) ranking metrics for every whole object and every part.

    The query is the object's canonical embedding; the scored map is the
    level chosen by the hierarchy rule. Ground truth is the object's region
    in the oracle id image (a whole object covers all of its parts).
    (query, view) pairs where the object is invisible are skipped.
    """
    rows = []
    queries = [(f"object_{i}", i, scene.leaf_ids(i)) for i in scene.whole_ids()]
    queries += [(f"part_{i}", i, [i]) for i in scene.part_ids()]
    for k, cam in enumerate(cameras):
        _, ids = render_ground_truth(scene, cam)
        _, emb, _ = render_view(field_, cam, n_samples)
        for name, oid, leaves in queries:
            q = Query(scene.objects[oid].canonical_embedding.astype(np.float64), n_pixels=n_pixels)
            rm = relevancy_from_embeddings(emb, q, k)
            try:
                m = metric_row(rm.selected_scores, np.isin(ids, leaves))
            except UndefinedMetricError as exc:
                logger.warning("%s view %d skipped: %s", name, k, exc)
                continue
            rows.append(EvalRow(name, k, m["auprc"], m["fpr95"], m["auroc"],
                                rm.selected_level.value))
    return rows


def metrics_csv(rows: list[EvalRow]) -> str:
    """Per-(query, view) rows followed by a flat mean over all rows."""
    lines = ["# mean = flat average over every (query, view) row",
             "query,view,auprc,fpr95,auroc"]
    lines += [f"{r.query},{r.view},{r.auprc:.9f},{r.fpr95:.9f},{r.auroc:.9f}" for r in rows]
    if rows:
        mean = [np.mean([getattr(r, k) for r in rows]) for k in ("auprc", "fpr95", "auroc")]
        lines.append("mean,all," + ",".join(f"{v:.9f}" for v in mean))
    return "\n".join(lines) + "\n"


def decomposition_ious(field_: VoxelField, scene: SyntheticScene,
                       tau: float = DEFAULT_DECOMPOSE_TAU) -> dict[str, float]:
    """Voxel IoU of the 3D decomposition against ground-truth occupancy, per whole object."""
    out = {}
    for i in scene.whole_ids():
        q = Query(scene.objects[i].canonical_embedding.astype(np.float64), tau=tau)
        out[f"object_{i}"] = iou(decompose_3d(field_, q, level=Level.OBJECT),
                                 np.isin(scene.labels, scene.leaf_ids(i)))
    return out


def eval_stage(checkpoint, scene_dir, out, n_views: int = DEFAULT_EVAL_VIEWS, n_pixels: int = 100,
               tau: float = DEFAULT_DECOMPOSE_TAU) -> Path:
    sd = SceneDir.load(scene_dir)
    field_ = load_field(checkpoint)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluate_field(field_, sd.scene, heldout_cameras(sd.cameras, n_views), n_pixels)
    (out / "metrics.csv").write_text(metrics_csv(rows))
    ious = decomposition_ious(field_, sd.scene, tau)
    (out / "decomposition.csv").write_text(
        "query,tau,iou\n" + "".join(f"{k},{tau!r},{v:.9f}\n" for k, v in ious.items()))
    return write_manifest(out, "eval", sd.seed, ["metrics.csv", "decomposition.csv"],
                          inputs={"checkpoint": Path(checkpoint), "scene": sd.path / "manifest.txt"},
                          extra={"heldout_views": n_views, "n_pixels": n_pixels})


def read_metrics_csv(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("query,"):
            continue
        q, v, a, f, r = line.split(",")
        rows.append(dict(query=q, view=v, auprc=float(a), fpr95=float(f), auroc=float(r)))
    return rows


def mean_auprc(rows: list[dict]) -> float:
    return float(np.mean([r["auprc"] for r in rows if r["view"] != "all"]))


def ablate(spec_text: str, out, seeds: list[int], corruption: dict | None = None,
           n_views: int = 8, cfg: TrainConfig | None = None, n_eval_views: int = DEFAULT_EVAL_VIEWS,
           progress=None) -> Path:
    """Fused vs per-view supervision on identical corrupted inputs, once per seed.

    Writes ``comparison.csv`` (``seed,fused_auprc,per_view_auprc,fused_wins``)
    and keeps every intermediate directory under ``out/seed_<s>/``.
    """
    corruption = dict(ABLATION_CORRUPTION if corruption is None else corruption)
    cfg = cfg or TrainConfig()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["seed,fused_auprc,per_view_auprc,fused_wins"]
    for s in seeds:
        base = out / f"seed_{s}"
        generate(spec_text, base / "scene", s, n_views)
        extract(base / "scene", base / "proposals", CorruptionConfig(rng_seed=s, **corruption))
        run_cfg = TrainConfig(**{**vars(cfg), "seed": s})
        result = {}
        for mode, fused in (("fused", True), ("per_view", False)):
            train_stage(base / "scene", base / "proposals", base / f"train_{mode}", run_cfg,
                        fused, progress)
            eval_stage(base / f"train_{mode}" / "field.ofck", base / "scene",
                       base / f"eval_{mode}", n_eval_views)
            result[mode] = mean_auprc(read_metrics_csv(base / f"eval_{mode}" / "metrics.csv"))
        lines.append(f"{s},{result['fused']:.9f},{result['per_view']:.9f},"
                     f"{int(result['fused'] > result['per_view'])}")
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    return write_manifest(out, "ablate", seeds[0] if seeds else 0, ["comparison.csv"],
                          extra={"seeds": " ".join(map(str, seeds)),
                                 **{k: v for k, v in corruption.items()}})


def read_comparison(path) -> list[tuple[int, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        s, f, p, _ = line.split(",")
        rows.append((int(s), float(f), float(p)))
    return rows


def parse_corruption(drop_prob: float, noise: float, split_prob: float, seed: int) -> CorruptionConfig:
    try:
        return CorruptionConfig(drop_prob, noise, split_prob, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
