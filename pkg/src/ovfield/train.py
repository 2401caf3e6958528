"""Joint optimisation of the radiance grids and the embedding grid.

Total loss is ``L = L_p + lambda * L_e`` with ``L_p`` the color MSE and
``L_e`` the mean Huber loss between rendered and target embeddings. The two
branches do not share gradients: ``L_e`` only moves the embedding grid, and
``L_p`` only moves density and color.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .camera import Camera
from .errors import ConfigError
from .field import VoxelField
from .integrate import EmbeddingImage
from .metrics import psnr
from .render import RayBatch, _backward, _forward, make_rays, render_view, sample_depths


@dataclass
class TrainConfig:
    lambda_embed: float = 0.1
    huber_delta: float = 1.0
    lr_radiance: float = 100000.0
    lr_embedding: float = 200000.0
    rays_per_batch: int = 1024
    iterations: int = 2000
    n_samples: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.lambda_embed < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.lr_radiance < 0 or self.lr_embedding < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be positive")
        if self.rays_per_batch < 1 or self.n_samples < 1 or self.iterations < 0:
            raise ConfigError("rays_per_batch and n_samples must be >= 1, iterations >= 0")

    _ALIASES = {"lambda": "lambda_embed"}

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key=value`` lines; ``lambda`` is accepted for ``lambda_embed``."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = cls._ALIASES.get(key, key)
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                kwargs[key] = int(value) if types[key] in ("int", int) else float(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))


@dataclass
class TrainView:
    camera: Camera
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    embeddings: EmbeddingImage


@dataclass
class TrainReport:
    loss_p: list[float] = field(default_factory=list)
    loss_e: list[float] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    final_psnr: float = float("nan")

    def to_csv(self) -> str:
        rows = ["iter,loss_p,loss_e,loss_total"]
        rows += [f"{i},{p!r},{e!r},{t!r}" for i, (p, e, t) in
                 enumerate(zip(self.loss_p, self.loss_e, self.loss_total))]
        return "\n".join(rows) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def photometric_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every channel (and ray); gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    r = pred - np.asarray(target, dtype=np.float64)
    return float(np.mean(r * r)), 2.0 * r / r.size


def embedding_loss(pred: np.ndarray, target: np.ndarray,
                   delta: float = 1.0) -> tuple[float, np.ndarray]:
    """Elementwise Huber loss averaged over all entries; gradient w.r.t. ``pred``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r)) / r.size
    return float(np.mean(loss)), grad


def _flatten_views(views: list[TrainView]):
    rays, rgb, emb = [], [], []
    for v in views:
        rays.append(make_rays(v.camera))
        rgb.append(np.asarray(v.rgb, dtype=np.float64).reshape(-1, 3))
        emb.append(v.embeddings.stacked().reshape(-1, 2 * v.embeddings.dim).astype(np.float64))
    return (RayBatch(np.concatenate([r.origins for r in rays]),
                     np.concatenate([r.directions for r in rays]),
                     np.concatenate([r.near for r in rays]),
                     np.concatenate([r.far for r in rays])),
            np.concatenate(rgb), np.concatenate(emb))


def training_psnr(field_: VoxelField, views: list[TrainView], n_samples: int) -> float:
    preds = [render_view(field_, v.camera, n_samples)[0] for v in views]
    return psnr(np.stack(preds), np.stack([v.rgb for v in views]))


def train(field_: VoxelField, views: list[TrainView], cfg: TrainConfig,
          progress=None) -> TrainReport:
    """Plain SGD on ``field_`` in place.

    Each iteration draws ``rays_per_batch`` pixels uniformly with replacement
    over all views, renders them with stratified samples, and takes one step
    with separate learning rates for the radiance grids and the embedding
    grid. Everything random comes from ``cfg.seed``.
    """
    if not views:
        raise ConfigError("training needs at least one view")
    dims = {v.embeddings.dim for v in views}
    if len(dims) != 1:
        raise ConfigError(f"views disagree on embedding dimension: {sorted(dims)}")
    if field_.dim != 2 * dims.pop():
        raise ConfigError(f"field has {field_.dim} embedding channels; views need "
                          f"{2 * views[0].embeddings.dim} (object + part level)")
    rays, rgb, emb = _flatten_views(views)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    start = time.perf_counter()
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(rays), size=cfg.rays_per_batch)
        batch = rays[idx]
        t, delta = sample_depths(batch.near, batch.far, cfg.n_samples, True, rng)
        cache = _forward(field_, batch, t, delta)
        lp, g_color = photometric_loss(cache.batch.color, rgb[idx])
        le, g_emb = embedding_loss(cache.batch.embedding, emb[idx], cfg.huber_delta)
        report.loss_p.append(lp)
        report.loss_e.append(le)
        report.loss_total.append(lp + cfg.lambda_embed * le)
        grad = _backward(field_, cache, g_color, cfg.lambda_embed * g_emb)
        field_.apply_update(grad, cfg.lr_radiance, cfg.lr_embedding)
        if progress is not None:
            progress(it, report)
    report.wall_time = time.perf_counter() - start
    report.final_psnr = training_psnr(field_, views, cfg.n_samples)
    return report
