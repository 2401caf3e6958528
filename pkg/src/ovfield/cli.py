"""Command-line entry point: ``ovfield <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 degenerate
math (cancelling fusion, undefined metric).
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib.resources import files
from pathlib import Path

from . import __version__, pipeline
from .errors import ConfigError, OVFieldError
from .query import DEFAULT_LEVEL_PIXELS, Query, parse_query_file
from .train import TrainConfig

logger = logging.getLogger("ovfield")


def default_spec_text() -> str:
    return (files("ovfield") / "data" / "toy_scene.txt").read_text()


def _spec_text(arg: str) -> str:
    if arg == "toy":
        return default_spec_text()
    return Path(arg).read_text()


def _config(args) -> TrainConfig:
    cfg = TrainConfig.from_text(Path(args.config).read_text()) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig(**{**vars(cfg), "seed": args.seed})
    return cfg


def _progress(every: int = 200):
    def report(it, rep):
        if it % every == 0:
            logger.info("iter %d  L_p %.6f  L_e %.6f", it, rep.loss_p[-1], rep.loss_e[-1])
    return report


def cmd_generate(args) -> None:
    m = pipeline.generate(_spec_text(args.spec), args.out, args.seed or 0, args.views)
    print(m)


def cmd_extract(args) -> None:
    corr = pipeline.parse_corruption(args.drop_prob, args.noise, args.split_prob, args.seed or 0)
    print(pipeline.extract(args.scene, args.out, corr, args.background_noise))


def cmd_train(args) -> None:
    print(pipeline.train_stage(args.scene, args.proposals, args.out, _config(args),
                               not args.per_view, _progress()))


def cmd_query(args) -> None:
    sd = pipeline.SceneDir.load(args.scene)
    if args.query_file:
        q = parse_query_file(args.query_file)
    elif args.object is not None:
        if not 0 <= args.object < len(sd.scene.objects):
            raise ConfigError(f"scene has no object {args.object}")
        q = Query(sd.scene.objects[args.object].canonical_embedding.astype(float),
                  text=f"object {args.object}")
    else:
        raise ConfigError("give --query-file or --object")
    if args.n_pixels is not None:
        q.n_pixels = args.n_pixels
    cams = pipeline.heldout_cameras(sd.cameras, args.views) if args.views else sd.cameras
    print(pipeline.query_stage(args.checkpoint, cams, q, args.out, args.tau))


def cmd_eval(args) -> None:
    print(pipeline.eval_stage(args.checkpoint, args.scene, args.out, args.views or 2,
                              args.n_pixels or DEFAULT_LEVEL_PIXELS,
                              pipeline.DEFAULT_DECOMPOSE_TAU if args.tau is None else args.tau))


def cmd_ablate(args) -> None:
    seed = args.seed or 0
    corruption = dict(drop_prob=args.drop_prob, embed_noise_sigma=args.noise,
                      split_prob=args.split_prob)
    m = pipeline.ablate(_spec_text(args.spec), args.out, list(range(seed, seed + args.seeds)),
                        corruption, args.views or 8, _config(args), progress=_progress())
    for s, f, p in pipeline.read_comparison(Path(args.out) / "comparison.csv"):
        print(f"seed {s}: fused {f:.4f}  per-view {p:.4f}")
    print(m)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovfield", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("generate", help="synthesize a scene and render a camera ring")
    g.add_argument("spec", help="scene description file, or 'toy' for the built-in scene")
    g.add_argument("--views", type=int, default=pipeline.DEFAULT_VIEWS)
    common(g)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("extract", help="oracle mask proposals and background embeddings")
    e.add_argument("scene", help="directory written by generate")
    e.add_argument("--drop-prob", type=float, default=0.0)
    e.add_argument("--noise", type=float, default=0.0, help="embedding noise sigma")
    e.add_argument("--split-prob", type=float, default=0.0)
    e.add_argument("--background-noise", type=float, default=0.0)
    common(e)
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="integrate proposals and train the field")
    t.add_argument("scene")
    t.add_argument("proposals", help="directory written by extract")
    t.add_argument("--config", help="key=value training config")
    t.add_argument("--per-view", action="store_true",
                   help="supervise with per-view embeddings instead of fused ones")
    common(t)
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("query", help="relevancy maps and decomposition for one query")
    q.add_argument("checkpoint")
    q.add_argument("scene", help="scene directory supplying cameras (and --object embeddings)")
    q.add_argument("--query-file")
    q.add_argument("--object", type=int, help="query with this object's canonical embedding")
    q.add_argument("--tau", type=float, default=None)
    q.add_argument("--n-pixels", type=int, default=None)
    q.add_argument("--views", type=int, default=0,
                   help="render this many held-out ring views instead of the scene cameras")
    common(q)
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("eval", help="held-out ranking metrics and 3D IoU")
    v.add_argument("checkpoint")
    v.add_argument("scene")
    v.add_argument("--views", type=int, default=None)
    v.add_argument("--n-pixels", type=int, default=None)
    v.add_argument("--tau", type=float, default=None, help="3D decomposition threshold")
    common(v)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="fused vs per-view supervision over several seeds")
    a.add_argument("spec", nargs="?", default="toy")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--views", type=int, default=None)
    a.add_argument("--drop-prob", type=float, default=pipeline.ABLATION_CORRUPTION["drop_prob"])
    a.add_argument("--noise", type=float, default=pipeline.ABLATION_CORRUPTION["embed_noise_sigma"])
    a.add_argument("--split-prob", type=float, default=pipeline.ABLATION_CORRUPTION["split_prob"])
    a.add_argument("--config")
    common(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OVFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
