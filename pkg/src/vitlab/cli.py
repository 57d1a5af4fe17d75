"""Command-line entry point: ``vitlab {run,cost,adapt,attmap,synth}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__


def _cmd_run(args) -> int:
    from .experiment import ExperimentConfig, run_sweep

    cfg = ExperimentConfig.load(args.config).with_env_seeds()
    root = run_sweep(cfg, args.out, parallel=args.parallel, resume=args.resume)
    print(root / "results.md")
    print((root / "results.md").read_text(encoding="utf-8"), end="")
    return 0


def _cmd_cost(args) -> int:
    from .cost import ensemble_gflops, model_flops
    from .vit import PRESETS, PatchSpec, ViTConfig

    L, d, h = PRESETS[args.preset]
    D = args.size if args.dims == 3 else None

    def config(p):
        return ViTConfig(L, d, h, PatchSpec(p, args.size, args.size, D), args.classes)

    print(f"{'patch':>6} {'T_patch':>8} {'T_total':>8} {'GFLOPs':>10}")
    for p in args.patch:
        rep = model_flops(config(p), args.mode)
        print(f"{p:>6} {rep.T_patch:>8} {rep.T_total:>8} {rep.gflops:>10.4f}")
    if args.ensemble:
        total = ensemble_gflops([config(p) for p in args.ensemble], args.mode)
        label = "+".join(str(p) for p in args.ensemble)
        print(f"{label:>6} {'':>8} {'':>8} {total:>10.4f}")
    return 0


def _cmd_adapt(args) -> int:
    from .adapt import AdaptationPlan, adapt
    from .checkpoint import load_checkpoint, save_checkpoint
    from .vit import PatchSpec

    src = load_checkpoint(args.checkpoint)
    D = args.depth if args.dims == 3 else None
    spec = PatchSpec(args.patch, args.size, args.size, D, src.meta["in_chans"])
    plan = AdaptationPlan(spec, args.classes, normalize_inflation=not args.no_normalize,
                          fresh_patch_embed=args.fresh_patch_embed, reuse_head=args.reuse_head, seed=args.seed)
    save_checkpoint(adapt(src, plan), args.out)
    print(args.out)
    return 0


def _cmd_attmap(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .experiment import export_attention_heatmap

    ckpt = load_checkpoint(args.checkpoint)
    split = load_dataset(args.dataset).splits[args.split]
    if not 0 <= args.index < len(split):
        raise IndexError(f"index {args.index} outside the {args.split} split of size {len(split)}")
    for kind, path in export_attention_heatmap(ckpt, split.images[args.index], args.out).items():
        print(f"{kind}: {path}")
    return 0


def _cmd_synth(args) -> int:
    from .data import generate_synthetic_texture, save_dataset

    bundle = generate_synthetic_texture(args.n_per_class, args.seed, noise=args.noise)
    save_dataset(bundle, args.out)
    print(f"{args.out}: train/val/test = {'/'.join(map(str, bundle.sizes()))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitlab", description="ViT patch-size laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a patch-size sweep from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes")
    run.add_argument("--resume", action="store_true", help="skip runs that already have metrics.json")
    run.set_defaults(func=_cmd_run)

    cost = sub.add_parser("cost", help="token and GFLOPs report")
    cost.add_argument("--preset", choices=["vit_small", "vit_micro"], default="vit_small")
    cost.add_argument("--patch", type=int, nargs="+", default=[1, 2, 4, 7, 14, 28])
    cost.add_argument("--dims", type=int, choices=[2, 3], default=2)
    cost.add_argument("--size", type=int, default=28)
    cost.add_argument("--classes", type=int, default=2)
    cost.add_argument("--mode", choices=["paper", "full"], default="paper")
    cost.add_argument("--ensemble", type=int, nargs="*", default=[1, 2, 4])
    cost.set_defaults(func=_cmd_cost)

    ad = sub.add_parser("adapt", help="adapt a checkpoint to a new patch size, dimensionality and class count")
    ad.add_argument("--checkpoint", required=True)
    ad.add_argument("--out", required=True)
    ad.add_argument("--patch", type=int, required=True)
    ad.add_argument("--classes", type=int, required=True)
    ad.add_argument("--dims", type=int, choices=[2, 3], default=2)
    ad.add_argument("--size", type=int, default=28)
    ad.add_argument("--depth", type=int, default=28)
    ad.add_argument("--seed", type=int, default=0)
    ad.add_argument("--fresh-patch-embed", action="store_true")
    ad.add_argument("--reuse-head", action="store_true")
    ad.add_argument("--no-normalize", action="store_true", help="skip the 1/depth factor when inflating")
    ad.set_defaults(func=_cmd_adapt)

    am = sub.add_parser("attmap", help="export a class-token attention heatmap")
    am.add_argument("--checkpoint", required=True)
    am.add_argument("--dataset", required=True)
    am.add_argument("--split", choices=["train", "val", "test"], default="test")
    am.add_argument("--index", type=int, default=0)
    am.add_argument("--out", required=True, help="heatmap PNG path")
    am.set_defaults(func=_cmd_attmap)

    sy = sub.add_parser("synth", help="write the synthetic texture dataset archive")
    sy.add_argument("--out", required=True)
    sy.add_argument("--n-per-class", type=int, default=100)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--noise", type=float, default=0.03)
    sy.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, IndexError, NotImplementedError, RuntimeError) as exc:
        print(f"vitlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
