"""``rangevit`` command line.

Exit status: 0 on success, 1 on a runtime failure, 2 on an invalid
configuration (the message names the offending key).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .model import ConfigError, RangeViT, param_breakdown

log = logging.getLogger("rangevit")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    train = cfg.train
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "policy", None) is not None:
        try:
            train = replace(train, finetune_policy=args.policy)
        except ConfigError as exc:
            raise ConfigError("--policy", str(exc).split(": ", 1)[1]) from None
    return replace(cfg, train=train)


def _model_weights(args) -> Path:
    if args.init is not None:
        return Path(args.init)
    out = Path(args.out)
    for name in ("best.rvwt", "last.rvwt"):
        if (out / name).exists():
            return out / name
    raise FileNotFoundError(f"no weights given (--init) and no best.rvwt/last.rvwt in {out}")


def _trained_model(cfg: RunConfig, args) -> RangeViT:
    from .data_io import load_model_weights

    model = RangeViT(cfg.model, seed=cfg.train.seed)
    path = _model_weights(args)
    load_model_weights(path, model)
    log.info("loaded weights from %s", path)
    return model.eval()


def _eval_split(cfg: RunConfig, requested: str | None) -> str:
    if requested is not None:
        return requested
    return "val" if cfg.split_names("val") else "train"


# -- subcommands ------------------------------------------------------------------


def cmd_project(cfg: RunConfig, args) -> int:
    """Write range images and PGM previews."""
    from .data_io import write_pgm, write_range_image
    from .projection import range_preview

    out = Path(args.out)
    for split in ("train", "val"):
        names = cfg.split_names(split)
        if not names:
            continue
        folder = out / split
        folder.mkdir(parents=True, exist_ok=True)
        for name, cloud in zip(names, cfg.load_split(split)):
            image = cfg.projection(cloud)
            write_range_image(folder / f"{name}.rvri", image)
            write_pgm(folder / f"{name}.pgm", range_preview(image))
            print(f"{split}/{name}: {image.num_points} points, {int(image.occupancy.sum())} pixels, "
                  f"{image.collisions} collisions, {image.skipped} skipped, {image.overflow} overflow")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    """Train a model."""
    from .data_io import load_pretrained
    from .trainer import train

    model = RangeViT(cfg.model, seed=cfg.train.seed)
    if args.init is not None:
        report = load_pretrained(args.init, model, cfg.train.finetune_policy)
        print(f"imported {len(report.copied)} tensors, resampled {len(report.resampled)}, "
              f"skipped {len(report.unmatched)} unknown names, {len(report.missing)} encoder tensors not in archive")
        for name in report.unmatched:
            log.info("skipped archive entry %s", name)
    result = train(model, cfg.load_split("train"), cfg.train, cfg.projection, cfg.load_split("val") or None,
                   args.out, resume=args.resume)
    last = result.history[-1]
    print(f"epoch {last.epoch}: train loss {last.train_loss:.4f}, val mIoU {last.val_miou:.4f}")
    if result.best_epoch is not None:
        print(f"best val mIoU {result.best_miou:.4f} at epoch {result.best_epoch}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    """Per-class IoU on a split."""
    from .data_io import write_iou_csv
    from .objective import miou
    from .trainer import evaluate

    split = _eval_split(cfg, args.split)
    clouds = cfg.load_split(split)
    if not clouds:
        raise ValueError(f"split {split!r} is empty")
    model = _trained_model(cfg, args)
    cm, _ = evaluate(model, clouds, cfg.projection, cfg.stride, cfg.knn_k, cfg.knn_window)
    per_class, mean = miou(cm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_iou_csv(out / "iou.csv", per_class, mean, cfg.class_names)
    for k, iou in enumerate(per_class, start=1):
        print(f"{k:3d} {cfg.class_names.get(k, ''):12s} {iou:.4f}")
    print(f"mIoU ({split}): {mean:.4f}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args) -> int:
    """Write predicted labels per scan."""
    from .data_io import write_labels
    from .trainer import evaluate

    split = _eval_split(cfg, args.split)
    clouds = cfg.load_split(split)
    model = _trained_model(cfg, args)
    _, preds = evaluate(model, clouds, cfg.projection, cfg.stride, cfg.knn_k, cfg.knn_window)
    folder = Path(args.out) / "predictions" / split
    folder.mkdir(parents=True, exist_ok=True)
    for name, pred in zip(cfg.split_names(split), preds):
        write_labels(folder / f"{name}.label", pred)
        print(f"{split}/{name}: {pred.size} labels")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig | None, args) -> int:
    """Run the finite-difference suite."""
    from .gradsuite import run_suite

    seed = args.seed if args.seed is not None else 0
    results = run_suite(seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.report.name:16s} max rel. error {r.report.max_rel_error:.2e} (tolerance {r.tolerance:.0e})")
    failed = [r.report.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_FAILURE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_params(cfg: RunConfig, args) -> int:
    """Print parameter counts per submodule."""
    parts = param_breakdown(cfg.model)
    for name, count in parts.items():
        print(f"{name:10s} {count:>12,d}")
    total = sum(parts.values())
    print(f"{'total':10s} {total:>12,d}  ({total / 1e6:.2f}M)")
    return EXIT_OK


COMMANDS = {
    "project": cmd_project,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rangevit", description="Range-image LiDAR segmentation with a ViT encoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in COMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").strip() or None)
        p.add_argument("--config", required=name != "gradcheck", help="run configuration (JSON)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--init", help="pretrained encoder archive (train) or model weights (eval, infer)")
        p.add_argument("--policy", help="override train.finetune_policy")
        p.add_argument("--resume", help="continue training from a last.rvwt archive")
        if name in ("eval", "infer"):
            p.add_argument("--split", choices=("train", "val"), help="default: val when present, else train")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.config is not None:
            cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"rangevit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        if args.verbose:
            log.exception("failed")
        print(f"rangevit: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
