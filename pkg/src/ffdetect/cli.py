"""Command-line entry point: ``ffdetect <subcommand> ...``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 I/O
error, 4 model/checkpoint incompatibility.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_MODEL = 0, 1, 2, 3, 4

log = logging.getLogger("ffdetect")


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, config: bool = True, out: bool = True) -> None:
    if config:
        p.add_argument("--config", help="JSON training config (defaults to the desk-scale reference)")
    if out:
        p.add_argument("--out", required=True, help="directory for every output file")
    p.add_argument("--seed", type=int, help="seed for all randomness (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ffdetect", description="Multi-level image forgery detection toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", help="write train/val/test splits in images/ masks/ labels.csv form")
    _add_common(p)

    p = sub.add_parser("train", help="train and write metrics.csv + checkpoint.ffck")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dataset", help="'toy', 'spectral' or a directory with train/ val/ test/")

    for name, text in (("eval", "evaluate a checkpoint on the held-out split"),
                       ("sweep", "JPEG / blur robustness sweep of a checkpoint")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train and evaluate full and single-branch models")
    _add_common(p)

    for name, text in (("analyze", "verdict, localization heatmap and optional branch maps for one image"),
                       ("extract", "dump the raw branch feature maps of one image")):
        p = sub.add_parser(name, help=text)
        p.add_argument("image")
        _add_common(p, config=False)
        if name == "analyze":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--branch-maps", action="store_true", help="also write per-branch token-norm maps")
        p.add_argument("--seg-map", help="PGM/PNG label map replacing the k-means segmentation")
        p.add_argument("--depth-map", help="PGM/PNG depth map replacing the luminance proxy")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the model")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--skip-model", action="store_true", help="only check the primitives")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    return ap


# -------------------------------------------------------------------- helpers

def _resolve_config(args, overrides: dict | None = None):
    from .train import TrainConfig, load_config, reference_config

    cfg = load_config(args.config) if getattr(args, "config", None) else reference_config()
    changes = {k: v for k, v in (overrides or {}).items() if v is not None}
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **changes})
    return cfg


def _echo(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, **resolved}, sort_keys=True))
    sys.stdout.flush()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path: str):
    from .checkpoint import load_checkpoint

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _config_from_checkpoint(meta: dict, args):
    from .train import TrainConfig

    if getattr(args, "config", None):
        return _resolve_config(args)
    base = meta.get("train")
    cfg = TrainConfig.from_dict(base) if base else _resolve_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


# -------------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    from .data import save_dataset
    from .train import _make_split

    cfg = _resolve_config(args)
    if cfg.dataset not in ("toy", "spectral"):
        raise UsageError("gen-data needs dataset 'toy' or 'spectral'")
    _echo("gen-data", cfg.to_dict())
    out = _out_dir(args)
    for split, (name, n) in enumerate((("train", cfg.n_per_class), ("val", cfg.val_per_class),
                                       ("test", cfg.test_per_class))):
        save_dataset(_make_split(cfg, n, split), out / name)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _resolve_config(args, {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                                 "dataset": args.dataset})
    if args.epochs is not None and cfg.t_max > cfg.epochs:
        cfg = cfg.replace(t_max=cfg.epochs)
    _echo("train", cfg.to_dict())
    out = _out_dir(args)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    res = train(cfg, out)
    last = res.rows[-1]
    print(f"trained epochs={last['epoch']} acc_train={last['acc_train']} acc_val={last['acc_val']} "
          f"checkpoint={res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import REPORT_FIELDS, evaluate, write_rows
    from .features import build_feature_set
    from .train import held_out_samples

    model, meta = _load_model(args.checkpoint)
    cfg = _config_from_checkpoint(meta, args)
    _echo("eval", {"checkpoint": str(args.checkpoint), **cfg.to_dict()})
    out = _out_dir(args)
    rep = evaluate(model, build_feature_set(held_out_samples(cfg), cfg.seed), cfg.batch_size)
    write_rows([rep.row()], out / "eval.csv", REPORT_FIELDS)
    write_rows([{"type": k, "accuracy": f"{v:.6f}", "count": str(rep.counts[k])}
                for k, v in rep.per_type_accuracy.items()], out / "per_type.csv", ("type", "accuracy", "count"))
    print(" ".join(f"{k}={v}" for k, v in rep.row().items()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .evaluation import SWEEP_HEADER, robustness_sweep, write_rows
    from .train import held_out_samples

    model, meta = _load_model(args.checkpoint)
    cfg = _config_from_checkpoint(meta, args)
    _echo("sweep", {"checkpoint": str(args.checkpoint), **cfg.to_dict()})
    out = _out_dir(args)
    rows = robustness_sweep(model, held_out_samples(cfg), seed=cfg.seed, batch_size=cfg.batch_size)
    write_rows(rows, out / "sweep.csv", SWEEP_HEADER)
    for r in rows:
        print(f"{r['perturbation']}={r['level']} accuracy={r['accuracy']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import ABLATION_HEADER, ABLATIONS, ablation_run, write_rows

    cfg = _resolve_config(args)
    _echo("ablate", cfg.to_dict())
    out = _out_dir(args)
    rows = []
    for name, branches in ABLATIONS:
        rep = ablation_run(cfg, branches, out / f"ablate_{name}")
        rows.append({"config": name, "branches": "+".join(branches), **rep.row()})
        print(f"{name} accuracy={rows[-1]['accuracy']}")
    write_rows(rows, out / "ablation.csv", ABLATION_HEADER)
    return EXIT_OK


def _side_maps(args, shape):
    from .imaging import load_labels, load_plane
    from .mid import check_segment_map

    seg = depth = None
    if args.seg_map:
        seg = check_segment_map(load_labels(args.seg_map), shape)
    if args.depth_map:
        depth = load_plane(args.depth_map)
        if depth.shape != shape:
            raise ValueError(f"depth map {depth.shape} does not match image {shape}")
    return seg, depth


def _fit(img, seg, depth, size):
    """Resize image (bilinear), segments (nearest) and depth (bilinear) to ``size``."""
    from .imaging import resize_bilinear

    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img, seg, depth
    img = resize_bilinear(img, size, size)
    if seg is not None:
        rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
        cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
        seg = seg[np.ix_(rows, cols)]
    if depth is not None:
        depth = resize_bilinear(depth, size, size)
    return img, seg, depth


def cmd_analyze(args) -> int:
    from . import tensor as T
    from .data import CLASSES
    from .features import image_features
    from .imaging import load_image, resize_bilinear, save_image
    from .model import FeatureBatch

    model, _ = _load_model(args.checkpoint)
    img = load_image(args.image)
    h, w = img.shape[:2]
    seg, depth = _side_maps(args, (h, w))
    seed = args.seed if args.seed is not None else 0
    _echo("analyze", {"image": args.image, "checkpoint": args.checkpoint, "seed": seed,
                      "seg_map": args.seg_map, "depth_map": args.depth_map, "branch_maps": args.branch_maps,
                      "model": model.config.to_dict()})
    size = model.config.image_size
    img_s, seg_s, depth_s = _fit(img, seg, depth, size)
    rgb, low, mid, high = image_features([img_s], [seg_s], [depth_s], seed=seed)
    batch = FeatureBatch(T.Tensor(rgb), mid, high, low)
    hs = model.encode(batch)
    out = model.heads(model.fuse(hs), batch.size)
    p_fake = float(out.p_fake[0])
    probs = out.type_hat[0]
    t = int(np.argmax(probs))
    outdir = _out_dir(args)
    mask = out.mask_hat[0]
    if (h, w) != mask.shape:
        mask = np.clip(resize_bilinear(mask, w, h), 0.0, 1.0)
    save_image(mask, outdir / "mask.png")
    if args.branch_maps:
        for name, tok in hs.items():
            g = int(round(np.sqrt(tok.shape[1])))
            norms = np.linalg.norm(tok.data[0], axis=-1).reshape(g, g)
            peak = norms.max()
            plane = norms / peak if peak > 0 else norms
            save_image(np.clip(resize_bilinear(plane, w, h), 0.0, 1.0), outdir / f"branch_{name}.png")
    verdict = "fake" if p_fake >= 0.5 else "real"
    print(f"verdict={verdict} p_fake={p_fake:.6f} type={CLASSES[t]} p_type={probs[t]:.6f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from collections import OrderedDict

    from .checkpoint import save_tensors
    from .features import image_features
    from .imaging import load_image

    img = load_image(args.image)
    seg, depth = _side_maps(args, img.shape[:2])
    seed = args.seed if args.seed is not None else 0
    _echo("extract", {"image": args.image, "seed": seed, "seg_map": args.seg_map, "depth_map": args.depth_map})
    _, (dct, dwt, srm), mid, high = image_features([img], [seg], [depth], seed=seed)
    tensors = OrderedDict([("dct", dct[0]), ("dwt", dwt[0]), ("srm", srm[0]), ("mid", mid[0]), ("high", high[0])])
    path = _out_dir(args) / "features.fftn"
    save_tensors(path, tensors, {"image": Path(args.image).name,
                                 "mid_channels": ["canny", "sobel", "log", "boundary", "alignment"],
                                 "high_channels": ["shadow", "reflection", "depth", "depth_gradient"]})
    for k, v in tensors.items():
        print(f"{k} shape={tuple(v.shape)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import clear_faults, inject_fault, run_gradcheck

    _echo("gradcheck", {"seed": args.seed, "tolerance": args.tolerance, "model": not args.skip_model})
    if args.inject_fault:
        inject_fault(args.inject_fault)
    try:
        results = run_gradcheck(args.seed, include_model=not args.skip_model)
    finally:
        clear_faults()
    failed = []
    for name, err in results:
        ok = err < args.tolerance
        print(f"{name:12s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"gradcheck passed: {len(results)} checks")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "analyze": cmd_analyze, "extract": cmd_extract, "gradcheck": cmd_gradcheck}


def _thread_limit():
    raw = os.environ.get("FF_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"FF_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    from .checkpoint import CheckpointError
    from .imaging import ImageIOError
    from .train import ConfigError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (ImageIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
