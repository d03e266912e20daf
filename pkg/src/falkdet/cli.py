"""``falkdet`` command line: generate, train, eval, sweep-m and cv.

Every flag can also be given in a plain-text ``--config`` file, one
``key=value`` per line with ``#`` comments; keys are the flag names without
the leading dashes.  Flags given on the command line win over the file.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .bootstrap import (BootstrapConfig, cross_validate, save_ensemble, train_ensemble,
                        load_ensemble, write_traces)
from .errors import ConfigError, FalkdetError
from .evaluation import (DEFAULT_MATCH_IOU, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH, detect,
                         evaluate_map, write_detections, write_report)
from .falkon import SolverConfig
from .regions import DEFAULT_TAU_NEG, DEFAULT_TAU_POS, label_image, load_dataset, save_dataset
from .synthetic import SyntheticConfig, generate_synthetic

logger = logging.getLogger("falkdet")

DEFAULT_SWEEP = "10,25,50,100,250,500,1000"
_BOOT = BootstrapConfig()
_SOLVER = SolverConfig()
_SYN = SyntheticConfig()


def read_config_file(path) -> dict[str, str]:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config file ({exc.strerror})") from exc
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, found {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        items[key.replace("-", "_")] = value
    return items


def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _optional_int(text: str) -> int | None:
    return None if text in ("", "None", "none") else int(text)


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# -- parser ---------------------------------------------------------------------------

class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--seed", type=int, default=0, help="master random seed")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (classes train in parallel)")
    g.add_argument("--config", default=None,
                   help="key=value file supplying defaults for any flag")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")


def _add_training(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--nb", type=int, default=_BOOT.n_batches,
                   help="number of bootstrap mini-batches; 0 trains on random negatives")
    g.add_argument("--batch", type=int, default=_BOOT.batch_size, help="negatives per mini-batch")
    g.add_argument("--m", type=int, default=_BOOT.num_centers, help="Nystrom centers")
    g.add_argument("--lambda", dest="lam", type=float, default=_BOOT.lam,
                   help="regularization parameter")
    g.add_argument("--sigma", type=float, default=_BOOT.sigma, help="Gaussian kernel bandwidth")
    g.add_argument("--tau-hard", type=float, default=_BOOT.tau_hard,
                   help="score above which a negative is hard")
    g.add_argument("--tau-easy", type=float, default=_BOOT.tau_easy,
                   help="score below which a chosen negative is pruned")
    g.add_argument("--hard-cap", type=_optional_int, default=_BOOT.hard_cap,
                   help="max hard negatives kept per iteration (None: batch size)")
    g.add_argument("--batch-mode", choices=["random", "image"], default=_BOOT.batch_mode,
                   help="random batches, or one batch per training image")
    g.add_argument("--other-class-negatives", type=_bool, default=_BOOT.other_class_negatives,
                   help="use other classes' positives as negatives")
    g.add_argument("--bbox-ridge", type=float, default=_BOOT.bbox_ridge,
                   help="ridge of the box regressors")
    g.add_argument("--tau-pos", type=float, default=DEFAULT_TAU_POS,
                   help="IoU at or above which a proposal is positive")
    g.add_argument("--tau-neg", type=float, default=DEFAULT_TAU_NEG,
                   help="IoU below which a proposal is background")
    g.add_argument("--max-iter", type=int, default=_SOLVER.max_cg_iterations,
                   help="max conjugate-gradient iterations")
    g.add_argument("--cg-tol", type=float, default=_SOLVER.cg_tolerance,
                   help="relative residual tolerance of the solver")
    g.add_argument("--tile-rows", type=int, default=_SOLVER.tile_rows,
                   help="rows per streamed kernel tile")


def _add_eval(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("evaluation")
    g.add_argument("--match-iou", type=float, default=DEFAULT_MATCH_IOU,
                   help="IoU needed to match a detection to ground truth")
    g.add_argument("--nms-iou", type=float, default=DEFAULT_NMS_IOU,
                   help="NMS suppression IoU")
    g.add_argument("--score-thresh", type=float, default=DEFAULT_SCORE_THRESH,
                   help="minimum classifier score of a detection")


def _add_synthetic(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--num-classes", type=int, default=_SYN.num_classes, help="object classes")
    g.add_argument("--dim", type=int, default=_SYN.dim, help="feature dimension")
    g.add_argument("--images", type=int, default=_SYN.images, help="number of images")
    g.add_argument("--positives-per-class", type=int, default=_SYN.positives_per_class,
                   help="objects per class per image")
    g.add_argument("--jitter-per-gt", type=int, default=_SYN.jitter_per_gt,
                   help="extra positive proposals around each object")
    g.add_argument("--ambiguous-per-gt", type=int, default=_SYN.ambiguous_per_gt,
                   help="proposals with IoU between 0.35 and 0.55 per object")
    g.add_argument("--imbalance", type=float, default=_SYN.imbalance,
                   help="background proposals per positive proposal")
    g.add_argument("--negatives-per-image", type=_optional_int, default=_SYN.negatives_per_image,
                   help="background proposals per image (overrides --imbalance)")
    g.add_argument("--margin", type=float, default=_SYN.margin,
                   help="distance between class prototypes")
    g.add_argument("--cluster-sigma", type=float, default=_SYN.cluster_sigma,
                   help="spread of each positive cluster")
    g.add_argument("--background-scale", type=float, default=_SYN.background_scale,
                   help="background spread in units of cluster sigma")
    g.add_argument("--background-offset", type=float, default=_SYN.background_offset,
                   help="background center distance in units of margin")
    g.add_argument("--hard-fraction", type=float, default=_SYN.hard_fraction,
                   help="fraction of background drawn near class prototypes")
    g.add_argument("--image-size", type=float, default=_SYN.image_size, help="image side in pixels")
    g.add_argument("--delta-signal", type=float, default=_SYN.delta_signal,
                   help="strength of box offsets planted in positive features")
    g.add_argument("--class-names", default=None,
                   help="comma-separated class names (default class0, class1, ...)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="falkdet", formatter_class=_Formatter,
                                     description="Kernel-based region classification "
                                                 "with approximated hard negative mining.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    subs = {}

    p = sub.add_parser("generate", formatter_class=_Formatter, help="write a synthetic dataset",
                       description="Write a synthetic detection dataset directory.")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--split", default="train", help="split name; keys the image stream")
    _add_synthetic(p)
    _add_common(p)
    subs["generate"] = p

    p = sub.add_parser("train", formatter_class=_Formatter, help="train a detector ensemble",
                       description="Train one classifier and box regressor per class.")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="output model directory")
    _add_training(p)
    _add_common(p)
    subs["train"] = p

    p = sub.add_parser("eval", formatter_class=_Formatter, help="detect and score a test set",
                       description="Run detection and write detections and AP report CSVs.")
    p.add_argument("--model", required=True, help="trained model directory")
    p.add_argument("--data", required=True, help="test dataset directory")
    p.add_argument("--out", required=True, help="directory for detections.csv and report.csv")
    _add_eval(p)
    _add_common(p)
    subs["eval"] = p

    p = sub.add_parser("sweep-m", formatter_class=_Formatter, help="train and test over M",
                       description="Train and evaluate for each number of Nystrom centers.")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--test", required=True, help="test dataset directory")
    p.add_argument("--ms", type=_int_list, default=DEFAULT_SWEEP,
                   help="comma-separated numbers of centers")
    p.add_argument("--out", required=True, help="output CSV (M,map,train_seconds,test_seconds)")
    _add_training(p)
    _add_eval(p)
    _add_common(p)
    subs["sweep-m"] = p

    p = sub.add_parser("cv", formatter_class=_Formatter, help="cross-validate lambda and sigma",
                       description="One-fold cross-validation on a 20%% by-image split.")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--lambdas", type=_float_list, default="1e-6,1e-4,1e-2",
                   help="comma-separated lambda grid")
    p.add_argument("--sigmas", type=_float_list, default="4,8,16",
                   help="comma-separated sigma grid")
    p.add_argument("--validation-fraction", type=float, default=0.2,
                   help="fraction of images held out for validation")
    p.add_argument("--out", required=True, help="output CSV (lambda,sigma,map)")
    _add_training(p)
    _add_eval(p)
    _add_common(p)
    subs["cv"] = p
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, folding in ``--config`` values that were not given as flags."""
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = subs[args.command]
        dests = {a.dest for a in sub._actions if a.dest not in ("help", "config")}
        items = read_config_file(args.config)
        items = {("lam" if k == "lambda" else k): v for k, v in items.items()}
        unknown = sorted(set(items) - dests)
        if unknown:
            raise ConfigError(f"{args.config}: unknown key(s) for '{args.command}': "
                              f"{', '.join(unknown)}")
        # string defaults go through each flag's type converter
        sub.set_defaults(**items)
        args = parser.parse_args(argv)
    return args


# -- config assembly ------------------------------------------------------------------

def bootstrap_config(args) -> BootstrapConfig:
    solver = SolverConfig(max_cg_iterations=args.max_iter, cg_tolerance=args.cg_tol,
                          tile_rows=args.tile_rows)
    return BootstrapConfig(n_batches=args.nb, batch_size=args.batch, num_centers=args.m,
                           lam=args.lam, sigma=args.sigma, tau_hard=args.tau_hard,
                           tau_easy=args.tau_easy, hard_cap=args.hard_cap,
                           batch_mode=args.batch_mode,
                           other_class_negatives=args.other_class_negatives,
                           bbox_ridge=args.bbox_ridge, seed=args.seed, solver=solver)


def synthetic_config(args) -> SyntheticConfig:
    names = tuple(n.strip() for n in args.class_names.split(",")) if args.class_names else None
    return SyntheticConfig(
        num_classes=args.num_classes, dim=args.dim, images=args.images,
        positives_per_class=args.positives_per_class, jitter_per_gt=args.jitter_per_gt,
        ambiguous_per_gt=args.ambiguous_per_gt, imbalance=args.imbalance,
        negatives_per_image=args.negatives_per_image, margin=args.margin,
        cluster_sigma=args.cluster_sigma, background_scale=args.background_scale,
        background_offset=args.background_offset, hard_fraction=args.hard_fraction,
        image_size=args.image_size, delta_signal=args.delta_signal, class_names=names)


def _check_threads(args) -> int:
    if args.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {args.threads}")
    return args.threads


# -- commands -------------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = synthetic_config(args)
    dataset = generate_synthetic(config, args.seed, args.split)
    save_dataset(dataset, args.out)
    n_pos = n_neg = 0
    for im in dataset.images:
        labels = label_image(im).labels
        n_pos += int((labels >= 0).sum())
        n_neg += int((labels == -1).sum())
    print(f"images={len(dataset.images)} proposals={dataset.num_proposals} "
          f"ground_truth={sum(len(im.gt_classes) for im in dataset.images)} "
          f"positives={n_pos} negatives={n_neg} feature_rows={len(dataset.features)}")
    return 0


def cmd_train(args) -> int:
    threads = _check_threads(args)
    config = bootstrap_config(args)
    dataset = load_dataset(args.data)
    ensemble = train_ensemble(dataset, config, args.tau_pos, args.tau_neg, threads)
    out = Path(args.out)
    save_ensemble(ensemble, out)
    write_traces(ensemble, out)
    (out / "train_time.txt").write_text(f"{ensemble.train_seconds:.3f}\n", encoding="utf-8")
    print(f"train_seconds={ensemble.train_seconds:.3f}")
    for msg in ensemble.errors.values():
        print(f"falkdet train: error: {msg}", file=sys.stderr)
    return 1 if ensemble.errors else 0


def _evaluate(ensemble, dataset, args):
    dets = detect(ensemble, dataset, args.score_thresh, args.nms_iou)
    return dets, evaluate_map(dets, dataset, args.match_iou)


def cmd_eval(args) -> int:
    ensemble = load_ensemble(args.model)
    dataset = load_dataset(args.data, split="test")
    t0 = time.perf_counter()
    dets, report = _evaluate(ensemble, dataset, args)
    seconds = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(dets, out / "detections.csv")
    write_report(report, out / "report.csv")
    print(f"mAP={report.mAP:.6f} test_seconds={seconds:.3f}")
    return 0


def cmd_sweep_m(args) -> int:
    threads = _check_threads(args)
    base = bootstrap_config(args)
    train = load_dataset(args.data)
    test = load_dataset(args.test, split="test")
    rows = []
    for m in args.ms:
        ensemble = train_ensemble(train, base.replace(num_centers=m), args.tau_pos,
                                  args.tau_neg, threads)
        if ensemble.errors:
            raise FalkdetError("; ".join(ensemble.errors.values()))
        t0 = time.perf_counter()
        _, report = _evaluate(ensemble, test, args)
        test_seconds = time.perf_counter() - t0
        rows.append((m, report.mAP, ensemble.train_seconds, test_seconds))
        logger.info("M=%d mAP=%.4f train=%.3fs test=%.3fs", *rows[-1])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["M", "map", "train_seconds", "test_seconds"])
        for m, ap, tr, te in rows:
            w.writerow([m, f"{ap:.6f}", f"{tr:.3f}", f"{te:.3f}"])
    return 0


def cmd_cv(args) -> int:
    threads = _check_threads(args)
    dataset = load_dataset(args.data)
    result = cross_validate(dataset, args.lambdas, args.sigmas, bootstrap_config(args),
                            args.tau_pos, args.tau_neg, args.validation_fraction,
                            args.score_thresh, args.nms_iou, args.match_iou, threads)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "sigma", "map"])
        for lam, sigma, ap in result.table:
            w.writerow([repr(lam), repr(sigma), f"{ap:.6f}"])
    print(f"lambda={result.lam!r} sigma={result.sigma!r}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "sweep-m": cmd_sweep_m, "cv": cmd_cv}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"falkdet: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # BLAS stays single-threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args)
    except (FalkdetError, OSError) as exc:
        print(f"falkdet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
