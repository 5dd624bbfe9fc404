"""Command-line interface: ``gridpix <command> [options]``.

Commands: train, infer, eval, slic, sample-demo, gradcheck. Set
``GRIDPIX_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("gridpix")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridpix", description="Grid-constrained superpixels from a learned association map.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the association network")
    p.add_argument("--data", required=True, help="dataset manifest (image[TAB]labels per line)")
    p.add_argument("--loss", choices=["slic", "sem"], default="sem")
    p.add_argument("--m", type=float, default=None, help="position weight (default 0.003 for sem, 1.0 for slic)")
    p.add_argument("--cell-size", type=_positive_int, default=16)
    p.add_argument("--iters", type=_positive_int, default=300_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--crop", type=_positive_int, nargs=2, metavar=("H", "W"), default=None)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--bottleneck", type=_positive_int, default=256)
    p.add_argument("--no-flips", action="store_true")
    p.add_argument("--log", default=None, help="loss CSV (default: <out>.loss.csv)")

    p = sub.add_parser("infer", help="predict a superpixel label map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PPM image")
    p.add_argument("--nsp", type=_positive_int, default=None, help="desired superpixel count (resizes the input)")
    p.add_argument("--cell-size", type=_positive_int, default=16)
    p.add_argument("--out", required=True, help="output 16-bit PGM label map")
    p.add_argument("--overlay", default=None, help="optional PPM with boundaries drawn")

    p = sub.add_parser("eval", help="score label maps against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted <stem>.pgm")
    p.add_argument("--gt", required=True, help="directory of ground-truth <stem>.pgm")
    p.add_argument("--out", required=True, help="CSV report")

    p = sub.add_parser("slic", help="classical SLIC baseline")
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=_positive_int, required=True)
    p.add_argument("--m", type=float, default=10.0)
    p.add_argument("--iterations", type=_positive_int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample-demo", help="superpixel vs bilinear upsampling on synthetic disparity maps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV of per-instance edge errors")
    p.add_argument("--n", type=_positive_int, default=50, help="number of instances")
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--scale", type=_positive_int, default=8, help="downsampling factor (cell size)")
    p.add_argument("--ckpt", default=None, help="use a trained network for Q instead of soft SLIC")
    p.add_argument("--images", default=None, help="directory for reconstructed disparity images")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=_positive_int, default=20)
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .io import DatasetManifest
    from .net import TrainConfig, config_dict, train

    samples = DatasetManifest.load(args.data).samples()
    if not samples:
        raise ValueError(f"{args.data}: dataset is empty")
    loss = "semantic" if args.loss == "sem" else "slic"
    m = args.m if args.m is not None else (0.003 if loss == "semantic" else 1.0)
    if args.crop is None:
        h = min(s.image.shape[0] for s in samples)
        w = min(s.image.shape[1] for s in samples)
        crop = (min(208, h - h % 16), min(208, w - w % 16))
    else:
        crop = tuple(args.crop)
    cfg = TrainConfig(
        cell=args.cell_size,
        crop=crop,
        iterations=args.iters,
        lr=args.lr,
        loss=loss,
        m=m,
        batch_size=args.batch_size,
        flips=not args.no_flips,
        seed=args.seed,
        bottleneck=args.bottleneck,
        log_every=100 if args.verbose else 0,
    )
    result = train(samples, cfg)
    result.model.save(args.out, {"train": config_dict(cfg)})
    log_path = args.log or f"{args.out}.loss.csv"
    result.write_log(log_path)
    last = result.history[-1]
    print(f"trained {cfg.iterations} iterations, final loss {last['loss']:.6f}; checkpoint {args.out}, log {log_path}")
    return 0


def cmd_infer(args) -> int:
    from .io import read_image, write_image, write_labels
    from .net import SpixelNet, infer_with_count, predict_association
    from .segmentation import compact_labels, enforce_connectivity, hard_assign, overlay_boundaries

    model, _ = SpixelNet.load(args.ckpt)
    image = read_image(args.image)
    cell = args.cell_size
    if args.nsp is None:
        assoc = predict_association(model, image, cell)
        to_source = None
    else:
        assoc, transform = infer_with_count(model, image, args.nsp, cell)
        to_source = transform.labels_to_source
    labels = enforce_connectivity(hard_assign(assoc).labels, cell).labels
    if to_source is not None:
        labels = compact_labels(to_source(labels))[0]
    write_labels(args.out, labels)
    if args.overlay:
        write_image(args.overlay, overlay_boundaries(image, labels))
    print(f"{args.out}: {int(np.unique(labels).size)} superpixels")
    return 0


def cmd_eval(args) -> int:
    from .metrics import aggregate, evaluate_directory

    rows, missing = evaluate_directory(args.pred, args.gt, args.out)
    summary = aggregate(rows)[-1]
    print(
        f"{len(rows)} images ({len(missing)} unmatched): ASA {summary['asa']:.4f} BR {summary['br']:.4f} "
        f"BP {summary['bp']:.4f} CO {summary['co']:.4f}"
    )
    if missing:
        print(f"error: {len(missing)} file(s) without a matching pair skipped: {', '.join(missing)}", file=sys.stderr)
        return 1
    return 0


def cmd_slic(args) -> int:
    from .io import read_image, write_labels
    from .slic import rgb_to_lab, slic

    labels = slic(rgb_to_lab(read_image(args.image)), args.k, m=args.m, iterations=args.iterations)
    write_labels(args.out, labels)
    print(f"{args.out}: {labels.n_distinct()} superpixels")
    return 0


def cmd_sample_demo(args) -> int:
    from .io import write_image
    from .net import SpixelNet, predict_association
    from .sampling import compare_upsamplers
    from .slic import rgb_to_lab, soft_slic_association
    from .synthetic import piecewise_constant_disparity, voronoi_mosaic

    model = SpixelNet.load(args.ckpt)[0] if args.ckpt else None
    rng = np.random.default_rng(args.seed)
    size, cell = args.size, args.scale
    if args.images:
        Path(args.images).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.n):
        image, labels = voronoi_mosaic(rng, (size, size))
        disparity = piecewise_constant_disparity(labels, rng)
        if model is None:
            assoc = soft_slic_association(rgb_to_lab(image), cell)
        else:
            assoc = predict_association(model, image, cell)
        e_sp, e_bl, sp, bl = compare_upsamplers(assoc, disparity, labels)
        rows.append((i, e_sp, e_bl))
        if args.images:
            scale = max(float(disparity.max()), 1e-12)
            for tag, arr in (("gt", disparity), ("superpixel", sp), ("bilinear", bl)):
                gray = np.clip(arr / scale, 0.0, 1.0)
                write_image(Path(args.images) / f"{i:03d}_{tag}.ppm", np.repeat(gray[..., None], 3, axis=-1))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["instance", "superpixel_edge_error", "bilinear_edge_error", "superpixel_better"])
        for i, e_sp, e_bl in rows:
            writer.writerow([i, f"{e_sp:.6f}", f"{e_bl:.6f}", int(e_sp < e_bl)])
    wins = sum(e_sp < e_bl for _, e_sp, e_bl in rows)
    print(f"superpixel upsampling better on {wins}/{len(rows)} instances")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, args.coords)
    width = max(len(r.name) for r in results)
    for r in results:
        skipped = f"  skipped_at_kinks={r.n_skipped}" if r.n_skipped else ""
        print(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  coords={r.n_coords}{skipped}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise RuntimeError(f"gradient check failed for {', '.join(failed)}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "slic": cmd_slic,
    "sample-demo": cmd_sample_demo,
    "gradcheck": cmd_gradcheck,
}


def _thread_limit():
    value = os.environ.get("GRIDPIX_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"GRIDPIX_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ValueError(f"GRIDPIX_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _thread_limit()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except Exception as exc:  # noqa: BLE001 - reported as a single error line
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
