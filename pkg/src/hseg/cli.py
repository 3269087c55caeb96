"""Command-line surface.

Subcommands: phantom, train-liver, train-detect, segment, detect, eval-seg,
eval-detect, froc. All outputs are written atomically (temp file + rename) and
are reproducible given --seed. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical failure; each failure prints one diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import metrics, postprocess, train
from .errors import DataError, NumericalError, UsageError
from .nets import build_network, forward_volume, restore_network, save_network
from .phantom import PhantomConfig, generate_corpus, load_split
from .preprocess import average_phases, read_grouping
from .volume import BinaryMask, Volume, read_mask, read_volume, write_mask, write_volume

VARIANT_FLAGS = {"dual": "dual", "single-dce": "single6", "single-concat": "single9"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_train_flags(p, defaults):
    p.add_argument("--corpus", required=True, help="phantom corpus directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--iters", type=int, default=defaults.iterations)
    p.add_argument("--batch", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-every", type=int, default=defaults.val_every)
    p.add_argument("--loss-csv", default=None, help="per-iteration loss history CSV")
    p.add_argument("--config", default=None, help="key=value config file (flags win)")


def build_parser() -> _Parser:
    parser = _Parser(prog="hseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=(96, 96, 24),
                   metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, nargs=3, default=(1.543, 1.543, 2.0),
                   metavar=("SX", "SY", "SZ"))
    p.add_argument("--lesions", type=int, nargs=2, default=(2, 5), metavar=("MIN", "MAX"))
    p.add_argument("--lesion-radius", type=float, nargs=2, default=(3.0, 7.0),
                   metavar=("MIN_MM", "MAX_MM"))
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--split", default=None,
                   help="explicit split counts, e.g. train=20,val=0,test=4")

    p = sub.add_parser("train-liver", help="train the liver segmentation net")
    _add_train_flags(p, train.liver_defaults())

    p = sub.add_parser("train-detect", help="train a lesion detection net")
    _add_train_flags(p, train.detect_defaults())
    p.add_argument("--variant", choices=sorted(VARIANT_FLAGS), default="dual")
    p.add_argument("--patch-size", type=int, default=128)

    p = sub.add_parser("segment", help="liver inference + post-processing")
    p.add_argument("--dce", required=True, help="6-channel phase volume or 16-channel series")
    p.add_argument("--grouping", default=None, help="phase grouping sidecar for 16-channel input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-prob", default=None)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("detect", help="full pipeline: liver + lesion detection")
    p.add_argument("--dce", required=True)
    p.add_argument("--dw", required=True)
    p.add_argument("--grouping", default=None)
    p.add_argument("--liver-checkpoint", required=True)
    p.add_argument("--detect-checkpoint", required=True)
    p.add_argument("--out-objects", required=True, help="detected object CSV")
    p.add_argument("--out-prob", default=None)
    p.add_argument("--out-mask", default=None, help="union of detected objects")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("eval-seg", help="DSC / RVD / HD95 for one mask pair")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--case-id", default="case")

    p = sub.add_parser("eval-detect", help="TPR / FPC at one threshold")
    p.add_argument("--prob", required=True, help="foreground probability volume")
    p.add_argument("--liver", required=True, help="liver mask used to constrain detections")
    p.add_argument("--lesions", required=True, help="reference lesion mask")
    p.add_argument("--csv", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--case-id", default="case")

    p = sub.add_parser("froc", help="threshold sweep over a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--detect-checkpoint", required=True)
    p.add_argument("--liver-checkpoint", default=None,
                   help="if given, use predicted liver masks instead of ground truth")
    p.add_argument("--csv", required=True)
    p.add_argument("--svg", default=None)
    p.add_argument("--jobs", type=int, default=1)
    return parser


def _load_phase_volume(path, grouping_path):
    vol = read_volume(path)
    if vol.channels == 6:
        return vol
    if grouping_path is None:
        raise DataError(
            f"{path}: expected 6 channels, got {vol.channels}; pass --grouping to average")
    grouping = read_grouping(grouping_path)
    return average_phases(vol, grouping)


def _train_config(args, defaults, loss):
    cfg = defaults
    if args.config:
        cfg = train.apply_config(cfg, train.parse_config_file(args.config))
    overrides = dict(iterations=args.iters, batch_size=args.batch, lr=args.lr,
                     seed=args.seed, val_every=args.val_every, loss=loss)
    if hasattr(args, "patch_size"):
        overrides["patch_size"] = args.patch_size
    # flags (including their defaults) take precedence over the config file
    return train.apply_config(cfg, {k: str(v) for k, v in overrides.items()})


def cmd_phantom(args) -> int:
    split_counts = None
    if args.split:
        split_counts = {}
        for part in args.split.split(","):
            name, _, count = part.partition("=")
            if not count:
                raise UsageError(f"bad split spec {args.split!r}")
            split_counts[name.strip()] = int(count)
    cfg = PhantomConfig(dims=tuple(args.dims), spacing=tuple(args.spacing),
                        lesion_count=tuple(args.lesions),
                        lesion_radius_mm=tuple(args.lesion_radius),
                        noise_sigma=args.noise)
    rows = generate_corpus(args.out, args.cases, cfg, seed=args.seed,
                           split_counts=split_counts)
    print(f"wrote {len(rows)} cases to {args.out}")
    return 0


def cmd_train_liver(args) -> int:
    cfg = _train_config(args, train.liver_defaults(), loss="dice")
    train_cases = train.prepare_liver_cases(load_split(args.corpus, "train"))
    val_cases = train.prepare_liver_cases(load_split(args.corpus, "val")) or None
    net, adam, history = train.train_liver(train_cases, cfg, val_cases)
    save_network(args.out, net, trained_steps=cfg.iterations, adam=adam)
    if args.loss_csv:
        history.write_csv(args.loss_csv)
    print(f"trained liver net: final loss {history.train_loss[-1]:.4f} -> {args.out}")
    return 0


def cmd_train_detect(args) -> int:
    cfg = _train_config(args, train.detect_defaults(), loss="wce")
    variant = VARIANT_FLAGS[args.variant]
    train_cases = train.prepare_detect_cases(load_split(args.corpus, "train"), variant)
    val_cases = train.prepare_detect_cases(load_split(args.corpus, "val"), variant) or None
    net, adam, history, weights = train.train_detect(train_cases, cfg, variant, val_cases)
    save_network(args.out, net, trained_steps=cfg.iterations, adam=adam)
    if args.loss_csv:
        history.write_csv(args.loss_csv)
    print(f"trained {variant} net (class weights {weights[0]:.3f}/{weights[1]:.3f}): "
          f"final loss {history.train_loss[-1]:.4f} -> {args.out}")
    return 0


def cmd_segment(args) -> int:
    dce = _load_phase_volume(args.dce, args.grouping)
    net, steps, _ = restore_network(args.checkpoint)
    if net.spec.name != "liver":
        raise DataError(f"{args.checkpoint} holds a {net.spec.name!r} net, not a liver net")
    prob = forward_volume(net, train.liver_input_volume(dce))
    if args.out_prob:
        write_volume(args.out_prob, prob)
    mask = postprocess.postprocess_liver(prob, t=args.threshold)
    write_mask(args.out_mask, mask)
    print(f"liver mask: {mask.count()} voxels -> {args.out_mask}")
    return 0


def cmd_detect(args) -> int:
    dce = _load_phase_volume(args.dce, args.grouping)
    dw = read_volume(args.dw)
    liver_net, _, _ = restore_network(args.liver_checkpoint)
    detect_net, _, _ = restore_network(args.detect_checkpoint)
    if liver_net.spec.name != "liver":
        raise DataError(f"{args.liver_checkpoint} does not hold a liver net")
    variant = detect_net.spec.name
    if variant not in train.DETECT_VARIANTS:
        raise DataError(f"{args.detect_checkpoint} does not hold a detection net")

    liver_prob = forward_volume(liver_net, train.liver_input_volume(dce))
    liver_mask = postprocess.postprocess_liver(liver_prob)
    detect_in = train.detect_input_volume(dce, dw, variant)
    prob = forward_volume(detect_net, detect_in)
    objects = postprocess.postprocess_detect(prob, liver_mask, t=args.threshold)

    postprocess.write_objects_csv(args.out_objects, objects)
    if args.out_prob:
        write_volume(args.out_prob, prob)
    if args.out_mask:
        union = np.zeros(np.prod(liver_mask.data.shape), dtype=np.uint8)
        for obj in objects:
            union[obj.indices] = 1
        write_mask(args.out_mask, BinaryMask(dims=prob.dims, spacing=prob.spacing,
                                             data=union.reshape(liver_mask.data.shape)))
    print(f"detected {len(objects)} objects -> {args.out_objects}")
    return 0


def cmd_eval_seg(args) -> int:
    pred = read_mask(args.pred)
    ref = read_mask(args.ref)
    report = metrics.evaluate_segmentation(args.case_id, pred, ref)
    metrics.write_seg_reports_csv(args.csv, [report])
    print(f"{args.case_id}: dsc={report.dsc:.4f} rvd={report.rvd_percent:.2f}% "
          f"hd95={report.hd95_mm:.2f}mm")
    return 0


def cmd_eval_detect(args) -> int:
    prob = read_volume(args.prob)
    liver = read_mask(args.liver)
    lesions = read_mask(args.lesions)
    truth = postprocess.label_objects_26(lesions)
    pred = postprocess.postprocess_detect(prob, liver, t=args.threshold)
    tpr, fp, _ = metrics.detection_match(pred, truth)
    row = metrics.CaseDetectionResult(case_id=args.case_id, threshold=args.threshold,
                                      tpr=tpr, fp_count=fp, n_truth=len(truth))
    metrics.write_detection_csv(args.csv, [row])
    print(f"{args.case_id}: tpr={tpr:.3f} fp={fp} (n={len(truth)})")
    return 0


def cmd_froc(args) -> int:
    cases = load_split(args.corpus, args.split)
    if not cases:
        raise DataError(f"no cases in split {args.split!r} under {args.corpus}")
    detect_net, _, _ = restore_network(args.detect_checkpoint)
    variant = detect_net.spec.name
    liver_net = None
    if args.liver_checkpoint:
        liver_net, _, _ = restore_network(args.liver_checkpoint)

    probs, truths, livers = [], [], []
    for case in cases:
        detect_in = train.detect_input_volume(case.dce, case.dw, variant)
        probs.append(forward_volume(detect_net, detect_in))
        truths.append(case.lesions)
        if liver_net is None:
            livers.append(case.liver)
        else:
            liver_prob = forward_volume(liver_net, train.liver_input_volume(case.dce))
            livers.append(postprocess.postprocess_liver(liver_prob))
    curve = metrics.froc(probs, truths, livers, jobs=args.jobs)
    metrics.write_froc_csv(args.csv, curve)
    if args.svg:
        metrics.write_froc_svg(args.svg, {variant: curve})
    mid = next(p for p in curve.points if abs(p.threshold - 0.5) < 1e-9)
    print(f"froc over {len(cases)} cases: tpr@0.5={mid.mean_tpr:.3f} "
          f"median fpc@0.5={mid.median_fpc:.1f} -> {args.csv}")
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "train-liver": cmd_train_liver,
    "train-detect": cmd_train_detect,
    "segment": cmd_segment,
    "detect": cmd_detect,
    "eval-seg": cmd_eval_seg,
    "eval-detect": cmd_eval_detect,
    "froc": cmd_froc,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
