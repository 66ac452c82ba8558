"""Command-line pipeline: augment -> train -> eval -> detect -> curve.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
All flags are long-form.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

from . import augment as aug
from . import data as dataio
from . import evaluate as ev
from . import train as tr
from .errors import NumericalDivergenceError, SdnError
from .model import build_network, load_weights, predict_landmarks

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_EPILOG = """\
manifest format (UTF-8, tab separated):
  #n_landmarks=68
  #left_eye=36
  #right_eye=45
  #mirror_perm=16,15,...          optional involution; identity when absent
  sample_id<TAB>image_path<TAB>x,y,w,h<TAB>landmark_source<TAB>tags
    landmark_source: a .pts file path or inline:x,y;x,y;...
    tags:            '-' or key=value;key=value
                     (angle/sx/sy/mirror describe the crop-time warp)

""" + tr._CONFIG_GRAMMAR


def _add_threads_flag(p):
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; compute is currently single-threaded and "
                        "this flag is accepted for interface stability")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdnface",
        description="Train and run a single-network facial landmark localizer.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="derive an augmented manifest")
    p.add_argument("--manifest", required=True, help="source manifest path")
    p.add_argument("--stage", required=True, type=int, choices=(1, 2, 3))
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", help="trained weights (.sdnw); required for "
                                   "stage 3 hard-example mining")
    p.add_argument("--hard-threshold", type=float, default=0.02,
                   help="stage-3 per-image error cutoff")
    _add_threads_flag(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="run one stage or the full 3-stage chain")
    p.add_argument("--config", required=True, help="INI stage config")
    p.add_argument("--stage", type=int, choices=(1, 2, 3),
                   help="train only this stage (default: full chain)")
    p.add_argument("--out", help="directory for checkpoints and logs "
                                 "(overrides checkpoint_dir)")
    p.add_argument("--resume", help="checkpoint to continue from, keeping its "
                                    "iteration counter")
    _add_threads_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics over a test manifest")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for the CSV trio")
    p.add_argument("--timing", action="store_true",
                   help="also measure single-image forward latency")
    _add_threads_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="landmarks for one image + box")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--bbox", required=True, help="x,y,w,h in image pixels")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("curve", help="cumulative error distribution from errors.csv")
    p.add_argument("--errors", required=True, help="errors.csv from `sdnface eval`")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_curve)
    return parser


def cmd_augment(args):
    manifest = dataio.read_manifest(args.manifest)
    if args.stage == 1:
        cfg = aug.AugmentStageConfig.stage1(rng_seed=args.seed)
    elif args.stage == 2:
        cfg = aug.AugmentStageConfig.stage2(rng_seed=args.seed)
    else:
        cfg = aug.AugmentStageConfig.stage3(rng_seed=args.seed,
                                            hard_threshold=args.hard_threshold)
    weights = None
    if args.stage == 3:
        if not args.model:
            print("error: stage 3 mines hard examples and needs --model "
                  "(trained .sdnw weights)", file=sys.stderr)
            return EXIT_USAGE
        weights = load_weights(args.model,
                               expected_landmarks=manifest.n_landmarks)
    out = aug.run_stage(manifest, cfg, weights=weights)
    dataio.write_manifest(args.out, out)
    aug.write_provenance(args.out + ".provenance.tsv", out)
    print(f"{len(manifest.entries)} sources -> {len(out.entries)} derived samples "
          f"({args.out})")
    return EXIT_OK


def cmd_train(args):
    spec, schedules = tr.read_stage_config(args.config)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        schedules = [replace(s, checkpoint_dir=args.out) for s in schedules]
    by_stage = {s.name: s for s in schedules}
    if args.stage is not None:
        name = f"stage{args.stage}"
        if name not in by_stage:
            print(f"error: {args.config} has no [{name}] section", file=sys.stderr)
            return EXIT_USAGE
        schedule = by_stage[name]
        if args.resume:
            weights = load_weights(args.resume,
                                   expected_landmarks=spec.n_landmarks)
        elif schedule.init_from:
            weights = load_weights(schedule.init_from,
                                   expected_landmarks=spec.n_landmarks)
            weights.iteration = 0  # a warm start, not a resume
        else:
            weights = build_network(spec)
        weights, log = tr.train_stage(weights, schedule)
        log_path = os.path.join(schedule.checkpoint_dir, f"{name}_log.csv")
        log.write_csv(log_path)
        final = log.checkpoints[-1][1] if log.checkpoints else "(no checkpoint)"
        print(f"{name}: {len(log.records)} iterations, final checkpoint {final}")
        return EXIT_OK
    if len(schedules) != 3:
        print(f"error: full chain needs [stage1..3]; {args.config} defines "
              f"{sorted(by_stage)} (use --stage N)", file=sys.stderr)
        return EXIT_USAGE
    initial = None
    if args.resume:
        initial = load_weights(args.resume, expected_landmarks=spec.n_landmarks)
    weights, logs = tr.run_three_stage(schedules, spec=spec,
                                       initial_weights=initial)
    for name, log in logs.items():
        log.write_csv(os.path.join(by_stage[name].checkpoint_dir,
                                   f"{name}_log.csv"))
    print(f"chain done: {', '.join(f'{n} ({len(l.records)} iters)' for n, l in logs.items())}")
    return EXIT_OK


def cmd_eval(args):
    manifest = dataio.read_manifest(args.manifest)
    weights = load_weights(args.weights, expected_landmarks=manifest.n_landmarks)
    report = ev.evaluate_manifest(weights, manifest, with_timing=args.timing)
    os.makedirs(args.out, exist_ok=True)
    ev.write_errors_csv(os.path.join(args.out, "errors.csv"),
                        report.sample_ids, report.per_image_errors)
    ev.write_ced_csv(os.path.join(args.out, "ced.csv"), report.ced)
    ev.write_summary_csv(os.path.join(args.out, "summary.csv"), report)
    line = (f"mean NRMSE {report.mean_nrmse:.6f} "
            f"({report.mean_nrmse * 100:.3f}x100), "
            f"failure rate {report.failure_rate:.2f}% "
            f"({report.failure_count}/{report.total_count})")
    if report.timing:
        line += f", forward {report.timing['mean_ms']:.2f} ms"
    print(line)
    return EXIT_OK


def _parse_bbox(text):
    parts = text.split(",")
    if len(parts) != 4:
        raise SdnError(f"--bbox expects x,y,w,h, got {text!r}")
    try:
        return tuple(float(v) for v in parts)
    except ValueError:
        raise SdnError(f"--bbox has non-numeric values: {text!r}")


def cmd_detect(args):
    bbox = _parse_bbox(args.bbox)
    weights = load_weights(args.weights)
    sample = dataio.FaceSample(image_ref=args.image, bbox=bbox)
    crop = dataio.load_gray_crop(sample, bbox, weights.spec.input_side)
    pred_unit = predict_landmarks(weights, crop.pixels)
    pred_img = dataio.to_image_frame(pred_unit, crop.crop_transform)
    for x, y in pred_img.points:
        print(f"{x:.3f} {y:.3f}")
    return EXIT_OK


def cmd_curve(args):
    _, errors = ev.read_errors_csv(args.errors)
    ev.write_ced_csv(args.out, ev.ced_curve(errors))
    print(f"{len(errors)} errors -> {args.out}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NumericalDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SdnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
