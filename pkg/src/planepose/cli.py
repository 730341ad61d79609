"""Command-line entry point: ``planepose <command> --config FILE --seed N ...``.

Exit codes: 0 success, 1 bad input data, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, report
from .errors import ConfigError, NumericError, PlanePoseError
from .geom import GRID_HALF_EXTENT
from .volume import generate_phantom, make_batch, read_slice, read_volume, sample_pose, write_slice, write_volume

log = logging.getLogger("planepose")

EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 1, 2, 3


def _config(args, **overrides) -> harness.TrainConfig:
    return harness.load_config(args.config, seed=args.seed, **overrides)


def cmd_generate_volume(args) -> int:
    cfg = _config(args)
    dims = tuple(args.dims) if args.dims else tuple(cfg.volume_dims)
    vol = generate_phantom(cfg.seed, dims)
    write_volume(args.out, vol)
    print(args.out)
    return 0


def cmd_sample_slices(args) -> int:
    cfg = _config(args)
    vol = read_volume(args.volume) if args.volume else generate_phantom(cfg.seed, tuple(cfg.volume_dims))
    rng = np.random.default_rng(cfg.seed)
    slices = make_batch(vol, args.n, cfg.augment, rng, cfg.resolution, workers=cfg.workers)
    out = Path(args.out)
    for i, s in enumerate(slices):
        write_slice(out, f"slice_{i:04d}", s)
    print(f"{len(slices)} slices written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, method=args.method)
    result = harness.train(cfg, args.out)
    report.training_curves(Path(args.out) / "train_log.csv", Path(args.out) / "training.png")
    print(f"trained {cfg.method} ({result.total_params} parameters) into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    predictors = [harness.load_predictor(c, seed=cfg.seed) for c in args.checkpoint]
    if args.ground_truth:
        summaries = [harness.ground_truth_self_test(cfg, cfg.seed)]
        per_slice = {}
    else:
        summaries, per_slice = harness.evaluate(predictors, cfg, cfg.seed)
    out = Path(args.out)
    paths = harness.write_evaluation(out, summaries, per_slice)
    report.metric_bars(summaries, out / "metrics.png")
    if predictors:
        samples = harness.test_set(cfg, cfg.seed)[: args.gallery]
        vols = harness.volumes_for(cfg, "test")
        images = np.stack([s.data for _, s in samples])
        mu, _ = predictors[0].moments(images)
        res = cfg.metric_resolution
        pairs = [
            (sample_pose(vols[j], s.pose, GRID_HALF_EXTENT, res), sample_pose(vols[j], mu[i], GRID_HALF_EXTENT, res))
            for i, (j, s) in enumerate(samples)
        ]
        report.slice_gallery(pairs, out / "slices.png", [f"#{i}" for i in range(len(pairs))])
    sys.stdout.write(paths["metrics"].read_text(encoding="utf-8"))
    return 0


def cmd_predict(args) -> int:
    predictor = harness.load_predictor(args.checkpoint, seed=args.seed or 0)
    slices = [read_slice(p) for p in args.slices]
    records = harness.predict(predictor, slices)
    text = json.dumps(records, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planepose", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("generate-volume", cmd_generate_volume, "write a phantom volume")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dims", type=int, nargs=3)

    sp = add("sample-slices", cmd_sample_slices, "sample augmented slices with pose sidecars")
    sp.add_argument("--volume", help="volume file; a phantom from --seed if omitted")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--out-dir", "--out", dest="out", required=True)

    sp = add("train", cmd_train, "train one method")
    sp.add_argument("--method", choices=harness.METHODS)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "evaluate checkpoints on the test phantoms")
    sp.add_argument("--checkpoint", nargs="*", default=[])
    sp.add_argument("--ground-truth", action="store_true", help="score ground-truth poses (metric self-test)")
    sp.add_argument("--gallery", type=int, default=6)
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, "predict poses for slice files")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--slices", nargs="*", default=[])
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PlanePoseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
