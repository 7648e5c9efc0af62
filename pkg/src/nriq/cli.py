"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import frmetrics, harness, highlevel, imaging, lowlevel, nnet

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def load_corpus(spec: str):
    """A directory of images or a text file with one image path per line."""
    if os.path.isdir(spec):
        names = sorted(
            n for n in os.listdir(spec)
            if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))
        )
        paths = [os.path.join(spec, n) for n in names]
    else:
        base = os.path.dirname(os.path.abspath(spec))
        with open(spec, encoding="utf-8") as f:
            paths = [
                ln.strip() if os.path.isabs(ln.strip()) else os.path.join(base, ln.strip())
                for ln in f
                if ln.strip() and not ln.startswith("#")
            ]
    if not paths:
        raise harness.DataError(f"no images found in corpus {spec!r}")
    return paths, [imaging.load_image(p) for p in paths]


def _load_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _encoder_config(cfg_section, seed):
    kwargs = dict(cfg_section.get("encoder", {}))
    kwargs.setdefault("seed", seed)
    if "conv_blocks" in kwargs:
        kwargs["conv_blocks"] = tuple(tuple(b) for b in kwargs["conv_blocks"])
    return nnet.EncoderConfig(**kwargs)


def _map_images(fn, images, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, images))
    return [fn(img) for img in images]


def cmd_distort(args):
    img = imaging.load_image(args.input)
    spec = imaging.DistortionSpec(args.kind, args.level)
    imaging.save_image(args.output, imaging.distort(img, spec, args.seed))


def cmd_simcheck(args):
    a = imaging.to_luma(imaging.load_image(args.ref))
    b = imaging.to_luma(imaging.load_image(args.test))
    measure = frmetrics.as_measure(args.measure)
    sel = measure.selector
    if sel == "none":
        raw = 0.0
    elif sel == "ssim":
        raw = frmetrics.ssim(a, b)
    elif sel == "ms_ssim":
        raw = frmetrics.ms_ssim(a, b)
    elif sel == "gmsd":
        raw = frmetrics.gmsd(a, b)
    else:
        raw = frmetrics.fsim(a, b)
    weight = frmetrics.similarity_weight(a, b, measure)
    print(f"measure={sel} raw={_fmt(raw)} weight={_fmt(weight)}")


def cmd_train_low(args):
    cfg_file = _load_config(args.config)
    section = cfg_file.get("train_low", {})
    _, images = load_corpus(args.corpus)
    cfg = lowlevel.QACLConfig(
        measure=args.measure,
        epochs=args.epochs,
        batch_scenes=section.get("batch_scenes", args.batch_scenes),
        tau1=section.get("tau1", 0.5),
        lr=section.get("lr", 1e-4),
        weight_decay=section.get("weight_decay", 0.05),
        seed=args.seed,
        encoder=_encoder_config(section, args.seed),
    )
    params = lowlevel.train_lowlevel(images, cfg)
    nnet.save_params(args.out, params)
    print(f"wrote encoder params to {args.out}")


def cmd_pristine_stats(args):
    params = nnet.load_params(args.params)
    _, images = load_corpus(args.pristine)
    stats = lowlevel.compute_pristine_stats(params, images, patch_side=args.patch)
    lowlevel.save_stats(args.out, stats)
    print(f"wrote pristine stats ({stats.count} patches of {args.patch}px) to {args.out}")


def cmd_train_high(args):
    cfg_file = _load_config(args.config)
    section = cfg_file.get("train_high", {})
    _, images = load_corpus(args.corpus)
    cfg = highlevel.GCLConfig(
        batch=args.batch,
        k=args.k,
        epochs=args.epochs,
        tau2=section.get("tau2", 0.1),
        k2=section.get("k2", highlevel.DEFAULT_K2),
        lr=section.get("lr", 1e-5),
        seed=args.seed,
        encoder=_encoder_config(section, args.seed),
    )
    init = nnet.load_params(args.init) if args.init else nnet.init_encoder(cfg.encoder)
    if args.anchors:
        anchors = highlevel.load_anchors(args.anchors)
    else:
        if not (args.bootstrap_good and args.bootstrap_bad):
            raise UsageError("provide --anchors or both --bootstrap-good and --bootstrap-bad")
        _, good = load_corpus(args.bootstrap_good)
        _, bad = load_corpus(args.bootstrap_bad)
        anchors = highlevel.bootstrap_anchors(init, good, bad)
    params = highlevel.train_highlevel(images, anchors, cfg, init_params=init)
    nnet.save_params(args.out, params)
    if args.anchors_out:
        highlevel.save_anchors(args.anchors_out, anchors)
    print(f"wrote encoder params to {args.out}")


def cmd_features(args):
    low = nnet.load_params(args.low)
    high = nnet.load_params(args.high)
    manifest = harness.read_manifest(args.manifest)
    images = [imaging.load_image(harness.resolve_path(manifest, e)) for e in manifest.entries]
    feats = _map_images(lambda im: harness.extract_features(low, high, im), images, args.workers)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("path,mos," + ",".join(f"f{i}" for i in range(len(feats[0]))) + "\n")
        for entry, feat in zip(manifest.entries, feats):
            f.write(entry.path + "," + _fmt(entry.mos) + "," + ",".join(_fmt(v) for v in feat) + "\n")
    print(f"wrote {len(feats)} feature rows to {args.out}")


def read_feature_table(path):
    import csv as _csv

    with open(path, newline="", encoding="utf-8") as f:
        rows = list(_csv.reader(f))
    if not rows or rows[0][:2] != ["path", "mos"]:
        raise harness.DataError(f"{path}: expected a features CSV with `path,mos,f0,...` header")
    paths = [r[0] for r in rows[1:]]
    mos = np.array([float(r[1]) for r in rows[1:]])
    feats = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    return paths, mos, feats


def cmd_fit(args):
    _, mos, feats = read_feature_table(args.features)
    cfg = harness.FitConfig(kind=args.kind, ridge_lambda=args.ridge_lambda)
    model = harness.fit_regressor(feats, mos, cfg)
    blob = {
        "kind": model.kind,
        "weights": [_fmt(v) for v in model.weights],
        "bias": _fmt(model.bias),
        "feat_mean": [_fmt(v) for v in model.feat_mean],
        "feat_scale": [_fmt(v) for v in model.feat_scale],
        "constant": None if model.constant is None else _fmt(model.constant),
    }
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(blob, f, indent=1)
        f.write("\n")
    print(f"wrote {model.kind} model to {args.out}")


def load_model(path):
    with open(path, encoding="utf-8") as f:
        blob = json.load(f)
    return harness.RegressorModel(
        kind=blob["kind"],
        weights=np.array([float(v) for v in blob["weights"]]),
        bias=float(blob["bias"]),
        feat_mean=np.array([float(v) for v in blob["feat_mean"]]),
        feat_scale=np.array([float(v) for v in blob["feat_scale"]]),
        constant=None if blob["constant"] is None else float(blob["constant"]),
    )


def cmd_eval(args):
    _, mos, feats = read_feature_table(args.features)
    budgets = tuple(int(b) for b in args.budgets.split(","))
    cfg = harness.FitConfig(kind=args.kind, ridge_lambda=args.ridge_lambda)
    report = harness.run_protocol(
        feats, mos, budgets=budgets, n_splits=args.splits, seed=args.seed, fit_cfg=cfg
    )
    print(f"protocol: {args.splits} splits, seed {args.seed}, regressor {args.kind}")
    for b in budgets:
        print(
            f"budget {b:>4}: median SRCC {report.median_srcc[b]:+.4f}  "
            f"median PLCC {report.median_plcc[b]:+.4f}"
        )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("budget,split,srcc,plcc,median_srcc,median_plcc\n")
            for b in budgets:
                for s, (sr, pl) in enumerate(report.per_split[b]):
                    f.write(
                        f"{b},{s},{_fmt(sr)},{_fmt(pl)},"
                        f"{_fmt(report.median_srcc[b])},{_fmt(report.median_plcc[b])}\n"
                    )


def cmd_score_zs(args):
    low = nnet.load_params(args.low)
    high = nnet.load_params(args.high)
    stats = lowlevel.load_stats(args.stats)
    anchors = highlevel.load_anchors(args.anchors)
    manifest = harness.read_manifest(args.manifest)
    images = [imaging.load_image(harness.resolve_path(manifest, e)) for e in manifest.entries]
    scores = harness.score_zero_shot(images, low, stats, high, anchors)
    mos = np.array([e.mos for e in manifest.entries])
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("path,score,mos\n")
        for entry, sc in zip(manifest.entries, scores):
            f.write(f"{entry.path},{_fmt(sc)},{_fmt(entry.mos)}\n")
    rho = harness.srcc(scores, mos)
    print(f"zero-shot SRCC vs MOS: {rho:+.4f} over {len(scores)} images")


class UsageError(ValueError):
    pass


def build_parser():
    parser = argparse.ArgumentParser(prog="nriq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("distort", help="apply one synthetic distortion")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--kind", required=True, choices=imaging.DISTORTION_KINDS)
    p.add_argument("--level", required=True, type=int, choices=imaging.DISTORTION_LEVELS)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_distort)

    p = sub.add_parser("simcheck", help="full-reference similarity for an image pair")
    common(p)
    p.add_argument("--measure", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(fn=cmd_simcheck)

    p = sub.add_parser("train-low", help="train the low-level encoder")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--measure", default="fsim")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-scenes", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_low)

    p = sub.add_parser("pristine-stats", help="fit pristine patch-feature statistics")
    common(p)
    p.add_argument("--params", required=True)
    p.add_argument("--pristine", required=True)
    p.add_argument("--patch", type=int, default=lowlevel.DEFAULT_PATCH_SIDE)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pristine_stats)

    p = sub.add_parser("train-high", help="train the high-level encoder")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--anchors", default=None)
    p.add_argument("--bootstrap-good", default=None)
    p.add_argument("--bootstrap-bad", default=None)
    p.add_argument("--init", default=None, help="initial encoder params file")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--anchors-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_high)

    p = sub.add_parser("features", help="extract concatenated features for a manifest")
    common(p)
    p.add_argument("--low", required=True)
    p.add_argument("--high", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("fit", help="fit a regression head on a feature table")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--kind", default="ridge", choices=("ridge", "svr"))
    p.add_argument("--ridge-lambda", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("eval", help="run the data-efficient split protocol")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--budgets", default="50,100,200")
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--kind", default="ridge", choices=("ridge", "svr"))
    p.add_argument("--ridge-lambda", type=float, default=1.0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("score-zs", help="zero-shot scoring of a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--low", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--high", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_score_zs)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        harness.DataError,
        imaging.ImagingError,
        frmetrics.MetricError,
        highlevel.GroupError,
        nnet.ParamsFileError,
        FileNotFoundError,
        json.JSONDecodeError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (lowlevel.LossError, nnet.EncoderError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
