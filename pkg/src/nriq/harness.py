"""Feature assembly, regression heads, correlation metrics, and the eval protocol."""

from __future__ import annotations

import csv
import math
import os
import statistics
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import highlevel, imaging, lowlevel, nnet

DEFAULT_BUDGETS = (50, 100, 200)
DEFAULT_SPLITS = 10
TEST_FRACTION = 0.2


class DataError(ValueError):
    pass


@dataclass
class ManifestEntry:
    path: str
    mos: float
    tag: str | None = None


@dataclass
class DatasetManifest:
    name: str
    entries: list
    base_dir: str = "."


def read_manifest(path, name=None) -> DatasetManifest:
    """CSV with header `path,mos[,tag]`; relative paths resolve against the file."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "path" not in reader.fieldnames or "mos" not in reader.fieldnames:
            raise DataError(f"{path}: manifest needs a `path,mos[,tag]` header")
        for row in reader:
            p = row["path"]
            if p in seen:
                raise DataError(f"{path}: duplicate entry {p!r}")
            seen.add(p)
            try:
                mos = float(row["mos"])
            except ValueError as exc:
                raise DataError(f"{path}: bad MOS for {p!r}: {row['mos']!r}") from exc
            if not math.isfinite(mos):
                raise DataError(f"{path}: non-finite MOS for {p!r}")
            entries.append(ManifestEntry(path=p, mos=mos, tag=row.get("tag") or None))
    return DatasetManifest(name=name or os.path.basename(path), entries=entries, base_dir=base)


def resolve_path(manifest: DatasetManifest, entry: ManifestEntry) -> str:
    if os.path.isabs(entry.path):
        return entry.path
    return os.path.join(manifest.base_dir, entry.path)


def extract_features(low_params: nnet.EncoderParams, high_params: nnet.EncoderParams, img,
                     patch_side: int = lowlevel.DEFAULT_PATCH_SIDE) -> np.ndarray:
    """Concatenate the mean low-level patch feature with the high-level crop feature."""
    img = imaging.validate_image(img)
    patches = imaging.extract_patches(img, patch_side)
    low = np.mean([nnet.forward(low_params, p).backbone for p in patches], axis=0)
    high = nnet.forward(high_params, imaging.center_crop(img, highlevel.CROP_SIDE)).backbone
    return np.concatenate([low, high])


@dataclass
class FitConfig:
    kind: str = "ridge"  # or "svr"
    ridge_lambda: float = 1.0
    svr_c: float = 1.0
    svr_eps_scale: float = 0.1  # epsilon = scale * std(MOS)
    svr_iters: int = 2000
    svr_lr: float = 0.05

    def __post_init__(self):
        if self.kind not in ("ridge", "svr"):
            raise DataError(f"unknown regressor kind {self.kind!r}")


@dataclass
class RegressorModel:
    kind: str
    weights: np.ndarray
    bias: float
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    constant: float | None = None  # set when training MOS was degenerate


def _standardize_fit(x):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    return mean, scale


def ridge_solve(xs, yc, lam):
    """Closed-form ridge on standardized features; Gram normalized by n so the
    solution is invariant to duplicating every sample."""
    n, p = xs.shape
    a = xs.T @ xs / n + lam * np.eye(p)
    return np.linalg.solve(a, xs.T @ yc / n)


def _svr_solve(xs, yc, cfg):
    """Linear epsilon-insensitive regression by deterministic full-batch subgradient."""
    n, p = xs.shape
    eps = cfg.svr_eps_scale * float(np.std(yc))
    w = np.zeros(p)
    b = 0.0
    for t in range(cfg.svr_iters):
        lr = cfg.svr_lr / (1.0 + 0.01 * t)
        resid = xs @ w + b - yc
        sg = np.where(resid > eps, 1.0, np.where(resid < -eps, -1.0, 0.0))
        gw = w / (cfg.svr_c * n) + xs.T @ sg / n
        gb = float(np.mean(sg))
        w -= lr * gw
        b -= lr * gb
    return w, b


def fit_regressor(features, mos, cfg: FitConfig | None = None) -> RegressorModel:
    cfg = cfg or FitConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(mos, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DataError("features must be (n, p) with one MOS per row")
    if x.shape[0] < 2:
        raise DataError("need at least 2 training samples")
    mean, scale = _standardize_fit(x)
    xs = (x - mean) / scale
    if float(np.ptp(y)) < 1e-12:
        return RegressorModel(
            kind=cfg.kind, weights=np.zeros(x.shape[1]), bias=float(y[0]),
            feat_mean=mean, feat_scale=scale, constant=float(y[0]),
        )
    y_mean = float(y.mean())
    yc = y - y_mean
    if cfg.kind == "ridge":
        w = ridge_solve(xs, yc, cfg.ridge_lambda)
        b = y_mean
    else:
        w, b0 = _svr_solve(xs, yc, cfg)
        b = y_mean + b0
    return RegressorModel(kind=cfg.kind, weights=w, bias=b, feat_mean=mean, feat_scale=scale)


def predict_de(model: RegressorModel, feature) -> float:
    """Data-efficient score: standardize then apply the affine head."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape != model.weights.shape:
        raise DataError(f"feature length {f.shape} != model {model.weights.shape}")
    if model.constant is not None:
        return model.constant
    return float((f - model.feat_mean) / model.feat_scale @ model.weights + model.bias)


def predict_zs(q_h: float, q_l: float) -> float:
    """Zero-shot score: sum of the two pathway qualities, in (0, 1.5)."""
    if not (0.0 < q_h < 1.0):
        raise DataError(f"q_h must be in (0, 1), got {q_h}")
    if not (0.0 < q_l <= 0.5):
        raise DataError(f"q_l must be in (0, 0.5], got {q_l}")
    return q_h + q_l


def _check_corr_inputs(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise DataError("correlation needs two equal-length vectors of >= 2 values")
    if float(np.ptp(a)) < 1e-300 or float(np.ptp(b)) < 1e-300:
        raise DataError("correlation undefined for constant input")
    return a, b


def plcc(a, b) -> float:
    """Pearson correlation, two-pass formulation."""
    a, b = _check_corr_inputs(a, b)
    ac = a - a.mean()
    bc = b - b.mean()
    denom = math.sqrt(float(ac @ ac) * float(bc @ bc))
    if denom == 0.0:
        raise DataError("correlation undefined for constant input")
    return float(np.clip(ac @ bc / denom, -1.0, 1.0))


def srcc(a, b) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    a, b = _check_corr_inputs(a, b)
    return plcc(rankdata(a), rankdata(b))


@dataclass
class EvalReport:
    budgets: tuple
    n_splits: int
    seed: int
    per_split: dict = field(default_factory=dict)  # budget -> list of (srcc, plcc)
    median_srcc: dict = field(default_factory=dict)
    median_plcc: dict = field(default_factory=dict)


def run_protocol(features, mos, budgets=DEFAULT_BUDGETS, n_splits=DEFAULT_SPLITS,
                 seed=0, fit_cfg: FitConfig | None = None) -> EvalReport:
    """80/20 splits, budgeted label sampling, median SRCC/PLCC over splits."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(mos, dtype=np.float64)
    n = x.shape[0]
    budgets = tuple(int(b) for b in budgets)
    n_test = int(round(TEST_FRACTION * n))
    n_pool = n - n_test
    if n_test < 2:
        raise DataError(f"dataset of {n} too small for a 20% test split")
    for b in budgets:
        if b > n_pool:
            raise DataError(f"label budget {b} exceeds the 80% training pool ({n_pool})")
    report = EvalReport(budgets=budgets, n_splits=n_splits, seed=seed,
                        per_split={b: [] for b in budgets})
    for split in range(n_splits):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, split]))
        perm = rng.permutation(n)
        test_idx = perm[:n_test]
        pool_idx = perm[n_test:]
        for b in budgets:
            train_idx = pool_idx[:b]
            model = fit_regressor(x[train_idx], y[train_idx], fit_cfg)
            preds = np.array([predict_de(model, f) for f in x[test_idx]])
            report.per_split[b].append((srcc(preds, y[test_idx]), plcc(preds, y[test_idx])))
    for b in budgets:
        report.median_srcc[b] = statistics.median(v[0] for v in report.per_split[b])
        report.median_plcc[b] = statistics.median(v[1] for v in report.per_split[b])
    return report


def score_zero_shot(images, low_params, stats: lowlevel.PristineStats,
                    high_params, anchors: highlevel.AnchorPair,
                    k1: float = lowlevel.DEFAULT_K1, k2: float = highlevel.DEFAULT_K2):
    """Per-image zero-shot scores: Q_L from the pristine-Gaussian distance plus
    Q_H from the anchor margin."""
    scores = []
    for img in images:
        d = lowlevel.lowlevel_distance(low_params, stats, img)
        ql = max(lowlevel.q_low(d, k1), 1e-12)
        z = nnet.forward(high_params, imaging.center_crop(img, highlevel.CROP_SIDE)).projected
        qh = q_high_checked(z, anchors, k2)
        scores.append(predict_zs(qh, ql))
    return np.asarray(scores)


def q_high_checked(z, anchors, k2):
    q = highlevel.q_high(z, anchors, k2)
    # Guard the open-interval contract of predict_zs against sigmoid saturation.
    return min(max(q, 1e-12), 1.0 - 1e-12)
