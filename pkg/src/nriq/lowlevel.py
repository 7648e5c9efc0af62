"""Quality-aware contrastive training and the zero-shot low-level predictor.

The loss contrasts distorted versions of one scene, weighting each pair by a
full-reference perceptual similarity so equal-quality pairs act as positives
regardless of distortion type. The zero-shot side fits a Gaussian to pristine
patch features and scores test images by a symmetrized Mahalanobis distance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import imaging, nnet
from .frmetrics import SimilarityMeasure, as_measure

STATS_MAGIC = b"NRIQSTA1"
# Kept tiny so well-conditioned covariances stay exact to well under 1e-9
# while rank-deficient ones remain solvable.
COV_REG_EPS = 1e-10
DEFAULT_K1 = 0.01
DEFAULT_PATCH_SIDE = 96


class LossError(ValueError):
    pass


@dataclass
class QACLConfig:
    tau1: float = 0.5
    batch_scenes: int = 8
    measure: SimilarityMeasure = field(default_factory=SimilarityMeasure)
    epochs: int = 15
    lr: float = 1e-4
    weight_decay: float = 0.05
    grid_n: int = 7
    minipatch: int = 32
    seed: int = 0
    encoder: nnet.EncoderConfig = field(default_factory=nnet.EncoderConfig)

    def __post_init__(self):
        if self.tau1 <= 0:
            raise LossError("tau1 must be positive")
        if self.batch_scenes < 1:
            raise LossError("batch_scenes must be >= 1")
        self.measure = as_measure(self.measure)


def _check_unit(z, what):
    norms = np.linalg.norm(z, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-4):
        raise LossError(f"{what} must be unit-norm (max |norm-1| = {np.abs(norms - 1).max():.2e})")


def qacl_loss(anchors: np.ndarray, positives: np.ndarray, weights: np.ndarray, tau1: float):
    """Quality-aware contrastive loss over a batch of scenes.

    anchors, positives: (N_b, D, P) unit embeddings; positives[i, j] is the
    second-fragment augmentation of anchors[i, j]. weights: (N_b, D, D)
    pairwise similarity weights in [0, 1]. Pairs never cross scenes.

    Returns (loss, grad_anchors, grad_positives).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if anchors.ndim != 3 or anchors.shape != positives.shape:
        raise LossError("anchors and positives must both be (N_b, D, P)")
    nb, d, _p = anchors.shape
    if weights.shape != (nb, d, d):
        raise LossError(f"weights must be (N_b, D, D), got {weights.shape}")
    if weights.min() < -1e-9 or weights.max() > 1 + 1e-9:
        raise LossError("similarity weights must lie in [0, 1]")
    _check_unit(anchors, "anchor embeddings")
    _check_unit(positives, "positive embeddings")

    loss = 0.0
    ga = np.zeros_like(anchors)
    gp = np.zeros_like(positives)
    for i in range(nb):
        z = anchors[i]  # (D, P)
        zp = positives[i]
        s = weights[i]
        sim = z @ z.T  # (D, D)
        p_pair = np.exp(sim / tau1)
        p_pos = np.exp(np.sum(z * zp, axis=1) / tau1)  # (D,)
        off = ~np.eye(d, dtype=bool)
        for j in range(d):
            others = off[j]
            num = p_pos[j] + float(s[j, others] @ p_pair[j, others])
            den = p_pos[j] + float(np.sum(p_pair[j, others]))
            loss += -math.log(num / den)
            # d(-log(num/den)) w.r.t. each exponential term, then chain to z.
            dnum = -1.0 / num
            dden = 1.0 / den
            coef_pos = (dnum + dden) * p_pos[j]
            ga[i, j] += coef_pos * zp[j] / tau1
            gp[i, j] += coef_pos * z[j] / tau1
            coef_pair = (dnum * s[j] + dden) * p_pair[j] / tau1  # (D,)
            coef_pair = np.where(others, coef_pair, 0.0)
            ga[i, j] += coef_pair @ z
            ga[i] += np.outer(coef_pair, z[j])
    return loss, ga, gp


def infonce_loss(anchors, positives, tau):
    """Standard single-positive InfoNCE over each scene's versions (s = 0 case)."""
    nb, d, _ = anchors.shape
    loss = 0.0
    for i in range(nb):
        z = anchors[i]
        zp = positives[i]
        p_pair = np.exp(z @ z.T / tau)
        p_pos = np.exp(np.sum(z * zp, axis=1) / tau)
        off = ~np.eye(d, dtype=bool)
        for j in range(d):
            den = p_pos[j] + float(np.sum(p_pair[j, off[j]]))
            loss += -math.log(p_pos[j] / den)
    return loss


def _stream_seed(base_seed, *tags):
    return np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF] + [int(t) & 0xFFFFFFFF for t in tags])


def build_distorted_sets(corpus, measure, seed):
    sets = []
    for idx, img in enumerate(corpus):
        child = _stream_seed(seed, 0xD15, idx).generate_state(1)[0]
        sets.append(imaging.make_distorted_set(img, measure=measure, seed=int(child)))
    return sets


def train_lowlevel(corpus, cfg: QACLConfig, on_step=None) -> nnet.EncoderParams:
    """Train the low-level encoder with the quality-aware contrastive loss.

    Distorted sets and their pairwise weights are built once and reused across
    epochs. Deterministic given cfg.seed. `on_step(step, loss, anchors,
    positives, weights)` is an optional instrumentation hook.
    """
    if not corpus:
        raise LossError("empty training corpus")
    params = nnet.init_encoder(cfg.encoder)
    if cfg.epochs == 0:
        return params
    sets = build_distorted_sets(corpus, cfg.measure, cfg.seed)
    n = len(sets)
    steps_per_epoch = (n + cfg.batch_scenes - 1) // cfg.batch_scenes
    state = nnet.OptimizerState(
        lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=steps_per_epoch * cfg.epochs
    )
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(_stream_seed(cfg.seed, 0x5F, epoch)).permutation(n)
        for b0 in range(0, n, cfg.batch_scenes):
            scene_ids = order[b0 : b0 + cfg.batch_scenes]
            anchors, positives, inputs = [], [], []
            for si in scene_ids:
                dset = sets[si]
                za, zp, ia, ip = [], [], [], []
                for j, version in enumerate(dset.versions):
                    img = imaging.prepare_for_fragment(version, cfg.grid_n, cfg.minipatch)
                    sa = _stream_seed(cfg.seed, 0xF1, epoch, si, j, 0).generate_state(1)[0]
                    sp = _stream_seed(cfg.seed, 0xF1, epoch, si, j, 1).generate_state(1)[0]
                    fa = imaging.fragment(
                        img, imaging.make_fragment_plan(img.shape, int(sa), cfg.grid_n, cfg.minipatch)
                    )
                    fp = imaging.fragment(
                        img, imaging.make_fragment_plan(img.shape, int(sp), cfg.grid_n, cfg.minipatch)
                    )
                    za.append(nnet.forward(params, fa).projected)
                    zp.append(nnet.forward(params, fp).projected)
                    ia.append(fa)
                    ip.append(fp)
                anchors.append(za)
                positives.append(zp)
                inputs.append((ia, ip))
            anchors = np.asarray(anchors)
            positives = np.asarray(positives)
            weights = np.asarray([sets[si].weights for si in scene_ids])
            loss, ga, gp = qacl_loss(anchors, positives, weights, cfg.tau1)
            if not np.isfinite(loss):
                raise LossError(f"non-finite loss at epoch {epoch}, step {step}")
            if on_step is not None:
                on_step(step, loss, anchors, positives, weights)
            grads = nnet.zeros_like_params(params)
            for bi, (ia, ip) in enumerate(inputs):
                for j in range(len(ia)):
                    for img_in, up in ((ia[j], ga[bi, j]), (ip[j], gp[bi, j])):
                        if not np.any(up):
                            continue
                        g = nnet.backward(params, img_in, up)
                        for name in grads:
                            grads[name] += g[name]
            params, state = nnet.optimizer_step(params, grads, state)
            step += 1
    return params


@dataclass
class PristineStats:
    """Gaussian fit (mean, covariance) of backbone features over pristine patches."""

    mu: np.ndarray
    sigma: np.ndarray
    patch_side: int
    count: int


def _patch_features(params, img, side):
    patches = imaging.extract_patches(img, side)
    return np.asarray([nnet.forward(params, p).backbone for p in patches])


def compute_pristine_stats(
    params: nnet.EncoderParams, pristine, patch_side: int = DEFAULT_PATCH_SIDE
) -> PristineStats:
    """Embed every non-overlapping patch of the pristine corpus and fit (mu, Sigma)."""
    feats = []
    for img in pristine:
        feats.append(_patch_features(params, img, patch_side))
    feats = np.concatenate(feats, axis=0)
    b = params.config.backbone_dim
    if feats.shape[0] < b + 1:
        raise LossError(
            f"need at least backbone_dim+1 = {b + 1} patches for full-rank covariance, got {feats.shape[0]}"
        )
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / feats.shape[0]
    return PristineStats(mu=mu, sigma=sigma, patch_side=patch_side, count=feats.shape[0])


def mahalanobis_gap(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """Symmetrized Gaussian distance with trace-scaled ridge regularization."""
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    b = mu_a.shape[0]
    avg = 0.5 * (np.asarray(sigma_a, dtype=np.float64) + np.asarray(sigma_b, dtype=np.float64))
    avg = avg + (COV_REG_EPS * np.trace(avg) / b + 1e-12) * np.eye(b)
    diff = mu_a - mu_b
    try:
        sol = np.linalg.solve(avg, diff)
    except np.linalg.LinAlgError as exc:
        raise LossError(f"singular covariance after regularization: {exc}") from exc
    return float(np.sqrt(max(float(diff @ sol), 0.0)))


def lowlevel_distance(params: nnet.EncoderParams, stats: PristineStats, img) -> float:
    """Distance of a test image's patch-feature Gaussian from the pristine one."""
    feats = _patch_features(params, img, stats.patch_side)
    mu_d = feats.mean(axis=0)
    centered = feats - mu_d
    sigma_d = centered.T @ centered / feats.shape[0]
    return mahalanobis_gap(stats.mu, stats.sigma, mu_d, sigma_d)


def q_low(d: float, k1: float = DEFAULT_K1) -> float:
    """Map a nonnegative distance into (0, 0.5], strictly decreasing."""
    if d < 0:
        raise LossError("distance must be nonnegative")
    if k1 <= 0:
        raise LossError("k1 must be positive")
    # Guard exp overflow for huge distances; the sigmoid saturates to 0.
    x = k1 * d
    if x > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(x))


def save_stats(path, stats: PristineStats) -> None:
    with open(path, "wb") as f:
        f.write(STATS_MAGIC)
        f.write(struct.pack("<III", stats.mu.shape[0], stats.patch_side, stats.count))
        f.write(np.ascontiguousarray(stats.mu, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(stats.sigma, dtype="<f8").tobytes())


def load_stats(path) -> PristineStats:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(STATS_MAGIC) + 12 or blob[: len(STATS_MAGIC)] != STATS_MAGIC:
        raise nnet.ParamsFileError(f"{path}: not a stats file")
    off = len(STATS_MAGIC)
    b, patch_side, count = struct.unpack_from("<III", blob, off)
    off += 12
    need = b * 8 + b * b * 8
    if len(blob) != off + need:
        raise nnet.ParamsFileError(f"{path}: truncated or oversized stats file")
    mu = np.frombuffer(blob[off : off + b * 8], dtype="<f8").copy()
    off += b * 8
    sigma = np.frombuffer(blob[off:], dtype="<f8").reshape(b, b).copy()
    return PristineStats(mu=mu, sigma=sigma, patch_side=patch_side, count=count)
