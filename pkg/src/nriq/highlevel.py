"""Anchor-based coarse quality, group formation, and group-contrastive training.

A fixed pair of unit anchor embeddings ("good" / "bad") scores each batch
member; the batch's top and bottom quality groups are then pulled together
internally and pushed apart across groups.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import imaging, nnet

DEFAULT_K2 = 10.0
CROP_SIDE = 224
ANCHOR_NORM_TOL = 1e-3


class GroupError(ValueError):
    pass


@dataclass
class AnchorPair:
    z_g: np.ndarray
    z_b: np.ndarray
    provenance: str = "external"

    def __post_init__(self):
        self.z_g = np.asarray(self.z_g, dtype=np.float64)
        self.z_b = np.asarray(self.z_b, dtype=np.float64)
        if self.z_g.shape != self.z_b.shape or self.z_g.ndim != 1:
            raise GroupError("anchors must be two vectors of equal dimension")
        for name, v in (("z_g", self.z_g), ("z_b", self.z_b)):
            if abs(np.linalg.norm(v) - 1.0) > ANCHOR_NORM_TOL:
                raise GroupError(f"anchor {name} is not unit-norm")
        if np.allclose(self.z_g, self.z_b):
            raise GroupError("anchors must differ")


@dataclass
class GCLConfig:
    tau2: float = 0.1
    batch: int = 32
    k: int = 8
    k2: float = DEFAULT_K2
    epochs: int = 15
    lr: float = 1e-5
    weight_decay: float = 0.0
    seed: int = 0
    encoder: nnet.EncoderConfig = field(default_factory=nnet.EncoderConfig)

    def __post_init__(self):
        if self.tau2 <= 0:
            raise GroupError("tau2 must be positive")
        if self.k < 2:
            raise GroupError("k must be >= 2")
        m = group_size(self.batch, self.k)
        if self.batch < 2 * m:
            raise GroupError(f"batch {self.batch} smaller than 2*M = {2 * m}")


def group_size(n: int, k: int) -> int:
    """M = round(N / k), round-half-to-even."""
    return int(round(n / k))


def _check_unit_vec(z):
    z = np.asarray(z, dtype=np.float64)
    if abs(np.linalg.norm(z) - 1.0) > 1e-4:
        raise GroupError("embedding must be unit-norm")
    return z


def q_high(z, anchors: AnchorPair, k2: float = DEFAULT_K2) -> float:
    """Coarse quality from the anchor margin: sigmoid of k2 * (z.z_g - z.z_b)."""
    z = _check_unit_vec(z)
    if k2 <= 0:
        raise GroupError("k2 must be positive")
    margin = float(z @ anchors.z_b - z @ anchors.z_g)
    x = k2 * margin
    if x > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(x))


@dataclass
class GroupSplit:
    s_b: np.ndarray  # indices of the bottom-quality group, size M
    s_g: np.ndarray  # indices of the top-quality group, size M
    order: np.ndarray  # full sorted order used (ascending Q_H, ties by index)


def form_groups(embeddings, anchors: AnchorPair, cfg: GCLConfig) -> GroupSplit:
    """Sort by Q_H ascending (ties by batch index); bottom M and top M."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    m = group_size(n, cfg.k)
    if n < 2 * m:
        raise GroupError(f"batch of {n} too small for two disjoint groups of {m}")
    if not np.allclose(np.linalg.norm(embeddings, axis=1), 1.0, atol=1e-4):
        raise GroupError("group members must be unit-norm")
    # Sort on the raw anchor margin rather than Q_H itself: the sigmoid is
    # monotone in the margin, so the order is the same for every k2, and the
    # margin never saturates into ties the way Q_H does at large k2.
    margin = embeddings @ anchors.z_b - embeddings @ anchors.z_g
    order = np.argsort(-margin, kind="stable")
    return GroupSplit(s_b=order[:m].copy(), s_g=order[n - m :].copy(), order=order)


def gcl_loss(split: GroupSplit, embeddings, tau2: float):
    """Group-contrastive loss; returns (loss, gradients w.r.t. all embeddings).

    Only group members receive nonzero gradient.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-4):
        raise GroupError("group members must be unit-norm")
    m = len(split.s_g)
    if m < 2 or len(split.s_b) < 2:
        raise GroupError("groups need at least 2 members each")
    if set(split.s_g.tolist()) & set(split.s_b.tolist()):
        raise GroupError("groups must be disjoint")

    grads = np.zeros_like(z)
    loss = 0.0
    for own, other in ((split.s_g, split.s_b), (split.s_b, split.s_g)):
        for i in own:
            mates = own[own != i]
            pool = np.concatenate([mates, other])
            p = np.exp(z[pool] @ z[i] / tau2)
            num = float(np.sum(p[: len(mates)]))
            den = float(np.sum(p))
            loss += -math.log(num / den)
            # dL/dp_j then chain through p_j = exp(z_i . z_j / tau2).
            coef = np.empty(len(pool))
            coef[: len(mates)] = -1.0 / num + 1.0 / den
            coef[len(mates) :] = 1.0 / den
            coef *= p / tau2
            grads[i] += coef @ z[pool]
            grads[pool] += np.outer(coef, z[i])
    return loss, grads


def train_highlevel(
    corpus, anchors: AnchorPair, cfg: GCLConfig, init_params: nnet.EncoderParams | None = None,
    on_step=None,
) -> nnet.EncoderParams:
    """Fine-tune the high-level encoder with the group-contrastive loss.

    Anchors are never updated. Batches are center-crops; the middle of each
    batch (outside both groups) contributes no gradient.
    """
    if len(corpus) < cfg.batch:
        raise GroupError(f"corpus of {len(corpus)} smaller than batch {cfg.batch}")
    params = init_params.copy() if init_params is not None else nnet.init_encoder(cfg.encoder)
    if cfg.epochs == 0:
        return params
    crops = [imaging.center_crop(img, CROP_SIDE) for img in corpus]
    n = len(crops)
    steps_per_epoch = n // cfg.batch
    state = nnet.OptimizerState(
        lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=steps_per_epoch * cfg.epochs
    )
    step = 0
    for epoch in range(cfg.epochs):
        seq = np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 0x6C, epoch])
        order = np.random.default_rng(seq).permutation(n)
        for b0 in range(0, steps_per_epoch * cfg.batch, cfg.batch):
            ids = order[b0 : b0 + cfg.batch]
            z = np.asarray([nnet.forward(params, crops[i]).projected for i in ids])
            split = form_groups(z, anchors, cfg)
            loss, gz = gcl_loss(split, z, cfg.tau2)
            if not np.isfinite(loss):
                raise GroupError(f"non-finite loss at epoch {epoch}, step {step}")
            if on_step is not None:
                on_step(step, loss, z, split)
            grads = nnet.zeros_like_params(params)
            for bi, i in enumerate(ids):
                if not np.any(gz[bi]):
                    continue
                g = nnet.backward(params, crops[i], gz[bi])
                for name in grads:
                    grads[name] += g[name]
            params, state = nnet.optimizer_step(params, grads, state)
            step += 1
    return params


def bootstrap_anchors(params: nnet.EncoderParams, good_exemplars, bad_exemplars) -> AnchorPair:
    """Anchors from exemplar images: normalized mean embedding per side."""
    if not good_exemplars or not bad_exemplars:
        raise GroupError("both exemplar sets must be non-empty")

    def mean_embedding(images):
        zs = [nnet.forward(params, imaging.center_crop(img, CROP_SIDE)).projected for img in images]
        m = np.mean(zs, axis=0)
        norm = np.linalg.norm(m)
        if norm < 1e-9:
            raise GroupError("degenerate zero-norm mean embedding")
        return m / norm

    return AnchorPair(
        z_g=mean_embedding(good_exemplars),
        z_b=mean_embedding(bad_exemplars),
        provenance="bootstrapped",
    )


def save_anchors(path, anchors: AnchorPair) -> None:
    """Two lines of whitespace-separated decimals: z_g then z_b."""
    with open(path, "w", encoding="utf-8") as f:
        for v in (anchors.z_g, anchors.z_b):
            f.write(" ".join(format(x, ".17g") for x in v) + "\n")


def load_anchors(path) -> AnchorPair:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise GroupError(f"{path}: expected exactly 2 anchor lines, got {len(lines)}")
    vecs = []
    for ln in lines:
        v = np.array([float(t) for t in ln.split()])
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > ANCHOR_NORM_TOL:
            if norm < 1e-9:
                raise GroupError(f"{path}: zero-norm anchor")
            warnings.warn(f"{path}: anchor norm {norm:.6f} outside tolerance; renormalizing")
            v = v / norm
        vecs.append(v)
    return AnchorPair(z_g=vecs[0], z_b=vecs[1], provenance="file")
