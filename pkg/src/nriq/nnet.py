"""Small convolutional encoder with manual backpropagation.

Stands in for large pretrained backbones at desk scale: a few strided conv
blocks with ReLU, global average pooling to a backbone feature, and a linear
projection whose output is L2-normalized.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"NRIQENC1"
FORMAT_VERSION = 1


class EncoderError(ValueError):
    pass


class ParamsFileError(IOError):
    """Corrupt, truncated, or mismatched parameter file."""


@dataclass(frozen=True)
class EncoderConfig:
    conv_blocks: tuple = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    in_channels: int = 3
    projection_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.projection_dim < 2:
            raise EncoderError("projection_dim must be >= 2")
        for out_ch, k, s in self.conv_blocks:
            if out_ch < 1 or k < 1 or s < 1:
                raise EncoderError(f"invalid conv block ({out_ch}, {k}, {s})")

    @property
    def backbone_dim(self):
        return self.conv_blocks[-1][0]

    def to_json(self):
        return json.dumps(
            {
                "conv_blocks": [list(b) for b in self.conv_blocks],
                "in_channels": self.in_channels,
                "projection_dim": self.projection_dim,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        return EncoderConfig(
            conv_blocks=tuple(tuple(b) for b in d["conv_blocks"]),
            in_channels=d["in_channels"],
            projection_dim=d["projection_dim"],
            seed=d["seed"],
        )


@dataclass
class EncoderParams:
    """All trainable tensors, keyed 'conv{i}.w', 'conv{i}.b', 'proj'."""

    tensors: dict
    config: EncoderConfig
    version: int = FORMAT_VERSION

    def copy(self):
        return EncoderParams(
            {k: v.copy() for k, v in self.tensors.items()}, self.config, self.version
        )


@dataclass
class Embedding:
    backbone: np.ndarray  # pooled pre-projection feature, R^B
    projected: np.ndarray  # unit vector, R^P


def tensor_order(cfg: EncoderConfig):
    names = []
    for i in range(len(cfg.conv_blocks)):
        names += [f"conv{i}.w", f"conv{i}.b"]
    names.append("proj")
    return names


def init_encoder(cfg: EncoderConfig) -> EncoderParams:
    """He fan-in initialization, deterministic given cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    cin = cfg.in_channels
    for i, (cout, k, _s) in enumerate(cfg.conv_blocks):
        std = np.sqrt(2.0 / (k * k * cin))
        tensors[f"conv{i}.w"] = rng.normal(0.0, std, size=(k, k, cin, cout))
        tensors[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    tensors["proj"] = rng.normal(
        0.0, np.sqrt(1.0 / cfg.backbone_dim), size=(cfg.backbone_dim, cfg.projection_dim)
    )
    return EncoderParams(tensors, cfg)


def zeros_like_params(params: EncoderParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def _prepare_input(img, cfg):
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = np.repeat(x[:, :, None], cfg.in_channels, axis=2)
    if x.ndim != 3 or x.shape[2] != cfg.in_channels:
        raise EncoderError(f"expected HxWx{cfg.in_channels} input, got {x.shape}")
    return x


def _conv_forward(x, w, b, stride):
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    win = win[::stride, ::stride]  # (Ho, Wo, Cin, k, k)
    ho, wo = win.shape[0], win.shape[1]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, k * k * x.shape[2])
    y = cols @ w.reshape(-1, w.shape[3]) + b
    return y.reshape(ho, wo, w.shape[3]), cols, xp.shape


def _conv_backward(dy, cols, w, stride, in_shape, padded_shape):
    k = w.shape[0]
    pad = k // 2
    ho, wo, cout = dy.shape
    dy_flat = dy.reshape(ho * wo, cout)
    dw = (cols.T @ dy_flat).reshape(w.shape)
    db = dy_flat.sum(axis=0)
    dcols = dy_flat @ w.reshape(-1, cout).T
    dcols = dcols.reshape(ho, wo, k, k, in_shape[2])
    dxp = np.zeros(padded_shape)
    for ki in range(k):
        for kj in range(k):
            dxp[ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                :, :, ki, kj, :
            ]
    h, w_ = in_shape[0], in_shape[1]
    dx = dxp[pad : pad + h, pad : pad + w_]
    return dx, dw, db


def _forward_cached(params: EncoderParams, img):
    cfg = params.config
    x = _prepare_input(img, cfg)
    caches = []
    for i, (_cout, _k, s) in enumerate(cfg.conv_blocks):
        w = params.tensors[f"conv{i}.w"]
        b = params.tensors[f"conv{i}.b"]
        y, cols, padded_shape = _conv_forward(x, w, b, s)
        if min(y.shape[:2]) < 1:
            raise EncoderError("spatial dimensions collapsed below 1")
        a = np.maximum(y, 0.0)
        caches.append((x.shape, cols, padded_shape, y > 0.0))
        x = a
    backbone = x.mean(axis=(0, 1))
    pre = backbone @ params.tensors["proj"]
    norm = max(float(np.linalg.norm(pre)), 1e-12)
    projected = pre / norm
    return Embedding(backbone, projected), (caches, x.shape, backbone, pre, norm, projected)


def forward(params: EncoderParams, img) -> Embedding:
    """Embed one image; `projected` is L2-normalized."""
    emb, _ = _forward_cached(params, img)
    return emb


def backward(params: EncoderParams, img, upstream: np.ndarray, backbone_upstream=None) -> dict:
    """Analytic gradients of (upstream . projected [+ backbone term]) w.r.t. params."""
    cfg = params.config
    emb, (caches, last_shape, backbone, pre, norm, projected) = _forward_cached(params, img)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != projected.shape:
        raise EncoderError(f"upstream shape {u.shape} != embedding shape {projected.shape}")

    grads = {}
    # Through L2 normalization: dpre = (u - z (z.u)) / ||pre||
    dpre = (u - projected * float(projected @ u)) / norm
    grads["proj"] = np.outer(backbone, dpre)
    dbackbone = params.tensors["proj"] @ dpre
    if backbone_upstream is not None:
        dbackbone = dbackbone + np.asarray(backbone_upstream, dtype=np.float64)

    # Global average pool spreads the gradient uniformly.
    h, w_, c = last_shape
    dx = np.broadcast_to(dbackbone / (h * w_), last_shape).copy()
    for i in reversed(range(len(cfg.conv_blocks))):
        in_shape, cols, padded_shape, relu_mask = caches[i]
        dy = dx * relu_mask
        dx, dw, db = _conv_backward(
            dy, cols, params.tensors[f"conv{i}.w"], cfg.conv_blocks[i][2], in_shape, padded_shape
        )
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
    return grads


@dataclass
class OptimizerState:
    """AdamW with decoupled weight decay and an optional cosine schedule."""

    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 0  # 0 disables the cosine schedule
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self):
        if self.total_steps <= 0:
            return self.lr
        t = min(self.step, self.total_steps)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * t / self.total_steps))


def optimizer_step(params: EncoderParams, grads: dict, state: OptimizerState):
    """One AdamW update; decay applies to weights, never biases."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise EncoderError(f"non-finite gradient in {name}")
    lr = state.current_lr()
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay and not name.endswith(".b"):
            p -= lr * state.weight_decay * p
    return params, state


def save_params(path, params: EncoderParams) -> None:
    """Little-endian binary: magic, version, config JSON + hash, raw float64."""
    cfg_bytes = params.config.to_json().encode("utf-8")
    digest = hashlib.sha256(cfg_bytes).digest()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", params.version))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(digest)
        for name in tensor_order(params.config):
            arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
            f.write(arr.tobytes())


def _tensor_shapes(cfg: EncoderConfig):
    shapes = {}
    cin = cfg.in_channels
    for i, (cout, k, _s) in enumerate(cfg.conv_blocks):
        shapes[f"conv{i}.w"] = (k, k, cin, cout)
        shapes[f"conv{i}.b"] = (cout,)
        cin = cout
    shapes["proj"] = (cfg.backbone_dim, cfg.projection_dim)
    return shapes


def load_params(path, expect_config: EncoderConfig | None = None) -> EncoderParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise ParamsFileError(f"{path}: not a parameter file (bad magic)")
    off = len(MAGIC)
    version, cfg_len = struct.unpack_from("<II", blob, off)
    off += 8
    if version != FORMAT_VERSION:
        raise ParamsFileError(f"{path}: unsupported format version {version}")
    if len(blob) < off + cfg_len + 32:
        raise ParamsFileError(f"{path}: truncated header")
    cfg_bytes = blob[off : off + cfg_len]
    off += cfg_len
    if blob[off : off + 32] != hashlib.sha256(cfg_bytes).digest():
        raise ParamsFileError(f"{path}: config hash mismatch (corrupt file)")
    off += 32
    try:
        cfg = EncoderConfig.from_json(cfg_bytes.decode("utf-8"))
    except Exception as exc:
        raise ParamsFileError(f"{path}: unreadable config block: {exc}") from exc
    if expect_config is not None and cfg != expect_config:
        raise ParamsFileError(f"{path}: config mismatch with expected encoder config")
    shapes = _tensor_shapes(cfg)
    tensors = {}
    for name in tensor_order(cfg):
        shape = shapes[name]
        nbytes = int(np.prod(shape)) * 8
        if len(blob) < off + nbytes:
            raise ParamsFileError(f"{path}: truncated tensor data for {name}")
        tensors[name] = (
            np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        )
        off += nbytes
    if off != len(blob):
        raise ParamsFileError(f"{path}: trailing bytes after tensor data")
    return EncoderParams(tensors, cfg, version)
