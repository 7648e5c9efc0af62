"""Image I/O, color handling, synthetic distortions, fragment sampling and patches.

Images are numpy float64 arrays in [0, 1], shaped (H, W) for grayscale or
(H, W, 3) for RGB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy import fft as sfft
from scipy import ndimage

DISTORTION_KINDS = ("blur", "compression", "noise", "saturation")
DISTORTION_LEVELS = (1, 2)

# Severity parameters per level (level 1 mild, level 2 strong).
BLUR_SIGMA = {1: 1.5, 2: 3.0}
COMPRESSION_QUALITY = {1: 30, 2: 10}
NOISE_SIGMA = {1: 0.05, 2: 0.10}
SATURATION_FACTOR = {1: 0.5, 2: 0.75}

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Standard JPEG luminance quantization table.
_JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


class ImagingError(ValueError):
    """Raised for invalid images, specs, or geometry."""


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3):
        raise ImagingError(f"expected 2-D or 3-D image, got shape {img.shape}")
    if img.ndim == 3 and img.shape[2] != 3:
        raise ImagingError(f"expected 1 or 3 channels, got {img.shape[2]}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ImagingError("zero-dimension image")
    if not np.isfinite(img).all():
        raise ImagingError("non-finite samples in image")
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ImagingError("samples outside [0, 1]")
    return np.clip(img, 0.0, 1.0)


def load_image(path) -> np.ndarray:
    """Decode a PNG/JPEG/BMP file into a float image in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            if im.mode in ("1", "L", "I", "I;16", "F"):
                im = im.convert("L")
                arr = np.asarray(im, dtype=np.float64) / 255.0
            else:
                im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ImagingError(f"cannot read image {path!r}: {exc}") from exc
    return validate_image(arr)


def save_image(path, img: np.ndarray) -> None:
    """Write an image to PNG with 8-bit quantization."""
    img = validate_image(img)
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(q).save(path, format="PNG")


def to_luma(img: np.ndarray) -> np.ndarray:
    """Rec.601 luminance; identity on 1-channel images."""
    img = validate_image(img)
    if img.ndim == 2:
        return img
    return img @ LUMA_WEIGHTS


def ensure_rgb(img: np.ndarray) -> np.ndarray:
    img = validate_image(img)
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2)
    return img


def resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Separable bilinear resize with pixel-center alignment."""
    img = validate_image(img)
    if new_h < 1 or new_w < 1:
        raise ImagingError("target size must be positive")
    h, w = img.shape[:2]

    def axis_coords(n_src, n_dst):
        c = (np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5
        c = np.clip(c, 0.0, n_src - 1.0)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = c - lo
        return lo, hi, frac

    rlo, rhi, rf = axis_coords(h, new_h)
    clo, chi, cf = axis_coords(w, new_w)
    if img.ndim == 2:
        rf_ = rf[:, None]
        cf_ = cf[None, :]
    else:
        rf_ = rf[:, None, None]
        cf_ = cf[None, :, None]
    rows = img[rlo] * (1 - rf_) + img[rhi] * rf_
    out = rows[:, clo] * (1 - cf_) + rows[:, chi] * cf_
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ImagingError(f"unknown distortion kind {self.kind!r}")
        if self.level not in DISTORTION_LEVELS:
            raise ImagingError(f"level must be in {DISTORTION_LEVELS}, got {self.level}")


def all_distortion_specs() -> list[DistortionSpec]:
    """The full bank: 4 kinds x 2 levels, fixed enumeration order."""
    return [DistortionSpec(k, lv) for k in DISTORTION_KINDS for lv in DISTORTION_LEVELS]


def _blur(img, sigma):
    radius = int(4.0 * sigma + 0.5)
    if min(img.shape[:2]) <= radius:
        raise ImagingError(
            f"image {img.shape[:2]} smaller than blur kernel support (radius {radius})"
        )
    if img.ndim == 2:
        out = ndimage.gaussian_filter(img, sigma, mode="reflect")
    else:
        out = ndimage.gaussian_filter(img, (sigma, sigma, 0.0), mode="reflect")
    return out


def _jpeg_quant_table(quality):
    if quality < 50:
        scale = 5000.0 / quality
    else:
        scale = 200.0 - 2.0 * quality
    table = np.floor((_JPEG_LUMA_TABLE * scale + 50.0) / 100.0)
    return np.maximum(table, 1.0)


def _block_dct_compress_plane(plane, table):
    h, w = plane.shape
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge") * 255.0 - 128.0
    bh, bw = padded.shape[0] // 8, padded.shape[1] // 8
    blocks = padded.reshape(bh, 8, bw, 8).transpose(0, 2, 1, 3)
    coef = sfft.dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    rec = sfft.idctn(coef, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)
    return (rec[:h, :w] + 128.0) / 255.0


def _compress(img, quality):
    table = _jpeg_quant_table(quality)
    if img.ndim == 2:
        out = _block_dct_compress_plane(img, table)
    else:
        out = np.stack(
            [_block_dct_compress_plane(img[:, :, c], table) for c in range(3)], axis=2
        )
    return out


def _desaturate(img, factor):
    # Interpolate toward the achromatic (channel-mean) axis: fixes gray-content
    # pixels exactly while shifting Rec.601 luma monotonically with the factor,
    # so luminance metrics can order the severity levels.
    if img.ndim == 2:
        return img.copy()
    gray = img.mean(axis=2, keepdims=True)
    return (1.0 - factor) * img + factor * gray


def distort(img: np.ndarray, spec: DistortionSpec, seed: int) -> np.ndarray:
    """Apply one synthetic distortion; deterministic given seed."""
    img = validate_image(img)
    if spec.kind == "blur":
        out = _blur(img, BLUR_SIGMA[spec.level])
    elif spec.kind == "compression":
        out = _compress(img, COMPRESSION_QUALITY[spec.level])
    elif spec.kind == "noise":
        rng = np.random.default_rng(seed)
        out = img + rng.normal(0.0, NOISE_SIGMA[spec.level], size=img.shape)
    else:
        out = _desaturate(img, SATURATION_FACTOR[spec.level])
    return np.clip(out, 0.0, 1.0)


@dataclass
class DistortedSet:
    """One source scene, its distorted versions, and cached pair weights."""

    source: np.ndarray
    versions: list
    specs: list
    weights: np.ndarray


def make_distorted_set(img: np.ndarray, measure="fsim", seed: int = 0) -> DistortedSet:
    """Generate the 8-version distortion bank and its pairwise similarity weights.

    Weights are computed on the full (luma) images, before any fragmenting.
    """
    from . import frmetrics

    img = validate_image(img)
    specs = all_distortion_specs()
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x5D15])
    child_seeds = seq.generate_state(len(specs))
    versions = [distort(img, spec, int(s)) for spec, s in zip(specs, child_seeds)]

    lumas = [to_luma(v) for v in versions]
    measure = frmetrics.as_measure(measure)
    d = len(versions)
    weights = np.zeros((d, d))
    caches = [frmetrics.precompute(l, measure) for l in lumas]
    for j in range(d):
        for k in range(j + 1, d):
            w = frmetrics.similarity_weight(
                lumas[j], lumas[k], measure, cache_a=caches[j], cache_b=caches[k]
            )
            weights[j, k] = w
            weights[k, j] = w
    return DistortedSet(source=img, versions=versions, specs=specs, weights=weights)


@dataclass
class FragmentPlan:
    """Per-cell mini-patch offsets for fragment sampling over a fixed grid."""

    grid_n: int
    minipatch: int
    offsets: np.ndarray  # (grid_n*grid_n, 2) of (row, col) offsets within cells
    seed: int
    image_shape: tuple

    @property
    def output_side(self):
        return self.grid_n * self.minipatch


def make_fragment_plan(
    shape, seed: int, grid_n: int = 7, minipatch: int = 32
) -> FragmentPlan:
    """Draw one random mini-patch offset per grid cell; deterministic given seed."""
    h, w = shape[0], shape[1]
    cell_h = h // grid_n
    cell_w = w // grid_n
    if cell_h < minipatch or cell_w < minipatch:
        raise ImagingError(
            f"image {h}x{w} too small for {grid_n}x{grid_n} grid of {minipatch}px mini-patches"
        )
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, cell_h - minipatch + 1, size=grid_n * grid_n)
    cols = rng.integers(0, cell_w - minipatch + 1, size=grid_n * grid_n)
    offsets = np.stack([rows, cols], axis=1)
    return FragmentPlan(
        grid_n=grid_n, minipatch=minipatch, offsets=offsets, seed=seed, image_shape=(h, w)
    )


def fragment(img: np.ndarray, plan: FragmentPlan) -> np.ndarray:
    """Stitch one mini-patch per grid cell (row-major) into a single image."""
    img = validate_image(img)
    h, w = img.shape[:2]
    if (h, w) != tuple(plan.image_shape):
        raise ImagingError(f"plan built for {plan.image_shape}, image is {(h, w)}")
    g, m = plan.grid_n, plan.minipatch
    cell_h, cell_w = h // g, w // g
    side = g * m
    if img.ndim == 2:
        out = np.empty((side, side))
    else:
        out = np.empty((side, side, img.shape[2]))
    for gi in range(g):
        for gj in range(g):
            r0 = gi * cell_h + int(plan.offsets[gi * g + gj, 0])
            c0 = gj * cell_w + int(plan.offsets[gi * g + gj, 1])
            out[gi * m : (gi + 1) * m, gj * m : (gj + 1) * m] = img[
                r0 : r0 + m, c0 : c0 + m
            ]
    return out


def prepare_for_fragment(img: np.ndarray, grid_n: int = 7, minipatch: int = 32):
    """Upscale bilinearly so the fragment grid fits (small-image policy)."""
    img = validate_image(img)
    side = grid_n * minipatch
    h, w = img.shape[:2]
    if h >= side and w >= side:
        return img
    scale = max(side / h, side / w)
    return resize_bilinear(img, max(side, math.ceil(h * scale)), max(side, math.ceil(w * scale)))


def extract_patches(img: np.ndarray, side: int, stride: int | None = None) -> list:
    """All R x R patches on a stride grid; partial border patches are dropped."""
    img = validate_image(img)
    if stride is None:
        stride = side
    h, w = img.shape[:2]
    if side > h or side > w:
        raise ImagingError(f"patch side {side} larger than image {h}x{w}")
    patches = []
    for r0 in range(0, h - side + 1, stride):
        for c0 in range(0, w - side + 1, stride):
            patches.append(img[r0 : r0 + side, c0 : c0 + side].copy())
    return patches


def center_crop(img: np.ndarray, side: int) -> np.ndarray:
    """Central side x side crop, upscaling first if the image is smaller."""
    img = validate_image(img)
    h, w = img.shape[:2]
    if h < side or w < side:
        scale = max(side / h, side / w)
        img = resize_bilinear(img, max(side, math.ceil(h * scale)), max(side, math.ceil(w * scale)))
        h, w = img.shape[:2]
    r0 = (h - side) // 2
    c0 = (w - side) // 2
    return img[r0 : r0 + side, c0 : c0 + side]
