"""Full-reference perceptual similarity measures and their shared filtering.

All operations take 2-D luminance images in [0, 1] (callers convert color
inputs first). `similarity_weight` maps every measure into [0, 1] so scores
can weight contrastive pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy import signal

MEASURES = ("ssim", "ms_ssim", "gmsd", "fsim", "none")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

GMSD_C = 0.0026
GMSD_GAMMA = 10.0  # similarity mapping exp(-gamma * gmsd)

FSIM_T1 = 0.85
FSIM_T2 = 160.0 / 255.0**2  # original constant rescaled to unit dynamic range
FSIM_MIN_SIDE = 32

# Log-Gabor bank configuration (standard phase-congruency defaults).
PC_SCALES = 4
PC_ORIENTATIONS = 4
PC_MIN_WAVELENGTH = 6.0
PC_MULT = 2.0
PC_SIGMA_ONF = 0.55
PC_DTHETA_ON_SIGMA = 1.2
PC_NOISE_K = 2.0
_EPS = 1e-10


class MetricError(ValueError):
    """Raised for invalid metric inputs."""


@dataclass(frozen=True)
class SimilarityMeasure:
    selector: str = "fsim"

    def __post_init__(self):
        if self.selector not in MEASURES:
            raise MetricError(f"unknown similarity measure {self.selector!r}")


def as_measure(m) -> SimilarityMeasure:
    if isinstance(m, SimilarityMeasure):
        return m
    return SimilarityMeasure(str(m).lower().replace("-", "_"))


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise MetricError("metrics operate on 2-D luminance images")
    if a.shape != b.shape:
        raise MetricError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _gaussian_window(size, sigma):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_maps(a, b):
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu1 = signal.fftconvolve(a, win, mode="valid")
    mu2 = signal.fftconvolve(b, win, mode="valid")
    s11 = signal.fftconvolve(a * a, win, mode="valid") - mu1 * mu1
    s22 = signal.fftconvolve(b * b, win, mode="valid") - mu2 * mu2
    s12 = signal.fftconvolve(a * b, win, mode="valid") - mu1 * mu2
    lum = (2.0 * mu1 * mu2 + SSIM_C1) / (mu1 * mu1 + mu2 * mu2 + SSIM_C1)
    cs = (2.0 * s12 + SSIM_C2) / (s11 + s22 + SSIM_C2)
    return lum, cs


def ssim(a, b) -> float:
    """Mean local SSIM, 11x11 Gaussian window on unit dynamic range."""
    a, b = _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"image smaller than {SSIM_WINDOW}px SSIM window")
    lum, cs = _ssim_maps(a, b)
    return float(np.mean(lum * cs))


def ms_ssim(a, b) -> float:
    """Five-scale MS-SSIM with the standard published weights."""
    a, b = _check_pair(a, b)
    n_scales = len(MS_SSIM_WEIGHTS)
    if min(a.shape) < SSIM_WINDOW * 2 ** (n_scales - 1):
        raise MetricError(
            f"image too small for {n_scales} dyadic scales with {SSIM_WINDOW}px window"
        )
    value = 1.0
    for s in range(n_scales):
        lum, cs = _ssim_maps(a, b)
        if s == n_scales - 1:
            term = float(np.mean(lum * cs))
        else:
            term = float(np.mean(cs))
        value *= max(term, 0.0) ** MS_SSIM_WEIGHTS[s]
        if s < n_scales - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    return value


def _downsample2(x):
    h, w = x.shape
    x = x[: h - h % 2, : w - w % 2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


_PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0


def _prewitt_magnitude(x):
    gx = ndimage.convolve(x, _PREWITT_X, mode="reflect")
    gy = ndimage.convolve(x, _PREWITT_X.T, mode="reflect")
    return np.sqrt(gx * gx + gy * gy)


def gmsd(a, b) -> float:
    """Gradient-magnitude similarity deviation; 0 means identical structure."""
    a, b = _check_pair(a, b)
    g1 = _prewitt_magnitude(a)
    g2 = _prewitt_magnitude(b)
    gms = (2.0 * g1 * g2 + GMSD_C) / (g1 * g1 + g2 * g2 + GMSD_C)
    return float(np.std(gms))


def _lowpass_filter(shape, cutoff=0.45, order=15):
    rows, cols = shape
    fy = np.fft.fftfreq(rows)[:, None]
    fx = np.fft.fftfreq(cols)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    return 1.0 / (1.0 + (radius / cutoff) ** (2 * order))


def _log_gabor_bank(shape):
    """Radial x angular transfer functions: PC_SCALES x PC_ORIENTATIONS filters."""
    rows, cols = shape
    fy = np.fft.fftfreq(rows)[:, None]
    fx = np.fft.fftfreq(cols)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    radius[0, 0] = 1.0
    theta = np.arctan2(-fy, fx)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lp = _lowpass_filter(shape)

    radials = []
    log_sig = math.log(PC_SIGMA_ONF) ** 2
    for s in range(PC_SCALES):
        wavelength = PC_MIN_WAVELENGTH * PC_MULT**s
        f0 = 1.0 / wavelength
        lg = np.exp(-(np.log(radius / f0) ** 2) / (2.0 * log_sig))
        lg *= lp
        lg[0, 0] = 0.0
        radials.append(lg)

    theta_sigma = math.pi / PC_ORIENTATIONS / PC_DTHETA_ON_SIGMA
    spreads = []
    for o in range(PC_ORIENTATIONS):
        angle = o * math.pi / PC_ORIENTATIONS
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        dtheta = np.abs(np.arctan2(ds, dc))
        spreads.append(np.exp(-(dtheta**2) / (2.0 * theta_sigma**2)))
    return radials, spreads


_BANK_CACHE: dict = {}


def _bank_for(shape):
    if shape not in _BANK_CACHE:
        if len(_BANK_CACHE) > 16:
            _BANK_CACHE.clear()
        _BANK_CACHE[shape] = _log_gabor_bank(shape)
    return _BANK_CACHE[shape]


def phase_congruency(img) -> np.ndarray:
    """Nonnegative phase-congruency map from a 4x4 log-Gabor bank (FFT domain)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise MetricError("phase congruency expects a 2-D image")
    if min(img.shape) < FSIM_MIN_SIDE:
        raise MetricError(f"min side {FSIM_MIN_SIDE} required, got {img.shape}")
    radials, spreads = _bank_for(img.shape)
    imfft = np.fft.fft2(img)

    pc = np.zeros_like(img)
    for spread in spreads:
        eo = [np.fft.ifft2(imfft * rad * spread) for rad in radials]
        amps = [np.abs(e) for e in eo]
        sum_an = np.sum(amps, axis=0)
        sum_e = np.sum([e.real for e in eo], axis=0)
        sum_o = np.sum([e.imag for e in eo], axis=0)
        x_energy = np.sqrt(sum_e**2 + sum_o**2) + _EPS
        mean_e = sum_e / x_energy
        mean_o = sum_o / x_energy
        energy = np.zeros_like(img)
        for e in eo:
            energy += e.real * mean_e + e.imag * mean_o
            energy -= np.abs(e.real * mean_o - e.imag * mean_e)

        # Noise threshold estimated from the smallest-scale amplitude response.
        tau = np.median(amps[0]) / math.sqrt(math.log(4.0))
        total_tau = tau * (1.0 - (1.0 / PC_MULT) ** PC_SCALES) / (1.0 - 1.0 / PC_MULT)
        noise_mean = total_tau * math.sqrt(math.pi / 2.0)
        noise_sigma = total_tau * math.sqrt((4.0 - math.pi) / 2.0)
        t = noise_mean + PC_NOISE_K * noise_sigma
        energy = np.maximum(energy - t, 0.0)
        pc += energy / (sum_an + _EPS)
    return pc


_SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0


def _scharr_magnitude(x):
    gx = ndimage.convolve(x, _SCHARR_X, mode="reflect")
    gy = ndimage.convolve(x, _SCHARR_X.T, mode="reflect")
    return np.sqrt(gx * gx + gy * gy)


def fsim(a, b, pc_a=None, pc_b=None) -> float:
    """Luminance FSIM: phase congruency + Scharr gradients, PC-weighted pooling.

    Precomputed phase-congruency maps may be passed to amortize the filter
    bank across many pairings of the same images.
    """
    a, b = _check_pair(a, b)
    if min(a.shape) < FSIM_MIN_SIDE:
        raise MetricError(f"min side {FSIM_MIN_SIDE} required for FSIM, got {a.shape}")
    pc1 = phase_congruency(a) if pc_a is None else pc_a
    pc2 = phase_congruency(b) if pc_b is None else pc_b
    g1 = _scharr_magnitude(a)
    g2 = _scharr_magnitude(b)
    s_pc = (2.0 * pc1 * pc2 + FSIM_T1) / (pc1 * pc1 + pc2 * pc2 + FSIM_T1)
    s_g = (2.0 * g1 * g2 + FSIM_T2) / (g1 * g1 + g2 * g2 + FSIM_T2)
    pcm = np.maximum(pc1, pc2)
    score = float(np.sum(s_pc * s_g * pcm) / (np.sum(pcm) + _EPS))
    return score


def precompute(img, measure):
    """Per-image cache reusable across pairings (currently the FSIM PC map)."""
    measure = as_measure(measure)
    if measure.selector == "fsim":
        return phase_congruency(np.asarray(img, dtype=np.float64))
    return None


def similarity_weight(a, b, measure="fsim", cache_a=None, cache_b=None) -> float:
    """Map any measure's raw score into a [0, 1] pair weight."""
    measure = as_measure(measure)
    sel = measure.selector
    if sel == "none":
        return 0.0
    if sel == "ssim":
        score = ssim(a, b)
    elif sel == "ms_ssim":
        score = ms_ssim(a, b)
    elif sel == "fsim":
        score = fsim(a, b, pc_a=cache_a, pc_b=cache_b)
    else:
        return float(np.clip(math.exp(-GMSD_GAMMA * gmsd(a, b)), 0.0, 1.0))
    return float(np.clip(score, 0.0, 1.0))
