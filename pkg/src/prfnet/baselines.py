"""Classical full-reference metrics and their use as 2AFC deciders.

All metrics assume a dynamic range of 1. SSIM and MS-SSIM work on the luma
projection of RGB inputs; PSNR uses every channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import ImageTriplet

LUMA = np.array([0.299, 0.587, 0.114])
K1, K2 = 0.01, 0.03
C1, C2 = K1**2, K2**2
WINDOW = 11
WINDOW_SIGMA = 1.5
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y) -> float:
    """10 log10(1 / MSE); ``inf`` when the images are identical."""
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def to_luma(x: np.ndarray) -> np.ndarray:
    """(3, H, W) -> (H, W) luma; 2-D input passes through."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(LUMA, x, axes=(0, 0))
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    raise ValueError(f"expected an (H, W), (1, H, W) or (3, H, W) image, got {x.shape}")


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian; the 2-D window is its outer product."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-window luminance and contrast-structure maps over valid windows."""
    if min(x.shape) < WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {WINDOW}x{WINDOW} window")
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    lum = (2 * mx * my + C1) / (mx * mx + my * my + C1)
    cs = (2 * sxy + C2) / (sxx + syy + C2)
    return lum, cs


def ssim_map(x, y) -> np.ndarray:
    x, y = _pair(x, y)
    lum, cs = _ssim_terms(to_luma(x), to_luma(y))
    return lum * cs


def ssim(x, y) -> float:
    """Mean SSIM over all valid 11x11 Gaussian-weighted windows."""
    return float(np.mean(ssim_map(x, y)))


def ms_ssim_scales(height: int, width: int, max_scales: int = len(MS_WEIGHTS)) -> int:
    """Largest k <= max_scales with min(height, width) >= 11 * 2**(k-1)."""
    k = 0
    while k < max_scales and min(height, width) >= WINDOW * 2**k:
        k += 1
    return k


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(x, y) -> float:
    """Multi-scale SSIM with the standard five weights.

    Images too small for five scales use as many as fit, with the leading
    weights renormalised to sum to one. Negative contrast-structure means are
    clamped to zero before the weighted product.
    """
    x, y = _pair(x, y)
    x, y = to_luma(x), to_luma(y)
    k = ms_ssim_scales(*x.shape)
    if k == 0:
        raise ValueError(f"image {x.shape} too small for MS-SSIM (needs at least {WINDOW}x{WINDOW})")
    weights = np.asarray(MS_WEIGHTS[:k])
    weights = weights / weights.sum()
    value = 1.0
    for j in range(k):
        lum, cs = _ssim_terms(x, y)
        value *= max(float(np.mean(cs)), 0.0) ** weights[j]
        if j == k - 1:
            value *= max(float(np.mean(lum)), 0.0) ** weights[j]
        else:
            x, y = _downsample(x), _downsample(y)
    return float(value)


METRICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "psnr": psnr,
    "ssim": ssim,
    "msssim": ms_ssim,
}


# The metric whose decision tracks severity for each distortion kind; used to
# sanity-check generated labels.
MATCHED_METRIC = {
    "gaussian_noise": "psnr",
    "gaussian_blur": "msssim",
    "jpeg_like_block_quantize": "ssim",
    "brightness_shift": "psnr",
}


def get_metric(name: str) -> Callable[[np.ndarray, np.ndarray], float]:
    try:
        return METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; expected one of {sorted(METRICS)}") from None


@dataclass(frozen=True)
class MetricResult:
    metric: str
    value_a: float
    value_b: float
    choice: str  # "A" or "B"


def baseline_decide(triplet: ImageTriplet, metric: str) -> MetricResult:
    """Pick B iff metric(O, B) > metric(O, A); ties go to A."""
    fn = get_metric(metric)
    va = fn(triplet.ref, triplet.dis_a)
    vb = fn(triplet.ref, triplet.dis_b)
    return MetricResult(metric, va, vb, "B" if vb > va else "A")


def decision_correct(choice: str, hard_label: int) -> bool:
    return (choice == "B") == (hard_label == 1)


def baseline_accuracy(triplets: Iterable[ImageTriplet], metric: str) -> tuple[float, list[tuple[MetricResult, int, bool]]]:
    """2AFC accuracy of ``metric`` over hard-labelled triplets, plus per-triplet rows."""
    rows = []
    for t in triplets:
        if t.hard_label is None:
            raise ValueError("baseline accuracy needs hard labels")
        res = baseline_decide(t, metric)
        rows.append((res, t.hard_label, decision_correct(res.choice, t.hard_label)))
    if not rows:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(r[2] for r in rows) / len(rows), rows
