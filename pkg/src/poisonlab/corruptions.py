"""Severity-graded image corruption kernels used as poisons.

Each kernel maps an [H, W, C] float image in [0, 1] to another one, is
deterministic given (kind, severity, seed, image), and clips back into range.
Severity tables run from augmentation-grade at 1 to strongly destructive at 5.

`contrast_plus` is contrast shifted one severity step up (clamped at 5); it
stands in as the fifth poison so five-corruption attacks stay expressible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import stream

NOISE_SIGMA = (0.04, 0.06, 0.08, 0.09, 0.10)
BLUR_SIGMA = (0.4, 0.6, 0.8, 1.0, 1.5)
CONTRAST_FACTOR = (0.75, 0.5, 0.4, 0.3, 0.15)
# block sizes tile or clamp cleanly on 16px sides; a 5px block leaves 1px
# ragged strips that break distortion monotonicity between severities 3 and 4
PIXELATE_BLOCK = (2, 3, 4, 8, 16)

KINDS = ("gaussian_noise", "gaussian_blur", "contrast", "pixelate", "contrast_plus")

# Order matters: single-poison attacks use the first entry.
DEFAULT_CATALOG = ("gaussian_blur", "gaussian_noise", "contrast", "pixelate", "contrast_plus")


@dataclass(frozen=True)
class CorruptionKind:
    name: str
    severity: int

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown corruption {self.name!r}")
        _check_severity(self.severity)


def _check_severity(severity: int) -> None:
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be in [1, 5], got {severity}")


def gaussian_noise(img: np.ndarray, severity: int, rng_seed: int = 0) -> np.ndarray:
    _check_severity(severity)
    sigma = NOISE_SIGMA[severity - 1]
    noise = stream(rng_seed, "gaussian_noise").normal(0.0, sigma, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


def blur_kernel_1d(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, severity: int) -> np.ndarray:
    """Separable Gaussian convolution with reflect padding."""
    _check_severity(severity)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"image {img.shape[:2]} too small to blur")
    kernel = blur_kernel_1d(BLUR_SIGMA[severity - 1])
    radius = len(kernel) // 2
    out = img.astype(np.float64)
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in range(3)],
                        mode="reflect")
        acc = np.zeros_like(out)
        for offset, weight in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(offset, offset + img.shape[axis])
            acc += weight * padded[tuple(sl)]
        out = acc
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def contrast(img: np.ndarray, severity: int) -> np.ndarray:
    _check_severity(severity)
    c = CONTRAST_FACTOR[severity - 1]
    mean = img.reshape(-1, img.shape[2]).mean(axis=0)
    return np.clip(mean + c * (img - mean), 0.0, 1.0).astype(np.float32)


def contrast_plus(img: np.ndarray, severity: int) -> np.ndarray:
    _check_severity(severity)
    return contrast(img, min(severity + 1, 5))


def pixelate(img: np.ndarray, severity: int) -> np.ndarray:
    """Replace each bxb block by its mean; edge blocks average their actual extent."""
    _check_severity(severity)
    h, w, _ = img.shape
    b = min(PIXELATE_BLOCK[severity - 1], h, w)
    out = img.astype(np.float64).copy()
    for r0 in range(0, h, b):
        for c0 in range(0, w, b):
            block = out[r0:r0 + b, c0:c0 + b]
            out[r0:r0 + b, c0:c0 + b] = block.mean(axis=(0, 1))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply(kind: CorruptionKind, img: np.ndarray, rng_seed: int = 0) -> np.ndarray:
    if kind.name == "gaussian_noise":
        return gaussian_noise(img, kind.severity, rng_seed)
    if kind.name == "gaussian_blur":
        return gaussian_blur(img, kind.severity)
    if kind.name == "contrast":
        return contrast(img, kind.severity)
    if kind.name == "contrast_plus":
        return contrast_plus(img, kind.severity)
    if kind.name == "pixelate":
        return pixelate(img, kind.severity)
    raise ValueError(f"unknown corruption {kind.name!r}")
