"""Canny edge extraction: Gaussian blur, Sobel gradients, non-maximum
suppression and hysteresis linking.

Thresholds are ratios of the image's largest suppressed gradient magnitude,
so an intensity rescaling of the input leaves the edge map unchanged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from lowbridge._backend import kernels

__all__ = [
    "CannyParams",
    "EdgeMap",
    "gaussian_kernel1d",
    "gaussian_blur",
    "sobel_gradients",
    "quantize_direction",
    "non_max_suppression",
    "hysteresis",
    "extract_edges",
]

# below this the gradient field is treated as flat (rounding noise only)
_FLAT_MAGNITUDE = 1e-9


@dataclass(frozen=True)
class CannyParams:
    sigma: float = 1.4
    low_ratio: float = 0.10
    high_ratio: float = 0.20
    kernel_radius: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.low_ratio < 1:
            raise ValueError(f"low_ratio must lie in (0, 1), got {self.low_ratio}")
        if not 0 < self.high_ratio <= 1:
            raise ValueError(f"high_ratio must lie in (0, 1], got {self.high_ratio}")
        if self.low_ratio >= self.high_ratio:
            raise ValueError("low_ratio must be below high_ratio")
        if self.kernel_radius is None:
            object.__setattr__(self, "kernel_radius", max(1, math.ceil(3 * self.sigma)))
        elif self.kernel_radius < 1:
            raise ValueError("kernel_radius must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CannyParams":
        unknown = set(d) - {"sigma", "low_ratio", "high_ratio", "kernel_radius"}
        if unknown:
            raise ValueError(f"unknown canny keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EdgeMap:
    """Binary {0, 1} edge grid plus where it came from."""

    data: np.ndarray
    source: str = ""
    params: CannyParams = field(default_factory=CannyParams)

    @property
    def shape(self):
        return self.data.shape


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_rows(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    padded = np.pad(img, ((0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(img)
    w = img.shape[1]
    for i, kv in enumerate(k):
        out += kv * padded[:, i:i + w]
    return out


def gaussian_blur(image: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    """Separable Gaussian blur with reflect padding (no edge duplication)."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    img = np.asarray(image, dtype=np.float64)
    k = gaussian_kernel1d(sigma, radius)
    return _filter_rows(_filter_rows(img, k).T, k).T.copy()


def sobel_gradients(image: np.ndarray):
    """3x3 Sobel. Returns ``(gx, gy, magnitude, direction_bin)``.

    ``gx`` grows to the right, ``gy`` grows downward. Direction bins are the
    gradient angle folded to [0, 180) and rounded to the nearest multiple of
    45 degrees: 0 horizontal, 1 down-right diagonal, 2 vertical, 3 down-left.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError(f"sobel_gradients needs a 2-D image of at least 3x3, got {img.shape}")
    p = np.pad(img, 1, mode="reflect")
    h, w = img.shape
    s = lambda dy, dx: p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]  # noqa: E731
    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    magnitude = np.sqrt(gx * gx + gy * gy)
    return gx, gy, magnitude, quantize_direction(gx, gy)


def quantize_direction(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    return (np.floor(angle / 45.0 + 0.5).astype(np.int64) % 4).astype(np.int8)


def non_max_suppression(magnitude: np.ndarray, direction_bin: np.ndarray) -> np.ndarray:
    """Keep a pixel iff its magnitude is >= both neighbours along its gradient bin.

    Border pixels are always suppressed.
    """
    mag = np.ascontiguousarray(magnitude, dtype=np.float64)
    bins = np.ascontiguousarray(direction_bin, dtype=np.int8)
    if mag.shape != bins.shape:
        raise ValueError(f"magnitude {mag.shape} and direction {bins.shape} differ")
    return kernels.nms(mag, bins)


def hysteresis(suppressed: np.ndarray, low: float, high: float) -> np.ndarray:
    """Two-threshold linking with 8-connectivity; returns a float {0, 1} grid.

    Pixels >= ``high`` are edges; pixels >= ``low`` are edges when an
    8-connected path of such pixels reaches a strong one.
    """
    if not low < high:
        raise ValueError(f"need low < high, got low={low}, high={high}")
    sup = np.ascontiguousarray(suppressed, dtype=np.float64)
    return kernels.hysteresis(sup, float(low), float(high)).astype(np.float32)


def extract_edges(image, params: CannyParams | None = None, source: str = "") -> EdgeMap:
    """Binary Canny edge map of a 2-D image."""
    params = params or CannyParams()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"extract_edges needs a 2-D image of at least 3x3, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    blurred = gaussian_blur(img, params.sigma, params.kernel_radius)
    _, _, mag, bins = sobel_gradients(blurred)
    sup = non_max_suppression(mag, bins)
    peak = float(sup.max())
    if peak <= _FLAT_MAGNITUDE:
        return EdgeMap(np.zeros(img.shape, dtype=np.float32), source, params)
    edges = hysteresis(sup, params.low_ratio * peak, params.high_ratio * peak)
    return EdgeMap(edges, source, params)
