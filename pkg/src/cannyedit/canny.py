"""Canny edge detection: blur, Sobel gradients, NMS, hysteresis."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .imageio import Image, to_grayscale

DEFAULT_SIGMA = 1.0
DEFAULT_LOW = 0.1
DEFAULT_HIGH = 0.3
# Magnitudes are snapped to this many decimals before NMS so that ties between
# the two pixels straddling a step do not hinge on last-bit rounding noise.
MAG_DECIMALS = 9


@dataclass(frozen=True)
class EdgeMap:
    data: np.ndarray  # (H, W) uint8 in {0, 1}

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_image(self) -> Image:
        return Image(self.data.astype(np.float64))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D taps over radius ``ceil(3 sigma)``.

    Built with ``math.exp`` and a left-to-right sum so that any other
    implementation doing the same arithmetic reproduces it bit for bit.
    """
    radius = int(math.ceil(3.0 * sigma))
    raw = [math.exp(-(x * x) / (2.0 * sigma * sigma)) for x in range(-radius, radius + 1)]
    total = 0.0
    for v in raw:
        total += v
    return np.array([v / total for v in raw])


def _convolve_rows(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    h, w = plane.shape
    padded = np.pad(plane, ((0, 0), (r, r)), mode="reflect")
    out = np.zeros((h, w))
    for k in range(len(taps)):
        out += taps[k] * padded[:, k:k + w]
    return out


def gaussian_blur(image: Image, sigma: float) -> Image:
    if sigma < 0:
        raise ValueError(f"negative-sigma: {sigma}")
    if image.channels != 1:
        raise ValueError("gaussian_blur expects a 1-channel image")
    if sigma == 0:
        return image
    taps = gaussian_kernel(sigma)
    plane = image.plane()
    tmp = _convolve_rows(plane, taps)
    out = _convolve_rows(tmp.T, taps).T
    return Image(np.clip(out, 0.0, 1.0))


def sobel_gradients(image: Image) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(magnitude, direction)``; direction is ``atan2(gy, gx)``, y pointing down."""
    if image.channels != 1:
        raise ValueError("sobel_gradients expects a 1-channel image")
    if image.height < 3 or image.width < 3:
        raise ValueError(f"too-small-image: {image.height}x{image.width}")
    p = np.pad(image.plane(), 1, mode="reflect")
    h, w = image.height, image.width

    def at(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (at(-1, 1) - at(-1, -1)) + 2.0 * (at(0, 1) - at(0, -1)) + (at(1, 1) - at(1, -1))
    gy = (at(1, -1) - at(-1, -1)) + 2.0 * (at(1, 0) - at(-1, 0)) + (at(1, 1) - at(-1, 1))
    mag = np.sqrt(gx * gx + gy * gy)
    return mag, np.arctan2(gy, gx)


def quantize_direction(direction: np.ndarray) -> np.ndarray:
    """Map angles to bins 0..3 for 0, 45, 90, 135 degrees."""
    deg = np.mod(direction * (180.0 / math.pi), 180.0)
    bins = np.zeros(deg.shape, dtype=np.int64)
    bins[(deg >= 22.5) & (deg < 67.5)] = 1
    bins[(deg >= 67.5) & (deg < 112.5)] = 2
    bins[(deg >= 112.5) & (deg < 157.5)] = 3
    return bins


def non_max_suppression(mag: np.ndarray, direction: np.ndarray) -> np.ndarray:
    return _kernels.nms(mag, quantize_direction(direction))


def canny_edges(image: Image, sigma: float = DEFAULT_SIGMA, low: float = DEFAULT_LOW,
                high: float = DEFAULT_HIGH) -> EdgeMap:
    """Binary edges; ``low`` and ``high`` are fractions of the peak gradient."""
    if low < 0 or low > high:
        raise ValueError(f"invalid-thresholds: low={low}, high={high}")
    gray = to_grayscale(image)
    blurred = gaussian_blur(gray, sigma)
    mag, direction = sobel_gradients(blurred)
    mag = np.round(mag, MAG_DECIMALS)
    peak = float(mag.max())
    if peak <= 0.0:
        return EdgeMap(np.zeros(mag.shape, dtype=np.uint8))
    thin = non_max_suppression(mag, direction)
    edges = _kernels.hysteresis(thin, low * peak, high * peak)
    return EdgeMap(edges.astype(np.uint8))
