"""Proxy scores for edits: background fidelity, edge fidelity, and a class oracle for the edited region.

Masks may be given per patch (``(gh, gw)``) or per pixel (``(H, W)``);
patch masks are lifted to pixels before any dilation, and dilation radii are
in pixels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .canny import DEFAULT_HIGH, DEFAULT_LOW, DEFAULT_SIGMA, canny_edges
from .errors import InvalidRequest, ShapeMismatch
from .imageio import Image
from .masks import dilate
from .text import COLORS, SHAPES
from .train import MAX_SIZE, MIN_SIZE, PALETTE, shape_mask

CLASSES = tuple(f"{c} {s}" for c in COLORS for s in SHAPES)
MATCH_THRESHOLD = 0.5
FG_DISTANCE = 0.3       # min RGB distance from the region's background to count as foreground
COLOR_RADIUS = 0.5      # max RGB distance to a palette entry to count as that colour


@dataclass(frozen=True)
class ProxyScores:
    background_mse: float
    psnr: float
    edge_iou_outside_mask: float
    region_target_score: float | None = None
    mask_iou: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _array(img) -> np.ndarray:
    if isinstance(img, Image):
        return img.data
    a = np.asarray(img, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def pixel_mask(mask, shape: tuple[int, int]) -> np.ndarray:
    """Lift a patch mask to ``shape`` (nearest), or validate a pixel mask."""
    m = np.asarray(mask, dtype=bool)
    if m.shape == shape:
        return m
    h, w = shape
    gh, gw = m.shape
    if h % gh or w % gw:
        raise ShapeMismatch(f"size-mismatch: mask {m.shape} does not tile image {shape}")
    return np.repeat(np.repeat(m, h // gh, axis=0), w // gw, axis=1)


def _outside(mask, shape, dilation: int) -> np.ndarray:
    return ~dilate(pixel_mask(mask, shape), dilation)


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def background_mse(source, edited, mask, dilation: int = 2) -> tuple[float, float]:
    """MSE (and PSNR, ``inf`` when identical) over pixels outside ``dilate(mask)``."""
    a, b = _array(source), _array(edited)
    if a.shape != b.shape:
        raise ShapeMismatch(f"size-mismatch: {a.shape} vs {b.shape}")
    keep = _outside(mask, a.shape[:2], dilation)
    if not keep.any():
        raise InvalidRequest("empty-background: the mask covers the whole image")
    d = a[keep] - b[keep]
    mse = float(np.mean(d * d))
    return mse, psnr_from_mse(mse)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def edge_iou_outside_mask(source, edited, mask, sigma: float = DEFAULT_SIGMA, low: float = DEFAULT_LOW,
                          high: float = DEFAULT_HIGH, dilation: int = 2) -> float:
    a, b = _array(source), _array(edited)
    if a.shape != b.shape:
        raise ShapeMismatch(f"size-mismatch: {a.shape} vs {b.shape}")
    keep = _outside(mask, a.shape[:2], dilation)
    ea = canny_edges(Image(a), sigma, low, high).data.astype(bool)
    eb = canny_edges(Image(b), sigma, low, high).data.astype(bool)
    return iou(ea & keep, eb & keep)


# ---------------------------------------------------------------- class oracle

def parse_class(text: str) -> str:
    """The first colour and shape word in ``text``, e.g. ``"blue square left"`` -> ``"blue square"``."""
    words = text.lower().split()
    color = next((w for w in words if w in COLORS), None)
    shape = next((w for w in words if w in SHAPES), None)
    if color is None or shape is None:
        raise InvalidRequest(f"unknown-class: {text!r}")
    return f"{color} {shape}"


def _inner_border(region: np.ndarray) -> np.ndarray:
    return region & dilate(~region, 1)


def foreground(edited, mask) -> tuple[np.ndarray, np.ndarray]:
    """``(fg, region)`` pixel masks; the background colour is the median of the region's inner border."""
    img = _array(edited)
    if img.shape[2] != 3:
        raise ShapeMismatch("region oracle needs an RGB image")
    region = pixel_mask(mask, img.shape[:2])
    if not region.any():
        raise InvalidRequest("empty-region: the mask selects no pixels")
    border = _inner_border(region)
    bg = np.median(img[border if border.any() else region], axis=0)
    fg = region & (np.linalg.norm(img - bg, axis=2) > FG_DISTANCE)
    return fg, region


def _color_fractions(img: np.ndarray, fg: np.ndarray) -> dict[str, float]:
    n = np.count_nonzero(fg)
    if n == 0:
        return {c: 0.0 for c in COLORS}
    px = img[fg]
    pal = np.array([PALETTE[c] for c in COLORS])
    dist = np.linalg.norm(px[:, None, :] - pal[None, :, :], axis=2)
    nearest = np.argmin(dist, axis=1)
    close = dist[np.arange(len(px)), nearest] <= COLOR_RADIUS
    return {c: float(np.count_nonzero(close & (nearest == i))) / n for i, c in enumerate(COLORS)}


def _shape_ious(fg: np.ndarray) -> dict[str, float]:
    """Best IoU of each shape template placed near the foreground's bounding box."""
    if not fg.any():
        return {s: 0.0 for s in SHAPES}
    size = fg.shape[0]
    ys, xs = np.nonzero(fg)
    bx0, by0, bx1, by1 = xs.min(), ys.min(), xs.max() + 1, ys.max() + 1
    side = max(bx1 - bx0, by1 - by0)
    sizes = sorted(set(range(MIN_SIZE - 2, MAX_SIZE + 3)) | {int(side)})
    best = {}
    for shape in SHAPES:
        score = 0.0
        for s in sizes:
            for x0 in range(bx0 - 2, bx0 + 3):
                for y0 in range(by0 - 2, by0 + 3):
                    if x0 < 0 or y0 < 0 or x0 + s > size or y0 + s > size:
                        continue
                    score = max(score, iou(shape_mask(shape, (x0, y0, x0 + s, y0 + s), size), fg))
        best[shape] = score
    return best


def class_scores(edited, mask) -> dict[str, float]:
    """``0.5 * colour fraction + 0.5 * template IoU`` for every grammar class."""
    img = _array(edited)
    fg, _ = foreground(img, mask)
    colors = _color_fractions(img, fg)
    shapes = _shape_ious(fg)
    return {f"{c} {s}": 0.5 * colors[c] + 0.5 * shapes[s] for c in COLORS for s in SHAPES}


def top_class(scores: dict[str, float]) -> str:
    # ties resolve to the earlier grammar class
    return max(CLASSES, key=lambda k: (scores[k], -CLASSES.index(k)))


def region_target_score(edited, mask, expected_class: str) -> float:
    if expected_class not in CLASSES:
        raise InvalidRequest(f"unknown-class: {expected_class!r}")
    return class_scores(edited, mask)[expected_class]


def proxy_scores(source, edited, mask, expected_class: str | None = None, reference_mask=None,
                 dilation: int = 2) -> ProxyScores:
    mse, psnr = background_mse(source, edited, mask, dilation)
    edge = edge_iou_outside_mask(source, edited, mask, dilation=dilation)
    target = None if expected_class is None else region_target_score(edited, mask, expected_class)
    m_iou = None if reference_mask is None else iou(np.asarray(mask, bool), np.asarray(reference_mask, bool))
    return ProxyScores(mse, psnr, edge, target, m_iou)
