"""Loop-heavy kernels: non-maximum suppression, hysteresis, connected components.

Each kernel exists twice: a numba-compiled scalar loop (``*_nb``) and a
vectorised numpy twin (``*_np``). Both must agree bit-for-bit; the public
names pick one according to :mod:`cannyedit._accel`.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# (dy, dx) of the "positive" neighbour for each direction bin: 0, 45, 90, 135 deg
_OFFSETS = np.array([[0, 1], [1, 1], [1, 0], [1, -1]], dtype=np.int64)


def _nms_py(mag, bins, offsets):
    h, w = mag.shape
    out = np.zeros_like(mag)
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            m = mag[y, x]
            if m <= 0.0:
                continue
            b = bins[y, x]
            dy = offsets[b, 0]
            dx = offsets[b, 1]
            # asymmetric tie rule keeps plateaus one pixel wide
            if m >= mag[y - dy, x - dx] and m > mag[y + dy, x + dx]:
                out[y, x] = m
    return out


def _hysteresis_py(nms, low, high):
    h, w = nms.shape
    edges = np.zeros((h, w), dtype=np.bool_)
    stack = np.empty(h * w * 2, dtype=np.int64)
    top = 0
    for y in range(h):
        for x in range(w):
            v = nms[y, x]
            if v > 0.0 and v >= high:
                edges[y, x] = True
                stack[top] = y
                stack[top + 1] = x
                top += 2
    while top > 0:
        top -= 2
        y = stack[top]
        x = stack[top + 1]
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                yy = y + dy
                xx = x + dx
                if 0 <= yy < h and 0 <= xx < w and not edges[yy, xx]:
                    v = nms[yy, xx]
                    if v > 0.0 and v >= low:
                        edges[yy, xx] = True
                        stack[top] = yy
                        stack[top + 1] = xx
                        top += 2
    return edges


def _label_py(mask):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    stack = np.empty(h * w * 2, dtype=np.int64)
    current = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx] != 0:
                continue
            current += 1
            labels[sy, sx] = current
            stack[0] = sy
            stack[1] = sx
            top = 2
            while top > 0:
                top -= 2
                y = stack[top]
                x = stack[top + 1]
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        yy = y + dy
                        xx = x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and labels[yy, xx] == 0:
                            labels[yy, xx] = current
                            stack[top] = yy
                            stack[top + 1] = xx
                            top += 2
    return labels


nms_nb = njit(_nms_py)
hysteresis_nb = njit(_hysteresis_py)
label_nb = njit(_label_py)


def nms_np(mag: np.ndarray, bins: np.ndarray, offsets: np.ndarray = _OFFSETS) -> np.ndarray:
    h, w = mag.shape
    out = np.zeros_like(mag)
    if h < 3 or w < 3:
        return out
    c = mag[1:-1, 1:-1]
    bc = bins[1:-1, 1:-1]
    keep = np.zeros(c.shape, dtype=bool)
    for b in range(4):
        dy, dx = int(offsets[b, 0]), int(offsets[b, 1])
        pos = mag[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        neg = mag[1 - dy:h - 1 - dy, 1 - dx:w - 1 - dx]
        keep |= (bc == b) & (c >= neg) & (c > pos)
    keep &= c > 0.0
    out[1:-1, 1:-1] = np.where(keep, c, 0.0)
    return out


def _dilate8(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out |= p[dy:dy + h, dx:dx + w]
    return out


def hysteresis_np(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    cand = (nms > 0.0) & (nms >= low)
    edges = cand & (nms >= high)
    while True:
        grown = _dilate8(edges) & cand
        if np.array_equal(grown, edges):
            return edges
        edges = grown


def label_np(mask: np.ndarray) -> np.ndarray:
    """8-connected labels numbered by first pixel in row-major order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    # min-label propagation, then renumber by first appearance
    big = h * w + 1
    lab = np.where(mask, np.arange(1, h * w + 1).reshape(h, w), big)
    while True:
        p = np.pad(lab, 1, constant_values=big)
        nxt = lab.copy()
        for dy in range(3):
            for dx in range(3):
                nxt = np.minimum(nxt, p[dy:dy + h, dx:dx + w])
        nxt = np.where(mask, nxt, big)
        if np.array_equal(nxt, lab):
            break
        lab = nxt
    out = np.zeros((h, w), dtype=np.int64)
    if mask.any():
        # the surviving label is the component's first pixel in row-major order
        flat = lab[mask]
        out[mask] = np.searchsorted(np.unique(flat), flat) + 1
    return out


def nms(mag: np.ndarray, bins: np.ndarray) -> np.ndarray:
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    bins = np.ascontiguousarray(bins, dtype=np.int64)
    if USE_NUMBA:
        return nms_nb(mag, bins, _OFFSETS)
    return nms_np(mag, bins)


def hysteresis(nms_mag: np.ndarray, low: float, high: float) -> np.ndarray:
    nms_mag = np.ascontiguousarray(nms_mag, dtype=np.float64)
    if USE_NUMBA:
        return hysteresis_nb(nms_mag, float(low), float(high))
    return hysteresis_np(nms_mag, low, high)


def label_components(mask: np.ndarray) -> np.ndarray:
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if USE_NUMBA:
        return label_nb(mask)
    return label_np(mask)
