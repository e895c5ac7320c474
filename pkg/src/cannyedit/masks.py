"""Region masks, point-hint soft masks, and the joint attention-mask algebra.

Token order is fixed: all image patches first (row-major patch order), then
the prompt spans in layout order. Regions are sets of patch indices, so the
image block of the mask is assembled by membership rather than by position.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRequest

EPSILON = 1e-4
I2I_MODES = ("blockdiag", "edit_to_bg", "edit_bg_band")

EDIT, BACKGROUND, BAND = "edit", "background", "band"
LOCAL, BG_PROMPT, GLOBAL, PAD = "local", "background", "global", "pad"


# ---------------------------------------------------------------- patch masks

def pixel_mask_to_patch_mask(pixel_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """A patch is editable iff any pixel it covers is editable."""
    pm = np.asarray(pixel_mask).astype(bool)
    if pm.ndim == 3:
        pm = pm.any(axis=2)
    h, w = pm.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"dimension-mismatch: {h}x{w} not divisible by patch size {patch_size}")
    return pm.reshape(h // patch_size, patch_size, w // patch_size, patch_size).any(axis=(1, 3))


def patch_mask_to_pixels(mask: np.ndarray, patch_size: int) -> np.ndarray:
    return np.kron(np.asarray(mask, dtype=np.uint8), np.ones((patch_size, patch_size), dtype=np.uint8)).astype(bool)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1)x(2r+1) square, i.e. 8-connected steps."""
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    h, w = mask.shape
    p = np.pad(mask, radius)
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= p[dy:dy + h, dx:dx + w]
    return out


def boundary_band(edit: np.ndarray, radius: int = 2) -> np.ndarray:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    edit = np.asarray(edit, dtype=bool)
    return dilate(edit, radius) & ~edit


# ---------------------------------------------------------------- soft masks

def patch_centers(grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Normalised ``(x, y)`` of every patch centre, each ``(gh, gw)``."""
    gh, gw = grid
    ys, xs = np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij")
    return xs, ys


def soft_value(center, point) -> float:
    d = float(np.hypot(center[0] - point[0], center[1] - point[1]))
    return float(np.clip(1.0 - d, EPSILON, 1.0))


def soft_mask_from_point(point, grid: tuple[int, int], epsilon: float = EPSILON) -> np.ndarray:
    """``clamp(1 - ||centre - point||, eps, 1)`` with ``point = (x, y)`` in [0, 1]^2."""
    x, y = float(point[0]), float(point[1])
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"out-of-range-point: {point}")
    xs, ys = patch_centers(grid)
    return np.clip(1.0 - np.hypot(xs - x, ys - y), epsilon, 1.0)


def point_patch(point, grid: tuple[int, int]) -> tuple[int, int]:
    gh, gw = grid
    return min(int(point[1] * gh), gh - 1), min(int(point[0] * gw), gw - 1)


def hint_support(soft: np.ndarray, level: float = 0.5) -> np.ndarray:
    return np.asarray(soft) > level


def log_bias(soft: np.ndarray, epsilon: float = EPSILON) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return np.log(np.asarray(soft, dtype=np.float64) + epsilon)


# ---------------------------------------------------------------- layouts

@dataclass(frozen=True)
class Region:
    kind: str  # edit | background | band
    patches: tuple[int, ...]


@dataclass(frozen=True)
class PromptSpan:
    role: str  # local | background | global | pad
    length: int
    regions: tuple[int, ...] = ()  # region indices this prompt talks to (local/background)


@dataclass(frozen=True)
class TokenLayout:
    grid: tuple[int, int]
    regions: tuple[Region, ...]
    prompts: tuple[PromptSpan, ...]
    _check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self._check:
            self.validate()

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_text(self) -> int:
        return sum(p.length for p in self.prompts)

    @property
    def length(self) -> int:
        return self.n_patches + self.n_text

    def prompt_slices(self) -> list[slice]:
        out, start = [], self.n_patches
        for p in self.prompts:
            out.append(slice(start, start + p.length))
            start += p.length
        return out

    def region_of_patch(self) -> np.ndarray:
        lab = np.full(self.n_patches, -1, dtype=np.int64)
        for i, r in enumerate(self.regions):
            lab[list(r.patches)] = i
        return lab

    def region_mask(self, index: int) -> np.ndarray:
        m = np.zeros(self.n_patches, dtype=bool)
        m[list(self.regions[index].patches)] = True
        return m.reshape(self.grid)

    def validate(self) -> None:
        seen = np.zeros(self.n_patches, dtype=np.int64)
        for r in self.regions:
            if r.kind not in (EDIT, BACKGROUND, BAND):
                raise InvalidRequest(f"invalid-layout: region kind {r.kind!r}")
            idx = np.asarray(r.patches, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_patches):
                raise InvalidRequest("invalid-layout: patch index out of range")
            np.add.at(seen, idx, 1)
        if (seen > 1).any():
            raise InvalidRequest("invalid-layout: overlapping region spans")
        if (seen == 0).any():
            raise InvalidRequest("invalid-layout: regions do not cover the patch grid")
        for p in self.prompts:
            if p.length < 1:
                raise InvalidRequest("invalid-layout: empty prompt span")
            if p.role not in (LOCAL, BG_PROMPT, GLOBAL, PAD):
                raise InvalidRequest(f"invalid-layout: prompt role {p.role!r}")
            if any(i < 0 or i >= len(self.regions) for i in p.regions):
                raise InvalidRequest("invalid-layout: prompt refers to unknown region")


def global_layout(grid: tuple[int, int], n_global: int, pad: int = 0) -> TokenLayout:
    """One region covering the image and a single prompt seen by every patch."""
    n = grid[0] * grid[1]
    prompts = [PromptSpan(GLOBAL, n_global)]
    if pad:
        prompts.append(PromptSpan(PAD, pad))
    return TokenLayout(grid, (Region(BACKGROUND, tuple(range(n))),), tuple(prompts))


def edit_layout(grid: tuple[int, int], edit_masks, local_lengths, background_length: int | None,
                global_length: int | None, band_radius: int = 0, pad: int = 0) -> TokenLayout:
    """Regions ``[edit_1..edit_m, background, band]`` and prompts ``[T_1..T_m, T_bg, T_*, pad]``.

    Edit masks earlier in the list win where they overlap. The band (ring of
    background within ``band_radius`` of any edit region) is only created
    when ``band_radius > 0``. The background prompt covers background and band.
    """
    gh, gw = grid
    taken = np.zeros((gh, gw), dtype=bool)
    regions: list[Region] = []
    for m in edit_masks:
        m = np.asarray(m, dtype=bool) & ~taken
        taken |= m
        regions.append(Region(EDIT, tuple(np.flatnonzero(m.ravel()).tolist())))
    band = boundary_band(taken, band_radius) if band_radius > 0 else np.zeros_like(taken)
    bg = ~taken & ~band
    regions.append(Region(BACKGROUND, tuple(np.flatnonzero(bg.ravel()).tolist())))
    bg_regions = [len(regions) - 1]
    if band.any():
        regions.append(Region(BAND, tuple(np.flatnonzero(band.ravel()).tolist())))
        bg_regions.append(len(regions) - 1)
    prompts = [PromptSpan(LOCAL, n, (k,)) for k, n in enumerate(local_lengths)]
    if background_length:
        prompts.append(PromptSpan(BG_PROMPT, background_length, tuple(bg_regions)))
    if global_length:
        prompts.append(PromptSpan(GLOBAL, global_length))
    if pad:
        prompts.append(PromptSpan(PAD, pad))
    return TokenLayout(grid, tuple(regions), tuple(prompts))


# ---------------------------------------------------------------- attention mask

def _i2i_allowed(kind_q: str, kind_k: str, same: bool, mode: str) -> bool:
    if same:
        return True
    if mode == "blockdiag":
        # background and its band form one region when the band is not in play
        return {kind_q, kind_k} <= {BACKGROUND, BAND}
    if kind_q == EDIT:
        return kind_k in (BACKGROUND, BAND)
    if kind_q == BAND:
        return kind_k in (BACKGROUND, BAND) or (mode == "edit_bg_band" and kind_k == EDIT)
    return kind_k in (BACKGROUND, BAND)


def build_attention_mask(layout: TokenLayout, i2i_mode: str = "edit_bg_band") -> np.ndarray:
    """Boolean ``(L, L)`` allow-matrix (row = query, column = key)."""
    if i2i_mode not in I2I_MODES:
        raise ValueError(f"unknown i2i mode {i2i_mode!r}")
    layout.validate()
    n, L = layout.n_patches, layout.length
    allow = np.zeros((L, L), dtype=bool)
    lab = layout.region_of_patch()
    kinds = [r.kind for r in layout.regions]
    r_count = len(layout.regions)
    region_allow = np.array([[_i2i_allowed(kinds[a], kinds[b], a == b, i2i_mode)
                              for b in range(r_count)] for a in range(r_count)], dtype=bool)
    allow[:n, :n] = region_allow[lab[:, None], lab[None, :]]

    for span, p in zip(layout.prompt_slices(), layout.prompts):
        if p.role == PAD:
            idx = np.arange(span.start, span.stop)
            allow[idx, idx] = True
            continue
        allow[span, span] = True
        if p.role == GLOBAL:
            cols = np.ones(n, dtype=bool)
        else:
            cols = np.isin(lab, p.regions)
        allow[span, :n] = cols[None, :]
        allow[:n, span] = cols[:, None]
    return allow


def attention_bias(layout: TokenLayout, soft, epsilon: float = EPSILON,
                   intra_image: bool = True, level: float = 0.5) -> np.ndarray:
    """Additive ``(L, L)`` logits for the point-hint stage.

    ``soft`` is one ``(gh, gw)`` soft mask shared by all local prompts, or a
    sequence with one mask per local prompt (layout order). Image queries get
    ``log(E_q + eps)`` on the keys of their local prompt. With
    ``intra_image``, every image query also gets ``log(E_k + eps)`` on the
    image keys whose ``E_k`` exceeds ``level``.
    """
    L, n = layout.length, layout.n_patches
    locals_ = [(span, p) for span, p in zip(layout.prompt_slices(), layout.prompts) if p.role == LOCAL]
    softs = [soft] * len(locals_) if np.ndim(soft) == 2 else list(soft)
    if len(softs) != len(locals_):
        raise ValueError(f"{len(softs)} soft masks for {len(locals_)} local prompts")
    bias = np.zeros((L, L))
    for (span, _), s in zip(locals_, softs):
        lb = log_bias(np.asarray(s, dtype=np.float64).reshape(-1), epsilon)
        bias[:n, span] += lb[:, None]
    if intra_image:
        for s in (softs if softs else [soft]):
            e = np.asarray(s, dtype=np.float64).reshape(-1)
            keys = np.flatnonzero(e > level)
            bias[:n, keys] += log_bias(e[keys], epsilon)[None, :]
    return bias
