"""Training-free regional editing on top of the toy MM-DiT.

The source is inverted with its caption under full Canny control, caching
the ControlNet outputs; denoising then replays those outputs only outside the
editable mask, while the joint attention mask routes each local prompt to
its region. Point hints run a two-stage variant that swaps the soft mask for
a refined binary one partway through denoising.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import metrics
from .canny import canny_edges
from .errors import InvalidRequest, ShapeMismatch
from .flow import METHODS, ControlCache, Schedule, denoise, invert
from .imageio import Image
from .masks import (EPSILON, I2I_MODES, attention_bias, build_attention_mask, dilate, edit_layout,
                    global_layout, hint_support, pixel_mask_to_patch_mask, soft_mask_from_point)
from .mmdit import ControlSpec, Model, Recorder, control_features, velocity
from .train import from_flow_space, layout_tokens, params_digest, to_flow_space
from . import _kernels

TASKS = ("add", "replace", "remove")
CC_FLAGS = ("cc_from_current_pass", "no_cc", "full_cc")
PROMPT_FLAGS = ("local_prompt_only", "target_prompt_only")
REMOVAL_PROMPT = "empty background"


@dataclass(frozen=True)
class EditConfig:
    beta: float = 0.8
    guidance: float = 4.0
    n_steps: int = 50
    i2i_mode: str = "edit_bg_band"
    band_radius: int = 2
    t_refine: float = 0.3           # fraction of denoising steps run before refinement
    epsilon: float = EPSILON
    salient_k: int = 3
    method: str = "second_order"
    inversion_guidance: float = 1.0
    refine_threshold: float = 0.2   # mean abs pixel deviation per patch
    refine_bound: int = 4           # dilation of the hint support bounding the refined mask; 0 = unbounded
    intra_image_bias: bool = True   # stage 1 also biases image->image logits towards hinted keys
    cc_from_current_pass: bool = False
    no_cc: bool = False
    full_cc: bool = False
    local_prompt_only: bool = False
    target_prompt_only: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidRequest("invalid-request: beta must be >= 0")
        if self.guidance < 1 or self.inversion_guidance < 1:
            raise InvalidRequest("invalid-request: guidance must be >= 1")
        if not 0.0 < self.t_refine < 1.0:
            raise InvalidRequest("invalid-request: t_refine must lie in (0, 1)")
        if self.n_steps < 1 or self.salient_k < 1 or self.band_radius < 0 or self.refine_bound < 0:
            raise InvalidRequest("invalid-request: n_steps, salient_k >= 1 and radii >= 0 required")
        if self.i2i_mode not in I2I_MODES:
            raise InvalidRequest(f"invalid-request: unknown i2i_mode {self.i2i_mode!r}")
        if self.method not in METHODS:
            raise InvalidRequest(f"invalid-request: unknown method {self.method!r}")
        if self.epsilon <= 0:
            raise InvalidRequest("invalid-request: epsilon must be > 0")
        if sum(getattr(self, f) for f in CC_FLAGS) > 1 or sum(getattr(self, f) for f in PROMPT_FLAGS) > 1:
            raise InvalidRequest("invalid-request: ablation flags of one family are mutually exclusive")

    @property
    def variant(self) -> str:
        on = [f for f in CC_FLAGS + PROMPT_FLAGS if getattr(self, f)]
        return "+".join(on) if on else "selective"

    @classmethod
    def for_variant(cls, name: str, **kw) -> "EditConfig":
        if name == "selective":
            return cls(**kw)
        if name not in CC_FLAGS + PROMPT_FLAGS:
            raise InvalidRequest(f"invalid-request: unknown variant {name!r}")
        return cls(**{**kw, name: True})


@dataclass(frozen=True)
class EditRequest:
    """One edit. Give ``masks`` (pixel or patch masks) or ``points`` (normalised ``(x, y)``), one per local prompt."""

    task: str
    source_image: np.ndarray
    local_prompts: tuple[str, ...]
    source_prompt: str
    target_prompt: str
    masks: tuple | None = None
    points: tuple | None = None
    negative_prompt: str | None = None
    refine: bool = True
    config: EditConfig = field(default_factory=EditConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise InvalidRequest(f"invalid-request: unknown task {self.task!r}")
        if not self.local_prompts:
            raise InvalidRequest("invalid-request: at least one local prompt is required")
        if (self.masks is None) == (self.points is None):
            raise InvalidRequest("invalid-request: give exactly one of masks or points")
        hints = self.masks if self.masks is not None else self.points
        if len(hints) != len(self.local_prompts):
            raise InvalidRequest("invalid-request: one region hint per local prompt")
        if self.points is not None:
            if self.task != "add":
                raise InvalidRequest("invalid-request: point hints are only supported for add")
            if not self.refine:
                raise InvalidRequest("invalid-request: add with a point hint requires refinement")
        if self.task == "remove" and not self.negative_prompt:
            raise InvalidRequest("invalid-request: remove needs a negative prompt naming the object")


@dataclass
class EditReport:
    task: str
    variant: str
    config: dict
    seed: int
    checkpoint: str
    prompts: dict
    hints: list | None
    masks: list                    # final binary patch masks, one per region
    refine_step: int | None = None
    salient_points: list = field(default_factory=list)
    refine_fallback: list = field(default_factory=list)
    nfe: int = 0
    scores: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


# ---------------------------------------------------------------- small pieces

def removal_guidance(v_pos: np.ndarray, v_neg: np.ndarray, g: float) -> np.ndarray:
    """``v_neg + g * (v_pos - v_neg)``: steer away from the object named by the negative prompt."""
    v_pos, v_neg = np.asarray(v_pos, dtype=np.float64), np.asarray(v_neg, dtype=np.float64)
    if v_pos.shape != v_neg.shape:
        raise ShapeMismatch(f"shape-mismatch: {v_pos.shape} vs {v_neg.shape}")
    if g < 1:
        raise InvalidRequest("invalid-request: guidance must be >= 1")
    return v_neg + g * (v_pos - v_neg)


def cfg_guidance(v_cond: np.ndarray, v_uncond: np.ndarray, g: float) -> np.ndarray:
    return v_uncond + g * (v_cond - v_uncond)


def salient_points(attention, span: slice, k: int, grid: tuple[int, int]) -> list[tuple[int, int]]:
    """Top-``k`` patches ``(row, col)`` by mean attention to the ``span`` text keys.

    ``attention`` is a list of ``(block, weights)`` with weights ``(B, H, L, L)``;
    the mean runs over blocks, heads, batch and the span's tokens. Ties go
    to the lower row-major index.
    """
    if not attention:
        raise ValueError("empty-record: no attention maps recorded")
    n = grid[0] * grid[1]
    total = np.zeros(n)
    for _, w in attention:
        total += np.asarray(w)[..., :n, span].mean(axis=(0, 1, 3))
    salience = total / len(attention)
    order = np.argsort(-salience, kind="stable")[:k]
    return [(int(i) // grid[1], int(i) % grid[1]) for i in order]


class NoComponent(ValueError):
    pass


def patch_deviation(preview: np.ndarray, source: np.ndarray, patch: int) -> np.ndarray:
    d = np.abs(np.asarray(preview, dtype=np.float64) - np.asarray(source, dtype=np.float64))
    if d.ndim == 3:
        d = d.mean(axis=2)
    h, w = d.shape
    return d.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))


def refine_mask(preview: np.ndarray, source: np.ndarray, seeds, threshold: float, patch: int,
                bound: np.ndarray | None = None) -> np.ndarray:
    """Patches deviating from ``source`` by ``>= threshold``, restricted to the 8-connected
    components that contain a seed, then intersected with ``bound``.

    Stands in for a promptable segmenter: seed points in, object mask out.
    Raises ``NoComponent`` when nothing survives.
    """
    if preview.shape != source.shape:
        raise ShapeMismatch(f"size-mismatch: {preview.shape} vs {source.shape}")
    changed = patch_deviation(preview, source, patch) >= threshold
    labels = _kernels.label_components(changed)
    keep = {int(labels[r, c]) for r, c in seeds if changed[r, c]}
    out = np.isin(labels, list(keep)) & changed if keep else np.zeros_like(changed)
    if bound is not None:
        out &= bound
    if not out.any():
        raise NoComponent("no-component: no changed region contains a seed")
    return out


# ---------------------------------------------------------------- pipeline

@dataclass
class Branch:
    """Text conditioning for one velocity evaluation."""

    text: np.ndarray     # (1, Lt, d)
    roles: np.ndarray    # (1, Lt)
    allow: np.ndarray    # (L, L)
    bias: np.ndarray | None = None
    span_of: list = field(default_factory=list)   # local prompt slices into the joint sequence


Trace = Callable[[str, int, str, Recorder], None]


class Editor:
    """Holds a model's inference context; one instance may serve many requests."""

    def __init__(self, model: Model):
        self.model = model
        self.cfg = model.config
        self.vocab = model.vocab
        self.params = model.tensors()
        self.table = model.params["tok_emb"]
        self.digest = params_digest(model)
        self.nfe = 0

    # -- conditioning
    def branch(self, layout, prompts: list[str], mode: str = "blockdiag", bias=None) -> Branch:
        ids, roles = layout_tokens(layout, [self.vocab.tokenize(p) for p in prompts], self.vocab)
        spans = [s for s, p in zip(layout.prompt_slices(), layout.prompts) if p.role == "local"]
        return Branch(self.table[ids][None], roles[None], build_attention_mask(layout, mode), bias, spans)

    def global_branch(self, prompt: str) -> Branch:
        n = len(self.vocab.tokenize(prompt))
        return self.branch(global_layout(self.cfg.grid, n), [prompt])

    def tokens_for_control(self, prompt: str):
        ids = np.array(self.vocab.tokenize(prompt))
        roles = np.full((1, len(ids)), 2, dtype=np.int64)   # global role
        return self.table[ids][None], roles

    def evaluate(self, x: np.ndarray, t: float, br: Branch, control: ControlSpec | None,
                 recorder: Recorder | None = None) -> np.ndarray:
        self.nfe += 1
        return velocity(self.params, self.cfg, x, t, br.text, br.roles, br.allow, br.bias, control, recorder)

    def guided(self, x, t, cond: Branch, uncond: Branch, g: float, control, recorder=None,
               removal: bool = False) -> np.ndarray:
        v_c = self.evaluate(x, t, cond, control, recorder)
        if g == 1.0:
            return v_c
        v_u = self.evaluate(x, t, uncond, control)
        return removal_guidance(v_c, v_u, g) if removal else cfg_guidance(v_c, v_u, g)

    # -- inversion
    def invert(self, image: np.ndarray, prompt: str, config: EditConfig, edges: np.ndarray | None = None):
        """Invert ``image`` (pixel space) under full control; returns ``(x_T, cache, edges)``."""
        x0 = to_flow_space(np.asarray(image, dtype=np.float64))[None]
        if edges is None:
            edges = canny_edges(Image(image)).data
        e = np.asarray(edges, dtype=np.float64)[None]
        cond, uncond = self.global_branch(prompt), self.global_branch("")
        cn_text, cn_roles = self.tokens_for_control(prompt)
        cache = ControlCache()
        use_control = config.beta > 0

        def control_fn(x, t):
            return control_features(self.params, self.cfg, x, t, e, cn_text, cn_roles)

        def velocity_fn(x, t, key):
            spec = ControlSpec(config.beta, None, features=cache.features_at(key)) if use_control else None
            return self.guided(x, t, cond, uncond, config.inversion_guidance, spec)

        x_T, cache = invert(x0, Schedule(config.n_steps), velocity_fn, config.method,
                            control_fn if use_control else None, cache)
        cache.reads.clear()
        return x_T, cache, np.asarray(edges)

    def reconstruct(self, image: np.ndarray, prompt: str, config: EditConfig) -> np.ndarray:
        """Plain round trip: denoise the inversion with the same velocity function."""
        x_T, cache, _ = self.invert(image, prompt, config)
        cond, uncond = self.global_branch(prompt), self.global_branch("")
        use_control = config.beta > 0

        def velocity_fn(x, t, key):
            spec = ControlSpec(config.beta, None, features=cache.features_at(key)) if use_control else None
            return self.guided(x, t, cond, uncond, config.inversion_guidance, spec)

        x = denoise(x_T, Schedule(config.n_steps), velocity_fn, config.method)
        return from_flow_space(x[0])


@dataclass
class _Plan:
    """Resolved request: patch masks or soft masks, prompts, branches."""

    request: EditRequest
    source: np.ndarray
    masks: list
    softs: list | None = None


def _patch_masks(request: EditRequest, cfg) -> list[np.ndarray]:
    out = []
    h, w = request.source_image.shape[:2]
    for m in request.masks:
        m = np.asarray(m)
        if m.ndim == 3:
            m = m.any(axis=2)
        if m.shape == (h, w):
            m = pixel_mask_to_patch_mask(m, cfg.patch_size)
        elif m.shape != cfg.grid:
            raise InvalidRequest(f"invalid-request: mask shape {m.shape} fits neither image nor patch grid")
        out.append(m.astype(bool))
    return out


class _Run:
    """State of one edit: cached control, layouts for the current stage, and counters."""

    def __init__(self, editor: Editor, request: EditRequest, trace: Trace | None):
        self.ed, self.req, self.c = editor, request, request.config
        self.trace = trace
        self.grid = editor.cfg.grid
        self.source = np.asarray(request.source_image, dtype=np.float64)
        self.x_T, self.cache, self.edges = editor.invert(self.source, request.source_prompt, self.c)
        self.uncond = editor.global_branch("")
        self.cn_target = editor.tokens_for_control(request.target_prompt)
        self.last = None

    # -- layouts
    def _layout(self, regions: list[np.ndarray], locals_: list[str]):
        c, ed = self.c, self.ed
        band = c.band_radius if c.i2i_mode == "edit_bg_band" else 0
        lens = [len(ed.vocab.tokenize(p)) for p in locals_]
        bg_len = len(ed.vocab.tokenize(self.req.source_prompt))
        tg_len = len(ed.vocab.tokenize(self.req.target_prompt))
        if c.target_prompt_only:
            layout = edit_layout(self.grid, regions, [], None, tg_len, band)
            return layout, [self.req.target_prompt]
        if c.local_prompt_only:
            layout = edit_layout(self.grid, regions, lens, bg_len, None, band)
            return layout, list(locals_) + [self.req.source_prompt]
        layout = edit_layout(self.grid, regions, lens, bg_len, tg_len, band)
        return layout, list(locals_) + [self.req.source_prompt, self.req.target_prompt]

    def branches(self, regions, softs=None):
        """``(cond, other, removal)`` for the current regions; ``softs`` adds the log bias."""
        locals_ = list(self.req.local_prompts)
        if self.req.task == "remove":
            locals_ = [REMOVAL_PROMPT if p is None else p for p in locals_]
        layout, prompts = self._layout(regions, locals_)
        bias = None
        if softs is not None and not self.c.target_prompt_only:
            bias = attention_bias(layout, softs, self.c.epsilon, self.c.intra_image_bias)
        cond = self.ed.branch(layout, prompts, self.c.i2i_mode, bias)
        if self.req.task != "remove":
            return cond, self.uncond, False
        neg_layout, neg_prompts = self._layout(regions, [self.req.negative_prompt] * len(locals_))
        neg_bias = None if bias is None else attention_bias(neg_layout, softs, self.c.epsilon,
                                                            self.c.intra_image_bias)
        return cond, self.ed.branch(neg_layout, neg_prompts, self.c.i2i_mode, neg_bias), True

    # -- control
    def control(self, key: int, x: np.ndarray, t: float, editable: np.ndarray):
        c = self.c
        if c.no_cc or c.beta == 0:
            return None
        if c.cc_from_current_pass:
            text, roles = self.cn_target
            feats = control_features(self.ed.params, self.ed.cfg, x, t, self.edges[None].astype(np.float64),
                                     text, roles)
        else:
            feats = self.cache.features_at(key)
        gate = None if c.full_cc else editable.reshape(1, -1).astype(np.float64)
        return ControlSpec(c.beta, gate, features=feats)

    def velocity_fn(self, phase: str, cond: Branch, other: Branch, removal: bool, editable: np.ndarray):
        def fn(x, t, key):
            rec = Recorder()
            v = self.ed.guided(x, t, cond, other, self.c.guidance, self.control(key, x, t, editable), rec,
                               removal)
            self.last = (x, t, v, rec, cond)
            if self.trace is not None:
                self.trace(phase, key, "cond", rec)
            return v
        return fn


def _union(masks) -> np.ndarray:
    out = np.zeros_like(np.asarray(masks[0], dtype=bool))
    for m in masks:
        out |= np.asarray(m, dtype=bool)
    return out


def edit(model: Model | Editor, request: EditRequest, trace: Trace | None = None) -> tuple[Image, EditReport]:
    """Run one edit request end to end; ``trace(phase, key, branch, recorder)`` sees every denoising evaluation."""
    editor = model if isinstance(model, Editor) else Editor(model)
    request.validate()
    cfg = editor.cfg
    src = np.asarray(request.source_image.data if isinstance(request.source_image, Image)
                     else request.source_image, dtype=np.float64)
    if src.shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise InvalidRequest(f"invalid-request: source image {src.shape} does not match the model")
    request = replace(request, source_image=src)
    editor.nfe = 0
    run = _Run(editor, request, trace)
    c, schedule = request.config, Schedule(request.config.n_steps)
    report = EditReport(request.task, c.variant, asdict(c), request.seed, editor.digest,
                        {"local": list(request.local_prompts), "source": request.source_prompt,
                         "target": request.target_prompt, "negative": request.negative_prompt},
                        None if request.points is None else [list(map(float, p)) for p in request.points], [])

    if request.masks is not None:
        masks = _patch_masks(request, cfg)
        cond, other, removal = run.branches(masks)
        x = denoise(run.x_T, schedule, run.velocity_fn("edit", cond, other, removal, _union(masks)), c.method)
    else:
        x, masks = _two_stage(run, schedule, report)

    out = from_flow_space(x[0])
    report.masks = [m.astype(int).tolist() for m in masks]
    report.nfe = editor.nfe
    expected = None
    if request.task != "remove":
        try:
            expected = metrics.parse_class(request.local_prompts[0])
        except InvalidRequest:
            expected = None
    union = _union(masks)
    try:
        report.scores = metrics.proxy_scores(src, out, union, expected).as_dict()
    except InvalidRequest:
        report.scores = {}
    return Image(out), report


def refine_switch_step(config: EditConfig) -> int:
    """Step index ``k`` (state at ``t_k``) where refinement happens."""
    return config.n_steps - int(round(config.t_refine * config.n_steps))


def _two_stage(run: _Run, schedule: Schedule, report: EditReport):
    c, grid, patch = run.c, run.grid, run.ed.cfg.patch_size
    softs = [soft_mask_from_point(p, grid, c.epsilon) for p in run.req.points]
    supports = [hint_support(s) for s in softs]
    soft_gate = np.maximum.reduce(softs)
    cond, other, removal = run.branches(supports, softs)
    stage1 = run.velocity_fn("stage1", cond, other, removal, soft_gate)
    switch = refine_switch_step(c)
    if switch == c.n_steps:
        # nothing to denoise before refining: probe once at t = 1 for the preview and salience
        x_s, v_last = run.x_T, None
        stage1(run.x_T, 1.0, 2 * c.n_steps)
    else:
        x_s, v_last = denoise(run.x_T, schedule, stage1, c.method, stop_step=switch, return_velocity=True)
    x_eval, t_eval, v_eval, rec, br = run.last
    preview = from_flow_space((x_eval - t_eval * v_eval)[0])

    masks, points, fallback = [], [], []
    for i, (support, span) in enumerate(zip(supports, br.span_of or [None] * len(supports))):
        seeds = [] if span is None else salient_points(rec.attention, span, c.salient_k, grid)
        bound = dilate(support, c.refine_bound) if c.refine_bound else None
        try:
            m = refine_mask(preview, run.source, seeds, c.refine_threshold, patch, bound)
            fallback.append(False)
        except NoComponent:
            m = support.copy()
            fallback.append(True)
        masks.append(m)
        points.append([list(p) for p in seeds])
    report.refine_step = switch
    report.salient_points = points
    report.refine_fallback = fallback

    cond2, other2, removal2 = run.branches(masks)
    stage2 = run.velocity_fn("stage2", cond2, other2, removal2, _union(masks))
    if switch == 0:
        return x_s, masks
    x = denoise(x_s, schedule, stage2, c.method, start_step=switch, stop_step=0,
                v_init=v_last if switch < c.n_steps else None)
    return x, masks
