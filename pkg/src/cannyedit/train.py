"""Synthetic shape corpus and rectified-flow training with plain clipped SGD."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .canny import canny_edges
from .errors import NonFinite
from .imageio import Image
from .masks import (BG_PROMPT, GLOBAL, I2I_MODES, LOCAL, PAD, TokenLayout, build_attention_mask,
                    dilate, edit_layout, global_layout, pixel_mask_to_patch_mask)
from .mmdit import (ROLE_INDEX, ControlSpec, Model, controlnet_forward, embed_text, image_tokens,
                    patchify, time_embedding, velocity)
from .text import COLORS, SHAPES, Vocabulary

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
BACKGROUNDS = (0.0, 0.1, 0.2)
MIN_SIZE, MAX_SIZE = 8, 12


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True)
class ShapeRecord:
    shape: str
    color: str
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0

    @property
    def label(self) -> str:
        return f"{self.color} {self.shape}"


def shape_mask(shape: str, bbox, size: int = IMAGE_SIZE) -> np.ndarray:
    """Pixel coverage of ``shape`` inscribed in ``bbox`` (pixel centres test)."""
    x0, y0, x1, y1 = bbox
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if shape == "square":
        return inside
    if shape == "circle":
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        r = min(x1 - x0, y1 - y0) / 2.0
        return inside & ((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r)
    if shape == "triangle":
        cx = (x0 + x1) / 2.0
        half = (x1 - x0) / 2.0
        frac = (ys - y0) / max(y1 - y0, 1e-9)
        return inside & (np.abs(xs - cx) <= half * frac)
    raise ValueError(f"unknown shape {shape!r}")


def render(shapes, background: float = 0.0, size: int = IMAGE_SIZE) -> np.ndarray:
    img = np.full((size, size, 3), background)
    for s in shapes:
        img[shape_mask(s.shape, s.bbox, size)] = PALETTE[s.color]
    return img


def position_word(rec: ShapeRecord, size: int = IMAGE_SIZE) -> str:
    cx, cy = rec.center
    dx, dy = cx - size / 2.0, cy - size / 2.0
    if max(abs(dx), abs(dy)) < size / 8.0:
        return "center"
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "top" if dy < 0 else "bottom"


def clause(rec: ShapeRecord) -> str:
    return f"{rec.color} {rec.shape} {position_word(rec)}"


def caption(shapes) -> str:
    return " and ".join(clause(s) for s in shapes) if shapes else "empty background"


@dataclass
class ShapeSample:
    image: np.ndarray            # (32, 32, 3) in [0, 1]
    caption: str
    shapes: tuple[ShapeRecord, ...]
    background: float
    edges: np.ndarray = field(repr=False)   # (32, 32) uint8 Canny map


def _overlaps(a, b, margin: int = 2) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def random_bbox(rng: np.random.Generator, taken=(), size: int = IMAGE_SIZE, tries: int = 200):
    for _ in range(tries):
        s = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
        x0 = int(rng.integers(1, size - s))
        y0 = int(rng.integers(1, size - s))
        box = (x0, y0, x0 + s, y0 + s)
        if all(not _overlaps(box, t) for t in taken):
            return box
    return None


def make_sample(rng: np.random.Generator, n_shapes: int | None = None) -> ShapeSample:
    n_shapes = int(rng.integers(1, 3)) if n_shapes is None else n_shapes
    background = float(BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))])
    shapes: list[ShapeRecord] = []
    for _ in range(n_shapes):
        box = random_bbox(rng, [s.bbox for s in shapes])
        if box is None:
            break
        shapes.append(ShapeRecord(SHAPES[int(rng.integers(3))], COLORS[int(rng.integers(6))], box))
    img = render(shapes, background)
    edges = canny_edges(Image(img)).data
    return ShapeSample(img, caption(shapes), tuple(shapes), background, edges)


def gen_dataset(n: int, seed: int) -> list[ShapeSample]:
    rng = np.random.default_rng(seed)
    return [make_sample(rng) for _ in range(n)]


def load_or_gen_dataset(n: int, seed: int, cache_dir=None) -> list[ShapeSample]:
    """Dataset memoised on disk under ``cache_dir`` keyed by ``(n, seed)``."""
    if cache_dir is None:
        return gen_dataset(n, seed)
    path = Path(cache_dir) / f"shapes_n{n}_s{seed}.npz"
    if path.exists():
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            images, edges = z["images"], z["edges"]
        out = []
        for i, m in enumerate(meta):
            recs = tuple(ShapeRecord(s, c, tuple(b)) for s, c, b in m["shapes"])
            out.append(ShapeSample(images[i], m["caption"], recs, m["background"], edges[i]))
        return out
    data = gen_dataset(n, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = [{"caption": s.caption, "background": s.background,
             "shapes": [[r.shape, r.color, list(r.bbox)] for r in s.shapes]} for s in data]
    np.savez(path, images=np.stack([s.image for s in data]), edges=np.stack([s.edges for s in data]),
             meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    return data


def to_flow_space(images: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(images, dtype=np.float64) - 1.0


def from_flow_space(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------- conditioning

@dataclass
class Conditioning:
    """Everything besides ``(x_t, t)`` one forward pass needs, for a batch."""

    text: np.ndarray              # (B, Lt) token ids
    roles: np.ndarray             # (B, Lt) role indices
    allow: np.ndarray | None      # (B, L, L)
    bias: np.ndarray | None = None
    control: ControlSpec | None = None


def bbox_patch_mask(bbox, patch: int, size: int = IMAGE_SIZE) -> np.ndarray:
    pm = np.zeros((size, size), dtype=bool)
    x0, y0, x1, y1 = bbox
    pm[y0:y1, x0:x1] = True
    return pixel_mask_to_patch_mask(pm, patch)


def layout_tokens(layout: TokenLayout, prompts: list[list[int]], vocab: Vocabulary):
    """Flatten prompt id lists into ``(ids, roles)`` following the layout's spans."""
    ids, roles = [], []
    it = iter(prompts)
    for span in layout.prompts:
        if span.role == PAD:
            ids += [vocab.pad_id] * span.length
            roles += [ROLE_INDEX["pad"]] * span.length
        else:
            p = next(it)
            assert len(p) == span.length
            ids += p
            roles += [ROLE_INDEX[{LOCAL: "local", BG_PROMPT: "background", GLOBAL: "global"}[span.role]]] * span.length
    return np.array(ids, dtype=np.int64), np.array(roles, dtype=np.int64)


def _empty_region(rng, sample: ShapeSample, grid, patch) -> np.ndarray | None:
    gh, gw = grid
    occupied = np.zeros(grid, dtype=bool)
    for s in sample.shapes:
        occupied |= bbox_patch_mask(s.bbox, patch)
    for _ in range(30):
        h, w = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        r, c = int(rng.integers(0, gh - h + 1)), int(rng.integers(0, gw - w + 1))
        m = np.zeros(grid, dtype=bool)
        m[r:r + h, c:c + w] = True
        if not (m & occupied).any():
            return m
    return None


def training_example(rng: np.random.Generator, sample: ShapeSample, model: Model, p_uncond: float = 0.1):
    """Draw a random prompt/region/control configuration for one sample.

    Returns ``(layout, prompt id lists, i2i mode, edit region or None)``.
    Regional configurations mirror what the editor builds: a shape (or an
    empty patch of background) as the edit region with its own clause, the
    remaining caption as background prompt, and the full caption as global
    prompt.
    """
    cfg, vocab = model.config, model.vocab
    grid, patch = cfg.grid, cfg.patch_size
    u = rng.random()
    if u < p_uncond:
        layout = global_layout(grid, 1)
        return layout, [[vocab.empty_id]], "blockdiag", None
    full = vocab.tokenize(sample.caption)
    u = rng.random()
    if u < 0.3 or not sample.shapes and u < 0.6:
        return global_layout(grid, len(full)), [full], "blockdiag", None
    mode = I2I_MODES[int(rng.integers(3))]
    band = int(rng.integers(1, 3)) if mode == "edit_bg_band" else 0
    if u < 0.8 and sample.shapes:
        k = int(rng.integers(len(sample.shapes)))
        region = bbox_patch_mask(sample.shapes[k].bbox, patch)
        local = vocab.tokenize(clause(sample.shapes[k]))
        rest = [s for i, s in enumerate(sample.shapes) if i != k]
        bg = vocab.tokenize(caption(rest))
    else:
        region = _empty_region(rng, sample, grid, patch)
        if region is None:
            return global_layout(grid, len(full)), [full], "blockdiag", None
        local = vocab.tokenize("empty background")
        bg = full
    layout = edit_layout(grid, [region], [len(local)], len(bg), len(full), band)
    return layout, [local, bg, full], mode, region


def _pad_layout(layout: TokenLayout, pad: int) -> TokenLayout:
    if pad == 0:
        return layout
    from .masks import PromptSpan
    return TokenLayout(layout.grid, layout.regions, layout.prompts + (PromptSpan(PAD, pad),))


def make_batch(rng: np.random.Generator, samples: list[ShapeSample], model: Model, beta_range=(0.6, 1.0)):
    """Sample per-example conditioning and assemble a padded batch."""
    vocab = model.vocab
    drafts = [training_example(rng, s, model) for s in samples]
    max_text = max(d[0].n_text for d in drafts)
    ids, roles, allows, editable, betas = [], [], [], [], []
    cn_ids, cn_roles = [], []
    n = model.config.n_patches
    cn_len = max(len(vocab.tokenize(s.caption)) for s in samples)
    for s, (layout, prompts, mode, region) in zip(samples, drafts):
        layout = _pad_layout(layout, max_text - layout.n_text)
        i, r = layout_tokens(layout, prompts, vocab)
        ids.append(i)
        roles.append(r)
        allows.append(build_attention_mask(layout, mode))
        c = vocab.tokenize(s.caption)
        cn_ids.append(c + [vocab.pad_id] * (cn_len - len(c)))
        cn_roles.append([ROLE_INDEX["global"]] * len(c) + [ROLE_INDEX["pad"]] * (cn_len - len(c)))
        u = rng.random()
        if u < 0.3:
            betas.append(0.0)
            editable.append(np.zeros(n))
        elif u < 0.65 or region is None:
            betas.append(float(rng.uniform(*beta_range)))
            editable.append(np.zeros(n))
        else:
            betas.append(float(rng.uniform(*beta_range)))
            editable.append(region.reshape(-1).astype(np.float64))
    cn_allow_len = n + cn_len
    # ControlNet text padding must not be attended
    cn_allow = np.ones((len(samples), cn_allow_len, cn_allow_len), dtype=bool)
    for b, r in enumerate(cn_roles):
        pads = np.flatnonzero(np.array(r) == ROLE_INDEX["pad"]) + n
        cn_allow[b, :, pads] = False
        cn_allow[b, pads, :] = False
        cn_allow[b, pads, pads] = True
    return {
        "ids": np.stack(ids), "roles": np.stack(roles), "allow": np.stack(allows),
        "editable": np.stack(editable), "beta": np.array(betas),
        "cn_ids": np.array(cn_ids, dtype=np.int64), "cn_roles": np.array(cn_roles, dtype=np.int64),
        "cn_allow": cn_allow,
        "edges": np.stack([s.edges for s in samples]),
        "x0": to_flow_space(np.stack([s.image for s in samples])),
    }


# ---------------------------------------------------------------- loss / training

def rf_loss(model: Model, params, batch: dict, t: np.ndarray, noise: np.ndarray):
    """Conditional flow matching: MSE between predicted and straight-line velocity."""
    cfg = model.config
    x0 = batch["x0"]
    tt = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1, 1)
    x_t = (1.0 - tt) * x0 + tt * noise
    target = patchify(noise - x0, cfg.patch_size)
    text = nx.take(params["tok_emb"], batch["ids"])
    control = None
    if batch["beta"].any():
        # per-sample beta folds into the gate; beta == 0 rows get a zero gate
        gate = 1.0 - batch["editable"]
        eff = batch["beta"][:, None] * gate
        cn_text = nx.take(params["tok_emb"], batch["cn_ids"])
        t_emb = time_embedding(params, cfg, np.asarray(t).reshape(-1))
        img = image_tokens(params, cfg, x_t)
        cn_txt = embed_text(params, cn_text, batch["cn_roles"])
        feats = controlnet_forward(params, cfg, img, batch["edges"], cn_txt, t_emb, batch["cn_allow"])
        control = ControlSpec(beta=1.0, editable=1.0 - eff, features=feats)
    pred = velocity(params, cfg, x_t, t, text, batch["roles"], allow=batch["allow"], control=control,
                    return_tokens=True)
    diff = nx.sub(pred, nx.tensor(target))
    return nx.mean(nx.mul(diff, diff))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 0.3
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    seconds: float


def train(model: Model, dataset: list[ShapeSample], config: TrainConfig, checkpoint_path=None,
          on_log=None) -> TrainResult:
    """Clipped SGD on ``rf_loss``; returns a new model (the input is not modified)."""
    from .mmdit import save_checkpoint
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    losses: list[float] = []
    start = time.perf_counter()
    for step in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        batch = make_batch(rng, [dataset[i] for i in idx], model)
        t = rng.uniform(0.0, 1.0, size=config.batch_size)
        noise = rng.standard_normal(batch["x0"].shape)
        params = model.tensors(requires_grad=True)
        with nx.Graph():
            loss = rf_loss(model, params, batch, t, noise)
            nx.backward(loss)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFinite(f"non-finite-loss at step {step}: {value}")
        grads = {k: v.grad for k, v in params.items() if v.grad is not None}
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if not math.isfinite(norm):
            raise NonFinite(f"non-finite gradient norm at step {step}")
        factor = config.learning_rate * min(1.0, config.clip_norm / max(norm, 1e-12))
        for k, g in grads.items():
            model.params[k] = model.params[k] - factor * g
        losses.append(value)
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = float(np.mean(losses[-config.log_every:]))
            log.info("step %d loss %.4f |g| %.3f", step + 1, recent, norm)
            if on_log is not None:
                on_log(step + 1, recent)
        if checkpoint_path and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path, {"train": asdict(config), "step": step + 1})
    return TrainResult(model, losses, time.perf_counter() - start)


def params_digest(model: Model) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- evaluation tasks

@dataclass(frozen=True)
class AddTask:
    """A seeded 'add one shape into an empty region' task with its ground truth."""

    seed: int
    sample: ShapeSample
    region: np.ndarray          # (gh, gw) patch mask of the empty region to fill
    target: ShapeRecord         # what an ideal edit would draw
    local_prompt: str
    target_prompt: str

    @property
    def expected_class(self) -> str:
        return self.target.label

    @property
    def centroid(self) -> tuple[float, float]:
        """Normalised ``(x, y)`` centre of the region's patches."""
        rows, cols = np.nonzero(self.region)
        gh, gw = self.region.shape
        return float((cols.mean() + 0.5) / gw), float((rows.mean() + 0.5) / gh)


def add_task(seed: int, patch: int = 4, region_patches: int = 3, size: int = IMAGE_SIZE) -> AddTask:
    """One-shape source plus an empty ``region_patches``-square region away from it."""
    rng = np.random.default_rng([seed, 7919])
    grid = size // patch
    for _ in range(100):
        sample = make_sample(rng, n_shapes=1)
        occupied = np.zeros((grid, grid), dtype=bool)
        for s in sample.shapes:
            occupied |= dilate(bbox_patch_mask(s.bbox, patch, size), 1)
        spots = [(r, c) for r in range(grid - region_patches + 1) for c in range(grid - region_patches + 1)
                 if not occupied[r:r + region_patches, c:c + region_patches].any()]
        if spots:
            break
    else:
        raise RuntimeError("could not place an empty region")
    r, c = spots[int(rng.integers(len(spots)))]
    region = np.zeros((grid, grid), dtype=bool)
    region[r:r + region_patches, c:c + region_patches] = True
    side = region_patches * patch - 2
    x0, y0 = c * patch + 1, r * patch + 1
    target = ShapeRecord(SHAPES[int(rng.integers(3))], COLORS[int(rng.integers(len(COLORS)))],
                         (x0, y0, x0 + side, y0 + side))
    return AddTask(seed, sample, region, target, clause(target), caption(sample.shapes + (target,)))
