"""Toy multi-modal DiT with a two-block ControlNet, built on :mod:`numerics`.

Image tokens are pixel patches (no VAE). Sequences are always laid out as
``[image patches | text tokens]`` and attention runs over the concatenation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import IOFailure, ShapeMismatch
from .numerics import Tensor
from .text import ROLES, Vocabulary

CHECKPOINT_VERSION = 1
ROLE_INDEX = {"local": 0, "negative": 0, "background": 1, "global": 2, "pad": 3}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    heads: int = 4
    multi_stream_blocks: int = 4
    single_stream_blocks: int = 2
    controlnet_blocks: int = 2
    mlp_ratio: int = 2
    time_features: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.controlnet_blocks != 2:
            raise ValueError("the ControlNet duplicates exactly two multi-stream blocks")
        if self.multi_stream_blocks < 2:
            raise ValueError("need at least two multi-stream blocks to mirror in the ControlNet")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def injection_source(self, block: int) -> int:
        """ControlNet block feeding main multi-stream block ``block`` (round robin)."""
        return block % self.controlnet_blocks


# ---------------------------------------------------------------- parameters

def _stream_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("wq", "wk", "wv", "wo", "bo", "w1", "b1", "w2", "b2")]


def _block_shapes(cfg: ModelConfig, prefix: str) -> dict[str, tuple[int, ...]]:
    d, hdim = cfg.dim, cfg.dim * cfg.mlp_ratio
    shapes = {}
    for name in _stream_names(prefix):
        key = name.rsplit(".", 1)[1]
        shapes[name] = {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "bo": (d,),
            "w1": (d, hdim), "b1": (hdim,), "w2": (hdim, d), "b2": (d,),
        }[key]
    return shapes


def param_shapes(cfg: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (vocab_size, d),
        "role_emb": (len(ROLE_INDEX) - 1, d),
        "patch_w": (cfg.patch_dim, d), "patch_b": (d,),
        "pos_emb": (cfg.n_patches, d),
        "time_w1": (2 * cfg.time_features, d), "time_b1": (d,),
        "time_w2": (d, d), "time_b2": (d,),
        "out_w": (d, cfg.patch_dim), "out_b": (cfg.patch_dim,),
        "canny_w": (cfg.patch_size * cfg.patch_size, d), "canny_b": (d,),
    }
    for j in range(cfg.multi_stream_blocks):
        shapes.update(_block_shapes(cfg, f"ms{j}.img"))
        shapes.update(_block_shapes(cfg, f"ms{j}.txt"))
        shapes[f"inject{j}.w"] = (d, d)
        shapes[f"inject{j}.b"] = (d,)
    for j in range(cfg.single_stream_blocks):
        shapes.update(_block_shapes(cfg, f"ss{j}"))
    for k in range(cfg.controlnet_blocks):
        shapes.update(_block_shapes(cfg, f"cn{k}.img"))
        shapes.update(_block_shapes(cfg, f"cn{k}.txt"))
    return shapes


def init_params(cfg: ModelConfig, vocab: Vocabulary) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg, len(vocab)).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "tok_emb":
            params[name] = vocab.init_table(cfg.dim, cfg.seed + 1)
        elif name in ("role_emb", "pos_emb"):
            params[name] = rng.normal(0.0, 0.5, size=shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name.startswith("inject") or name == "out_w":
            params[name] = np.zeros(shape)  # ControlNet-style zero init
        else:
            std = 1.0 / math.sqrt(shape[0])
            if leaf in ("wo", "w2"):
                std *= 0.5
            params[name] = rng.normal(0.0, std, size=shape)
    return params


@dataclass
class Model:
    config: ModelConfig
    vocab: Vocabulary
    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, config: ModelConfig | None = None, vocab: Vocabulary | None = None) -> "Model":
        config = config or ModelConfig()
        vocab = vocab or Vocabulary()
        return cls(config, vocab, init_params(config, vocab))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.params.items()}

    def copy(self) -> "Model":
        return Model(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()})


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": model.vocab.words,
        "extra": extra or {},
    }
    arrays = {f"p/{k}": v for k, v in model.params.items()}
    try:
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                     **arrays)
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise IOFailure(f"missing-checkpoint: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise IOFailure(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
    vocab = Vocabulary()
    vocab.words = list(meta["vocab"])
    vocab.index = {w: i for i, w in enumerate(vocab.words)}
    return Model(ModelConfig(**meta["config"]), vocab, params), meta.get("extra", {})


# ---------------------------------------------------------------- patching

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, n_patches, patch*patch*C)``."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: np.ndarray, patch: int, size: int, channels: int) -> np.ndarray:
    b = tokens.shape[0]
    g = size // patch
    x = tokens.reshape(b, g, g, patch, patch, channels)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, size, size, channels)


def timestep_features(t: np.ndarray, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.exp(-math.log(1000.0) * np.arange(n) / n)
    arg = 1000.0 * t * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


# ---------------------------------------------------------------- building blocks

@dataclass
class Recorder:
    """Instrumentation sink for attention maps and control injections."""

    attention: list = field(default_factory=list)    # (block, weights (B,H,L,L))
    injections: list = field(default_factory=list)   # (block, before, after, weights)
    keep_attention: bool = True

    def on_attention(self, block: str, weights: np.ndarray) -> None:
        if self.keep_attention:
            self.attention.append((block, weights))

    def on_injection(self, block: int, before: np.ndarray, after: np.ndarray, weights: np.ndarray) -> None:
        self.injections.append((block, before, after, weights))


def _lin(p, prefix, x, w, b=None):
    return nx.linear(x, p[f"{prefix}.{w}"], p[f"{prefix}.{b}"] if b else None)


def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, h * dk))


def joint_attention(q_img: Tensor, q_txt: Tensor, k_img: Tensor, k_txt: Tensor, v_img: Tensor,
                    v_txt: Tensor, heads: int, allow: np.ndarray | None = None,
                    bias: np.ndarray | None = None, record: Callable | None = None) -> tuple[Tensor, Tensor]:
    """Masked softmax attention over ``[image; text]``; returns per-stream outputs (pre-projection).

    ``allow``/``bias`` are ``(L, L)`` or ``(B, L, L)`` constants.
    """
    n_img = q_img.shape[1]
    if q_img.shape != k_img.shape or q_img.shape != v_img.shape or q_txt.shape != k_txt.shape \
            or q_txt.shape != v_txt.shape:
        raise ShapeMismatch("joint_attention: q/k/v stream shapes differ")
    q = _heads(nx.concat([q_img, q_txt], axis=1), heads)
    k = _heads(nx.concat([k_img, k_txt], axis=1), heads)
    v = _heads(nx.concat([v_img, v_txt], axis=1), heads)
    dk = q.shape[-1]
    logits = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    a4 = None if allow is None else (allow[:, None] if allow.ndim == 3 else allow[None, None])
    b4 = None if bias is None else (bias[:, None] if bias.ndim == 3 else bias[None, None])
    w = nx.softmax(logits, axis=-1, allow=a4, bias=b4)
    if record is not None:
        record(w.data)
    z = _merge(nx.matmul(w, v))
    L = z.shape[1]
    return nx.take(z, (slice(None), slice(0, n_img))), nx.take(z, (slice(None), slice(n_img, L)))


def _mlp(p, prefix, x):
    h = nx.gelu(_lin(p, prefix, nx.layer_norm(x), "w1", "b1"))
    return _lin(p, prefix, h, "w2", "b2")


def _add_time(x: Tensor, t_emb: Tensor) -> Tensor:
    b, n, d = x.shape
    return nx.add(x, nx.expand(nx.reshape(t_emb, (b, 1, d)), (b, n, d)))


def multi_stream_block(p, prefix: str, img: Tensor, txt: Tensor, t_emb: Tensor, heads: int,
                       allow=None, bias=None, record=None) -> tuple[Tensor, Tensor]:
    """Separate image/text projections, joint attention, per-stream MLPs, residuals."""
    img = _add_time(img, t_emb)
    txt = _add_time(txt, t_emb)
    hi, ht = nx.layer_norm(img), nx.layer_norm(txt)
    pi, pt = f"{prefix}.img", f"{prefix}.txt"
    zi, zt = joint_attention(
        _lin(p, pi, hi, "wq"), _lin(p, pt, ht, "wq"),
        _lin(p, pi, hi, "wk"), _lin(p, pt, ht, "wk"),
        _lin(p, pi, hi, "wv"), _lin(p, pt, ht, "wv"),
        heads, allow, bias, record)
    img = nx.add(img, _lin(p, pi, zi, "wo", "bo"))
    txt = nx.add(txt, _lin(p, pt, zt, "wo", "bo"))
    img = nx.add(img, _mlp(p, pi, img))
    txt = nx.add(txt, _mlp(p, pt, txt))
    return img, txt


def single_stream_block(p, prefix: str, img: Tensor, txt: Tensor, t_emb: Tensor, heads: int,
                        allow=None, bias=None, record=None) -> tuple[Tensor, Tensor]:
    """Shared projections for both modalities."""
    n_img = img.shape[1]
    x = _add_time(nx.concat([img, txt], axis=1), t_emb)
    h = nx.layer_norm(x)
    q, k, v = _lin(p, prefix, h, "wq"), _lin(p, prefix, h, "wk"), _lin(p, prefix, h, "wv")
    L = x.shape[1]
    sl_i, sl_t = (slice(None), slice(0, n_img)), (slice(None), slice(n_img, L))
    zi, zt = joint_attention(nx.take(q, sl_i), nx.take(q, sl_t), nx.take(k, sl_i), nx.take(k, sl_t),
                             nx.take(v, sl_i), nx.take(v, sl_t), heads, allow, bias, record)
    x = nx.add(x, _lin(p, prefix, nx.concat([zi, zt], axis=1), "wo", "bo"))
    x = nx.add(x, _mlp(p, prefix, x))
    return nx.take(x, sl_i), nx.take(x, sl_t)


def gated_add(z: Tensor, c: Tensor, weights: np.ndarray) -> Tensor:
    """``z + weights[..., None] * c``; rows with zero weight are copied bit for bit."""
    if z.shape != c.shape:
        raise ShapeMismatch(f"gated_add: {z.shape} vs {c.shape}")
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape[:-1])
    active = w != 0.0
    out = z.data.copy()
    out[active] = z.data[active] + w[active][:, None] * c.data[active]
    wexp = w[..., None]
    return nx._make(out, (z, c), lambda g: (g, g * wexp))


def combine_control(z_img: Tensor, control: Tensor, beta: float, proj_w: Tensor, proj_b: Tensor,
                    editable: np.ndarray | None = None) -> Tensor:
    """``Z + beta * (1 - E) * proj(Z')`` with patches where ``E == 1`` left untouched.

    ``editable`` is a per-patch ``(n,)`` or ``(B, n)`` array: binary ``E`` or a
    soft mask in [0, 1]; ``None`` applies control everywhere.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if z_img.shape != control.shape:
        raise ShapeMismatch(f"combine_control: {z_img.shape} vs {control.shape}")
    gate = np.ones(z_img.shape[:-1]) if editable is None else \
        np.broadcast_to(1.0 - np.asarray(editable, dtype=np.float64), z_img.shape[:-1])
    weights = beta * gate
    if not weights.any():
        return z_img
    return gated_add(z_img, nx.linear(control, proj_w, proj_b), weights)


# ---------------------------------------------------------------- full forward

@dataclass
class ControlSpec:
    """How ControlNet features enter the main stream for one forward pass.

    Either ``features`` (one ``(B, n, d)`` array per ControlNet block, e.g.
    from a cache) or ``edges`` + ``text`` to run the ControlNet now.
    """

    beta: float = 0.8
    editable: np.ndarray | None = None
    features: list | None = None
    edges: np.ndarray | None = None        # (B, H, W) in {0, 1}
    text: np.ndarray | None = None         # (B, Lc, d) ControlNet prompt embeddings
    text_roles: np.ndarray | None = None


def embed_text(p, emb, roles: np.ndarray) -> Tensor:
    """Token embeddings plus a learned role vector per token."""
    emb = emb if isinstance(emb, Tensor) else Tensor(emb)
    b, n, d = emb.shape
    role_rows = nx.take(p["role_emb"], np.asarray(roles, dtype=np.int64).reshape(-1))
    return nx.add(emb, nx.reshape(role_rows, (b, n, d)))


def time_embedding(p, cfg: ModelConfig, t: np.ndarray) -> Tensor:
    feats = Tensor(timestep_features(t, cfg.time_features))
    h = nx.gelu(nx.linear(feats, p["time_w1"], p["time_b1"]))
    return nx.linear(h, p["time_w2"], p["time_b2"])


def image_tokens(p, cfg: ModelConfig, x: np.ndarray | Tensor) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(patchify(np.asarray(x), cfg.patch_size))
    b = xt.shape[0]
    h = nx.linear(xt, p["patch_w"], p["patch_b"])
    return nx.add(h, nx.expand(p["pos_emb"], (b, cfg.n_patches, cfg.dim)))


def canny_tokens(p, cfg: ModelConfig, edges: np.ndarray) -> Tensor:
    e = np.asarray(edges, dtype=np.float64)[..., None]
    tok = Tensor(patchify(e, cfg.patch_size))
    return nx.linear(tok, p["canny_w"], p["canny_b"])


def controlnet_forward(p, cfg: ModelConfig, img_tokens: Tensor, edges: np.ndarray, txt: Tensor,
                       t_emb: Tensor, allow: np.ndarray | None = None) -> list[Tensor]:
    """Run the two duplicated blocks on ``img_tokens + canny embedding``; return per-block image outputs."""
    ce = canny_tokens(p, cfg, edges)
    if ce.shape != img_tokens.shape:
        raise ShapeMismatch(f"grid-mismatch: canny tokens {ce.shape} vs image tokens {img_tokens.shape}")
    img = nx.add(img_tokens, ce)
    out = []
    for k in range(cfg.controlnet_blocks):
        img, txt = multi_stream_block(p, f"cn{k}", img, txt, t_emb, cfg.heads, allow)
        out.append(img)
    return out


def velocity(p, cfg: ModelConfig, x_t, t, text: Tensor | np.ndarray, text_roles: np.ndarray,
             allow: np.ndarray | None = None, bias: np.ndarray | None = None,
             control: ControlSpec | None = None, recorder: Recorder | None = None,
             return_tokens: bool = False):
    """Predicted flow velocity for ``x_t`` of shape ``(B, H, W, C)``.

    ``p`` maps parameter names to Tensors. ``text`` is ``(B, Lt, d)`` prompt
    embeddings in layout order, ``allow``/``bias`` the ``(L, L)`` or
    ``(B, L, L)`` attention constants for ``L = n_patches + Lt``.
    """
    x_arr = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    b = x_arr.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    t_emb = time_embedding(p, cfg, t_arr)
    img = image_tokens(p, cfg, x_arr)
    txt = embed_text(p, text, text_roles)

    feats: list | None = None
    weights_active = control is not None and control.beta != 0.0
    if weights_active:
        if control.features is not None:
            feats = [f if isinstance(f, Tensor) else Tensor(f) for f in control.features]
        else:
            cn_txt = embed_text(p, control.text, control.text_roles)
            feats = controlnet_forward(p, cfg, img, control.edges, cn_txt, t_emb)

    for j in range(cfg.multi_stream_blocks):
        rec = None if recorder is None else (lambda w, j=j: recorder.on_attention(f"ms{j}", w))
        img, txt = multi_stream_block(p, f"ms{j}", img, txt, t_emb, cfg.heads, allow, bias, rec)
        if feats is not None:
            before = img
            img = combine_control(img, feats[cfg.injection_source(j)], control.beta,
                                  p[f"inject{j}.w"], p[f"inject{j}.b"], control.editable)
            if recorder is not None:
                gate = np.ones(before.shape[:-1]) if control.editable is None else \
                    np.broadcast_to(1.0 - np.asarray(control.editable, dtype=np.float64), before.shape[:-1])
                recorder.on_injection(j, before.data, img.data, control.beta * gate)
    for j in range(cfg.single_stream_blocks):
        rec = None if recorder is None else (lambda w, j=j: recorder.on_attention(f"ss{j}", w))
        img, txt = single_stream_block(p, f"ss{j}", img, txt, t_emb, cfg.heads, allow, bias, rec)

    out = nx.linear(nx.layer_norm(img), p["out_w"], p["out_b"])
    if return_tokens:
        return out
    return unpatchify(out.data, cfg.patch_size, cfg.image_size, cfg.channels)


def control_features(p, cfg: ModelConfig, x_t: np.ndarray, t, edges: np.ndarray, text: np.ndarray,
                     text_roles: np.ndarray) -> list[np.ndarray]:
    """ControlNet outputs (pre-projection) for a state, as plain arrays."""
    x_arr = np.asarray(x_t, dtype=np.float64)
    b = x_arr.shape[0]
    t_emb = time_embedding(p, cfg, np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)))
    img = image_tokens(p, cfg, x_arr)
    txt = embed_text(p, text, text_roles)
    return [f.data for f in controlnet_forward(p, cfg, img, edges, txt, t_emb)]
