"""Finite-difference audit of the tape: every primitive, then the full miniature model."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .mmdit import Model, ModelConfig, combine_control, gated_add
from .numerics import Tensor, finite_diff_check

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4

MINI = ModelConfig(image_size=8, patch_size=4, dim=8, heads=2, multi_stream_blocks=2, single_stream_blocks=1,
                   mlp_ratio=2, time_features=4, seed=3)


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tolerance


def _weighted(rng, shape):
    """Random fixed weights turn a tensor output into a scalar with a generic gradient."""
    w = Tensor(rng.normal(size=shape))
    return lambda y: nx.sum(nx.mul(y, w))


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, callable, np.ndarray]]:
    """``(name, f, x)`` with ``f(Tensor) -> scalar Tensor``."""
    a = rng.normal(size=(3, 4))
    other = Tensor(rng.normal(size=(3, 4)))
    mat = Tensor(rng.normal(size=(4, 5)))
    batched = Tensor(rng.normal(size=(2, 3, 3)))
    w34, w35, w24 = _weighted(rng, (3, 4)), _weighted(rng, (3, 5)), _weighted(rng, (2, 3, 4))
    allow = rng.random((3, 4)) > 0.3
    allow[:, 0] = True
    bias = rng.normal(size=(3, 4))
    gates = rng.random(3)
    gates[1] = 0.0
    proj_w, proj_b = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=4))
    editable = np.array([[0.0, 1.0, 0.3]])
    return [
        ("add", lambda x: w34(nx.add(x, other)), a),
        ("sub", lambda x: w34(nx.sub(other, x)), a),
        ("mul", lambda x: w34(nx.mul(x, other)), a),
        ("scale", lambda x: w34(nx.scale(x, -1.7)), a),
        ("exp", lambda x: w34(nx.exp(x)), a),
        ("log", lambda x: w34(nx.log(x)), np.abs(a) + 0.5),
        ("gelu", lambda x: w34(nx.gelu(x)), a),
        ("matmul_left", lambda x: w35(nx.matmul(x, mat)), a),
        ("matmul_right", lambda x: w35(nx.matmul(Tensor(a), x)), mat.data),
        ("matmul_batched", lambda x: w24(nx.matmul(batched, nx.expand(x, (2, 3, 4)))),
         rng.normal(size=(3, 4))),
        ("reshape", lambda x: _weighted(np.random.default_rng(1), (2, 6))(nx.reshape(x, (2, 6))), a),
        ("transpose", lambda x: _weighted(np.random.default_rng(2), (4, 3))(nx.transpose(x)), a),
        ("concat", lambda x: _weighted(np.random.default_rng(3), (6, 4))(nx.concat([x, other], axis=0)), a),
        ("take", lambda x: _weighted(np.random.default_rng(4), (4, 4))(nx.take(x, [0, 2, 2, 1])), a),
        ("take_slice", lambda x: _weighted(np.random.default_rng(5), (3, 2))(nx.take(x, (slice(None), slice(1, 3)))), a),
        ("expand", lambda x: w24(nx.expand(x, (2, 3, 4))), rng.normal(size=(3, 1))),
        ("bias_add", lambda x: w34(nx.bias_add(other, x)), rng.normal(size=4)),
        ("linear", lambda x: w35(nx.linear(x, mat, Tensor(np.ones(5)))), a),
        ("sum_axis", lambda x: _weighted(np.random.default_rng(6), (4,))(nx.sum(x, axis=0)), a),
        ("mean", lambda x: nx.mean(nx.mul(x, x)), a),
        ("softmax", lambda x: w34(nx.softmax(x, axis=-1)), a),
        ("softmax_masked", lambda x: w34(nx.softmax(x, axis=-1, allow=allow, bias=bias)), a),
        ("log_softmax", lambda x: w34(nx.log_softmax(x, axis=-1)), a),
        ("layer_norm", lambda x: w34(nx.layer_norm(x)), a),
        ("cross_entropy", lambda x: nx.cross_entropy(x, 2), rng.normal(size=5)),
        ("gated_add", lambda x: w34(gated_add(x, other, gates)), a),
        ("combine_control", lambda x: w34(nx.reshape(
            combine_control(Tensor(a.reshape(1, 3, 4)), nx.reshape(x, (1, 3, 4)), 0.8, proj_w, proj_b, editable),
            (3, 4))), rng.normal(size=(3, 4))),
    ]


def check_primitives(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, finite_diff_check(f, x), PRIMITIVE_TOL) for name, f, x in primitive_cases(rng)]


def miniature_model(seed: int = 0) -> Model:
    """The miniature config with every parameter randomised (zero-init layers would hide gradients)."""
    model = Model.create(MINI)
    rng = np.random.default_rng(seed)
    for k, v in model.params.items():
        model.params[k] = v + rng.normal(0.0, 0.3, size=v.shape)
    return model


def miniature_batch(model: Model, seed: int = 0):
    """Two images in the miniature size with regional prompts, selective control and padding."""
    from .masks import build_attention_mask, edit_layout, global_layout
    from .masks import PromptSpan, TokenLayout, PAD
    from .train import layout_tokens
    rng = np.random.default_rng(seed)
    cfg, vocab = model.config, model.vocab
    grid = cfg.grid
    region = np.array([[True, False], [False, False]])
    regional = edit_layout(grid, [region], [2], 2, 3, band_radius=1)
    plain = global_layout(grid, 3)
    plain = TokenLayout(grid, plain.regions, plain.prompts + (PromptSpan(PAD, regional.n_text - 3),))
    ids0, roles0 = layout_tokens(regional, [vocab.tokenize("red circle"), vocab.tokenize("empty background"),
                                            vocab.tokenize("red circle left")], vocab)
    ids1, roles1 = layout_tokens(plain, [vocab.tokenize("blue square top")], vocab)
    n = cfg.n_patches
    return {
        "ids": np.stack([ids0, ids1]), "roles": np.stack([roles0, roles1]),
        "allow": np.stack([build_attention_mask(regional, "edit_bg_band"), build_attention_mask(plain, "blockdiag")]),
        "editable": np.stack([region.reshape(-1).astype(float), np.zeros(n)]),
        "beta": np.array([0.8, 0.6]),
        "cn_ids": np.array([vocab.tokenize("red circle left"), vocab.tokenize("blue square top")]),
        "cn_roles": np.full((2, 3), 2, dtype=np.int64),
        "cn_allow": np.ones((2, n + 3, n + 3), dtype=bool),
        "edges": (rng.random((2, cfg.image_size, cfg.image_size)) > 0.7).astype(np.float64),
        "x0": rng.uniform(-1, 1, size=(2, cfg.image_size, cfg.image_size, cfg.channels)),
    }


def check_model(seed: int = 0, per_tensor: int = 4, h: float = 1e-5) -> list[CheckResult]:
    """Tape gradient of ``rf_loss`` vs central differences on ``per_tensor`` entries of every parameter."""
    from .train import rf_loss
    model = miniature_model(seed)
    batch = miniature_batch(model, seed)
    rng = np.random.default_rng(seed + 1)
    t = np.array([0.3, 0.8])
    noise = rng.normal(size=batch["x0"].shape)

    params = model.tensors(requires_grad=True)
    with nx.Graph():
        loss = rf_loss(model, params, batch, t, noise)
        nx.backward(loss)

    def value(name, flat_index, delta):
        p = model.tensors()
        arr = p[name].data.copy()
        arr.reshape(-1)[flat_index] += delta
        p[name] = Tensor(arr)
        return float(rf_loss(model, p, batch, t, noise).data)

    results = []
    for name in sorted(model.params):
        grad = params[name].grad
        # prefer entries the loss actually touches (e.g. embedding rows in use)
        pool = np.arange(model.params[name].size) if grad is None or not grad.any() else np.flatnonzero(grad)
        idx = rng.choice(pool, size=min(per_tensor, pool.size), replace=False)
        analytic = np.zeros(len(idx)) if grad is None else grad.reshape(-1)[idx]
        numeric = np.array([(value(name, i, h) - value(name, i, -h)) / (2 * h) for i in idx])
        scale = max(np.abs(analytic).max(), np.abs(numeric).max())
        err = 0.0 if scale == 0.0 else float(np.abs(analytic - numeric).max() / scale)
        results.append(CheckResult(f"model:{name}", err, MODEL_TOL))
    return results


def run_suite(seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = check_primitives(seed) + check_model(seed)
    return results, time.perf_counter() - start
