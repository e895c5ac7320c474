"""Rectified-flow ODE integration in both directions, and the ControlNet cache.

Evaluation points are addressed by *half-step keys*: key ``m`` is time
``m / (2N)``, so grid point ``t_k`` is key ``2k`` and the midpoint of step
``k`` is key ``2k + 1``. Inversion and denoising share the grid, so a
denoising evaluation at time t finds the cache entry recorded at exactly t.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import MissingKey, NonFinite

METHODS = ("euler", "second_order")

VelocityFn = Callable[[np.ndarray, float, int], np.ndarray]
ControlFn = Callable[[np.ndarray, float], list]


@dataclass(frozen=True)
class Schedule:
    n_steps: int = 50

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def time_at(self, key: int) -> float:
        return key / (2 * self.n_steps)

    @property
    def timesteps(self) -> np.ndarray:
        return np.array([self.time_at(2 * k) for k in range(self.n_steps + 1)])

    def dt(self, k: int) -> float:
        """Width of step ``k`` (from ``t_k`` to ``t_{k+1}``)."""
        return self.time_at(2 * k + 2) - self.time_at(2 * k)


@dataclass
class ControlCache:
    """Write-once store of ControlNet outputs keyed by ``(block, half-step key)``."""

    entries: dict = field(default_factory=dict)
    times: dict = field(default_factory=dict)
    reads: list = field(default_factory=list)

    def record(self, key: int, t: float, features) -> None:
        for block, f in enumerate(features):
            if (block, key) in self.entries:
                raise ValueError(f"cache entry {(block, key)} already recorded")
            arr = np.array(f, dtype=np.float64)
            arr.setflags(write=False)
            self.entries[(block, key)] = arr
        self.times[key] = t

    def lookup(self, block: int, key: int) -> np.ndarray:
        try:
            arr = self.entries[(block, key)]
        except KeyError:
            raise MissingKey(f"missing-key: no control features for block {block}, step {key}") from None
        self.reads.append((block, key))
        return arr

    def blocks(self) -> int:
        return 1 + max((b for b, _ in self.entries), default=-1)

    def features_at(self, key: int) -> list[np.ndarray]:
        return [self.lookup(b, key) for b in range(self.blocks())]

    def keys(self) -> list[int]:
        return sorted(self.times)

    def save(self, path) -> None:
        arrays = {f"b{b}_k{k}": v for (b, k), v in self.entries.items()}
        times = np.array(sorted(self.times.items()), dtype=np.float64).reshape(-1, 2)
        np.savez(path, __times__=times, **arrays)


def cache_lookup(cache: ControlCache, block: int, step: int) -> np.ndarray:
    return cache.lookup(block, step)


def _check(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFinite(f"non-finite-state during {where}")
    return x


def invert(x0: np.ndarray, schedule: Schedule, velocity_fn: VelocityFn, method: str = "second_order",
           control_fn: ControlFn | None = None,
           cache: ControlCache | None = None) -> tuple[np.ndarray, ControlCache]:
    """Integrate ``dx/dt = v`` from t=0 to t=1.

    With ``control_fn``, ControlNet features are recorded *before* each
    velocity evaluation (so ``velocity_fn`` may read them from the cache) and
    once more at ``(x_T, 1)`` for the first denoising evaluation. Pass an
    empty ``cache`` to let ``velocity_fn`` look features up as they arrive.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    cache = ControlCache() if cache is None else cache
    if cache.entries:
        raise ValueError("invert needs an empty cache")
    x = np.array(x0, dtype=np.float64)
    n = schedule.n_steps

    def evaluate(state, key):
        t = schedule.time_at(key)
        if control_fn is not None:
            cache.record(key, t, control_fn(state, t))
        return _check(np.asarray(velocity_fn(state, t, key), dtype=np.float64), "inversion")

    v_prev = None
    for k in range(n):
        dt = schedule.dt(k)
        if method == "euler":
            x = x + dt * evaluate(x, 2 * k)
        else:
            if v_prev is None:
                v_prev = evaluate(x, 2 * k)
            x_mid = x + 0.5 * dt * v_prev
            v_mid = evaluate(x_mid, 2 * k + 1)
            x = x + dt * v_mid
            v_prev = v_mid
        _check(x, "inversion")
    if control_fn is not None:
        cache.record(2 * n, schedule.time_at(2 * n), control_fn(x, schedule.time_at(2 * n)))
    return x, cache


def denoise(x_T: np.ndarray, schedule: Schedule, velocity_fn: VelocityFn, method: str = "euler",
            start_step: int | None = None, stop_step: int = 0,
            on_step: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
            v_init: np.ndarray | None = None, return_velocity: bool = False):
    """Integrate from ``t_start`` (default 1) down to ``t_stop`` (default 0).

    ``on_step(k, x, v)`` runs after each completed step, where ``x`` is the
    state at ``t_{k-1}`` and ``v`` the velocity used for the step. For the
    second-order method ``v_init`` replaces the bootstrap evaluation (used
    to resume an interrupted solve) and ``return_velocity`` also returns the
    velocity to resume with.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    n = schedule.n_steps
    start = n if start_step is None else start_step
    x = np.array(x_T, dtype=np.float64)

    def evaluate(state, key):
        return _check(np.asarray(velocity_fn(state, schedule.time_at(key), key), dtype=np.float64), "denoising")

    v_prev = v_init
    for k in range(start, stop_step, -1):
        dt = schedule.dt(k - 1)
        if method == "euler":
            v = evaluate(x, 2 * k)
            x = x - dt * v
        else:
            if v_prev is None:
                v_prev = evaluate(x, 2 * k)
            x_mid = x - 0.5 * dt * v_prev
            v = evaluate(x_mid, 2 * k - 1)
            x = x - dt * v
            v_prev = v
        _check(x, "denoising")
        if on_step is not None:
            on_step(k, x, v)
    return (x, v_prev) if return_velocity else x


def denoise_split(x_T: np.ndarray, schedule: Schedule, first_fn: VelocityFn, second_fn_factory,
                  switch_step: int, method: str = "euler"):
    """Denoise with ``first_fn`` down to ``t_{switch_step}``, then continue the
    same solve with the velocity returned by ``second_fn_factory(x_switch, v_last)``.
    """
    x_mid, v_last = denoise(x_T, schedule, first_fn, method, start_step=schedule.n_steps,
                            stop_step=switch_step, return_velocity=True)
    second = second_fn_factory(x_mid, v_last)
    return denoise(x_mid, schedule, second, method, start_step=switch_step, stop_step=0, v_init=v_last)
