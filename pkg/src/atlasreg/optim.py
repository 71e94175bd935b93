"""Shared optimization machinery: deterministic grid search followed by
Adagrad ascent.

The Adagrad contract used throughout: per-parameter accumulated squared
gradients, step_i = base_i * g_i / (sqrt(acc_i) + eps). Ascent tracks the
best point seen and always returns it, so the result can never be worse
than the starting point. Everything is deterministic: no RNG, fixed
iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdagradConfig:
    base_step: np.ndarray | float = 1.0  # per-parameter scale, same shape as x
    eps: float = 1e-8
    max_iters: int = 1000
    grad_tol: float = 1e-4  # stop when ||g * base_step|| drops below this


@dataclass
class AscentResult:
    x: np.ndarray
    value: float
    trace: list = field(default_factory=list)  # (iteration, best-so-far value)
    converged: bool = False
    iterations: int = 0


def adagrad_ascent(value_fn, grad_fn, x0, config: AdagradConfig) -> AscentResult:
    """Maximize value_fn from x0 using Adagrad-scaled gradient ascent."""
    x = np.array(x0, dtype=np.float64)
    base = np.broadcast_to(np.asarray(config.base_step, dtype=np.float64), x.shape)
    acc = np.zeros_like(x)

    best_x = x.copy()
    best_v = float(value_fn(x))
    trace = [(0, best_v)]
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        g = np.asarray(grad_fn(x), dtype=np.float64)
        if np.linalg.norm(g * base) < config.grad_tol:
            converged = True
            break
        acc += g * g
        x = x + base * g / (np.sqrt(acc) + config.eps)
        v = float(value_fn(x))
        if v > best_v:
            best_v = v
            best_x = x.copy()
        trace.append((it, best_v))
    return AscentResult(best_x, best_v, trace, converged, it)


def grid_search(value_fn, candidates) -> tuple:
    """Evaluate candidates in order; return (best_candidate, best_value).

    Ties keep the earliest candidate, so the result is independent of
    floating-point noise in later duplicates.
    """
    best = None
    best_v = -np.inf
    for cand in candidates:
        v = float(value_fn(cand))
        if v > best_v:
            best_v = v
            best = cand
    if best is None:
        raise ValueError("empty candidate list")
    return best, best_v


def translation_grid(radius_um: float, step_um: float) -> np.ndarray:
    """Cubic grid of 3D offsets covering [-radius, radius]^3, centered on 0,
    in a fixed (z, y, x ascending) order."""
    n = int(np.floor(radius_um / step_um + 1e-9))
    axis = np.arange(-n, n + 1, dtype=np.float64) * step_um
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def ball_pattern(radius_um: float, n_samples: int) -> np.ndarray:
    """Deterministic low-discrepancy points filling a ball of given radius.

    Fibonacci-spiral directions combined with cube-root radial spacing give
    near-uniform coverage of the ball volume with no RNG involved.
    """
    i = np.arange(n_samples, dtype=np.float64)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    phi = 2.0 * np.pi * np.mod(i / golden, 1.0)
    cos_theta = 1.0 - 2.0 * (i + 0.5) / n_samples
    sin_theta = np.sqrt(np.maximum(0.0, 1.0 - cos_theta**2))
    r = radius_um * np.cbrt((i + 0.5) / n_samples)
    return np.stack([r * sin_theta * np.cos(phi),
                     r * sin_theta * np.sin(phi),
                     r * cos_theta], axis=1)
