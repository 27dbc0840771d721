"""Discrete-time control barrier functions and their robust (RCBF) variant.

Safe set convention: ``S = {x : h(x) <= 0}``. The robust barrier inflates
``h`` by ``eta * (eps_w + eps_s + eps_c)`` so that ``h_r(x_hat) <= 0``
implies ``h(x) <= 0`` for every true state within the combined error ball.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class UncertaintyBounds:
    eps_w: float = 0.0  # disturbance
    eps_s: float = 0.0  # identification error
    eps_c: float = 0.0  # policy approximation error

    def __post_init__(self):
        for k in ("eps_w", "eps_s", "eps_c"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")

    @property
    def total(self) -> float:
        return self.eps_w + self.eps_s + self.eps_c


@dataclass(frozen=True)
class BarrierSpec:
    """Scalar barrier ``h`` with Lipschitz constant ``eta`` and its gradient.

    ``grad`` returns the gradient of the active smooth piece, which is what
    the NMPC linearizes.
    """

    h: Callable[[np.ndarray], float]
    eta: float
    description: str = ""
    grad: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("barrier Lipschitz constant eta must be > 0")

    def __call__(self, x) -> float:
        return float(self.h(np.asarray(x, dtype=float)))

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=float)
        g = np.zeros(x.size)
        for i in range(x.size):
            e = np.zeros(x.size)
            e[i] = 1e-7 * (1 + abs(x[i]))
            g[i] = (self(x + e) - self(x - e)) / (2 * e[i])
        return g


def box_barrier(coord: int, bound: float, center: float = 0.0, eta: float = 1.0) -> BarrierSpec:
    """``h(x) = |x[coord] - center| - bound``."""
    if not bound > 0:
        raise ValueError("box barrier bound must be > 0")

    def h(x):
        return abs(x[coord] - center) - bound

    def grad(x):
        g = np.zeros(x.size)
        g[coord] = 1.0 if x[coord] >= center else -1.0
        return g

    return BarrierSpec(h, eta, f"|x[{coord}] - {center:g}| - {bound:g}", grad)


def norm_barrier(radius: float, coords: Sequence[int] | None = None, eta: float = 1.0) -> BarrierSpec:
    """``h(x) = ||x[coords]|| - radius`` (all coordinates by default)."""
    if not radius > 0:
        raise ValueError("norm barrier radius must be > 0")
    idx = None if coords is None else np.asarray(coords, dtype=int)

    def h(x):
        v = x if idx is None else x[idx]
        return float(np.linalg.norm(v)) - radius

    def grad(x):
        g = np.zeros(x.size)
        v = x if idx is None else x[idx]
        n = np.linalg.norm(v)
        if n > 0:
            if idx is None:
                g = v / n
            else:
                g[idx] = v / n
        return g

    label = "||x||" if idx is None else f"||x[{list(idx)}]||"
    return BarrierSpec(h, eta, f"{label} - {radius:g}", grad)


def max_barrier(*specs: BarrierSpec) -> BarrierSpec:
    """Intersection of safe sets: ``h = max_i h_i``, ``eta = max_i eta_i``."""
    if not specs:
        raise ValueError("max_barrier needs at least one barrier")

    def h(x):
        return max(s(x) for s in specs)

    def grad(x):
        vals = [s(x) for s in specs]
        return specs[int(np.argmax(vals))].gradient(x)

    return BarrierSpec(h, max(s.eta for s in specs), "max(" + ", ".join(s.description for s in specs) + ")", grad)


def barrier_from_config(cfg: dict) -> BarrierSpec:
    """Build a barrier from ``{type=..., coord=..., bound=..., eta=...}``.

    ``type`` is ``box``, ``norm`` (``radius``, optional ``coords``) or ``max``
    (``parts`` = list of such tables).
    """
    kind = cfg.get("type")
    eta = float(cfg.get("eta", 1.0))
    if kind == "box":
        return box_barrier(int(cfg["coord"]), float(cfg["bound"]), float(cfg.get("center", 0.0)), eta)
    if kind == "norm":
        return norm_barrier(float(cfg.get("radius", cfg.get("bound"))), cfg.get("coords"), eta)
    if kind == "max":
        return max_barrier(*(barrier_from_config(p) for p in cfg["parts"]))
    raise ValueError(f"unknown barrier type {kind!r}; use box, norm or max")


def _check_gamma(gamma: float):
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")


def cbf_decay_check(h, x_k, x_k1, gamma: float) -> float:
    """``h(x_k1) - (1 - gamma) h(x_k)``; non-positive means satisfied."""
    _check_gamma(gamma)
    return float(h(x_k1)) - (1.0 - gamma) * float(h(x_k))


def rcbf_value(h, eta: float, bounds: UncertaintyBounds, x_hat) -> float:
    return float(h(x_hat)) + eta * bounds.total


def rcbf_constraint_residual(h, eta: float, bounds: UncertaintyBounds, x_k, x_k1, gamma: float) -> float:
    """``h(x_k1) - (1 - gamma) h(x_k) + gamma eta (eps_w + eps_s + eps_c)``."""
    _check_gamma(gamma)
    return float(h(x_k1)) - (1.0 - gamma) * float(h(x_k)) + gamma * eta * bounds.total


def estimate_lipschitz(h, lo, hi, n_samples: int = 10000, seed: int = 0, margin: float = 1.2) -> float:
    """Sampled Lipschitz estimate of ``h`` on the box ``[lo, hi]`` times ``margin``.

    Half the pairs are spread over the whole box, half are close pairs that
    probe the local slope.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("degenerate domain box: need lo < hi in every coordinate")
    rng = np.random.default_rng(seed)
    n_far = n_samples // 2
    A = lo + (hi - lo) * rng.random((n_samples, lo.size))
    B = np.empty_like(A)
    B[:n_far] = lo + (hi - lo) * rng.random((n_far, lo.size))
    step = 1e-4 * (hi - lo)
    B[n_far:] = np.clip(A[n_far:] + step * rng.uniform(-1, 1, size=(n_samples - n_far, lo.size)), lo, hi)
    best = 0.0
    for a, b in zip(A, B):
        d = np.linalg.norm(a - b)
        if d > 0:
            best = max(best, abs(float(h(a)) - float(h(b))) / d)
    if best == 0.0:
        warnings.warn("barrier appears constant on the domain; Lipschitz estimate is 0", stacklevel=2)
        return 0.0
    return margin * best


def empirical_bound(errors, inflation: float = 1.5) -> float:
    """``inflation * max ||e||`` over rows of one-step error samples."""
    E = np.atleast_2d(np.asarray(errors, dtype=float))
    if E.size == 0:
        return 0.0
    return inflation * float(np.max(np.linalg.norm(E, axis=1)))
