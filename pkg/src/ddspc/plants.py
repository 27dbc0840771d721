"""Benchmark plants: the cart-inverted pendulum and a CSV replay source.

State ordering for the cart-pole is ``[z, z_dot, theta, theta_dot]`` with
``theta = 0`` upright; outputs are ``y = [z, theta]``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class CartPoleParams:
    m_cart: float = 5.0
    m_pend: float = 1.0
    L: float = 2.0
    K_d: float = 10.0
    g: float = 9.81
    T: float = 0.1

    def __post_init__(self):
        for name in ("m_cart", "m_pend", "L", "g", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CartPoleParams.{name} must be > 0")
        if self.K_d < 0:
            raise ValueError("CartPoleParams.K_d must be >= 0")


def cartpole_accels(state, F, params: CartPoleParams = CartPoleParams()):
    """Cart and pole accelerations ``(z_ddot, theta_ddot)``."""
    _, zd, th, thd = (float(v) for v in state)
    return _accels(zd, th, thd, float(F), params)


def _accels(zd, th, thd, F, p):
    s, c = math.sin(th), math.cos(th)
    zdd = (F - p.K_d * zd - p.m_pend * (p.L * thd * thd * s - p.g * s * c)) / (p.m_cart + p.m_pend * s * s)
    thdd = (zdd * c + p.g * s) / p.L
    return zdd, thdd


def _deriv(x, F, p):
    zdd, thdd = _accels(x[1], x[2], x[3], F, p)
    return (x[1], zdd, x[3], thdd)


def _deriv_rows(x, F, p):
    """Derivative plus the zdd and thdd rows of its Jacobian w.r.t. ``(zd, th, thd, F)``."""
    zd, th, thd = x[1], x[2], x[3]
    s, c = math.sin(th), math.cos(th)
    mp, L, g = p.m_pend, p.L, p.g
    num = F - p.K_d * zd - mp * (L * thd * thd * s - g * s * c)
    D = p.m_cart + mp * s * s
    zdd = num / D
    thdd = (zdd * c + g * s) / L
    z_th = (-mp * (L * thd * thd * c - g * (c * c - s * s)) * D - num * 2.0 * mp * s * c) / (D * D)
    r1 = (-p.K_d / D, z_th, -2.0 * mp * L * thd * s / D, 1.0 / D)
    r3 = (r1[0] * c / L, (z_th * c - zdd * s + g * c) / L, r1[2] * c / L, r1[3] * c / L)
    return (zd, zdd, thd, thdd), r1, r3


def _integrate(x, F, p, integrator, substeps):
    h = p.T / substeps
    x = tuple(float(v) for v in x)
    for _ in range(substeps):
        if integrator == "rk4":
            k1 = _deriv(x, F, p)
            k2 = _deriv(tuple(a + 0.5 * h * b for a, b in zip(x, k1)), F, p)
            k3 = _deriv(tuple(a + 0.5 * h * b for a, b in zip(x, k2)), F, p)
            k4 = _deriv(tuple(a + h * b for a, b in zip(x, k3)), F, p)
            x = tuple(a + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
                      for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4))
        elif integrator == "euler":
            k1 = _deriv(x, F, p)
            x = tuple(a + h * b for a, b in zip(x, k1))
        else:
            raise ValueError(f"unknown integrator {integrator!r}; use 'euler' or 'rk4'")
    return x


def step(params: CartPoleParams, state, F, w=None, integrator: str = "rk4", substeps: int = 4) -> np.ndarray:
    """Integrate the cart-pole over one sampling period and add ``w``.

    The period ``params.T`` is split into ``substeps`` integrator steps; four
    RK4 substeps keep the energy drift of the undamped system below 1e-5
    over 10 s, one substep does not.
    """
    F = float(np.asarray(F).ravel()[0]) if np.ndim(F) else float(F)
    nxt = np.array(_integrate(state, F, params, integrator, substeps))
    if w is not None:
        nxt = nxt + np.asarray(w, dtype=float)
    if not np.all(np.isfinite(nxt)):
        raise FloatingPointError(f"cart-pole step produced non-finite state from {np.asarray(state)} with F={F}")
    return nxt


class CartPoleModel:
    """Disturbance-free discretized cart-pole as a :class:`~ddspc.models.DiscreteModel`."""

    n = 4
    m = 1
    C = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])

    def __init__(self, params: CartPoleParams = CartPoleParams(), integrator: str = "rk4", substeps: int = 4):
        self.params = params
        self.integrator = integrator
        self.substeps = substeps

    def step(self, x, u):
        return step(self.params, x, u, None, self.integrator, self.substeps)

    def jacobians(self, x, u):
        """Exact Jacobians of the discrete map (derivative of the integrator)."""
        _, A, B = self.step_jacobians(x, u)
        return A, B

    def step_jacobians(self, x, u):
        """Next state together with ``(A, B)``; one pass through the integrator.

        The tangent of every integrator stage is propagated row by row with
        plain floats. The position never enters the dynamics, so its column
        stays a unit vector and only the columns for ``(zd, th, thd, F)`` are
        carried.
        """
        p = self.params
        F = float(np.asarray(u).ravel()[0])
        h = p.T / self.substeps
        x = tuple(float(v) for v in x)
        # S[i][j] = d state_i / d [zd0, th0, thd0, F]
        S = [[0.0] * 4, [1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]

        def stage(xs, Ss):
            k, r1, r3 = _deriv_rows(xs, F, p)
            a = [r1[0] * s1 + r1[1] * s2 + r1[2] * s3 for s1, s2, s3 in zip(Ss[1], Ss[2], Ss[3])]
            b = [r3[0] * s1 + r3[1] * s2 + r3[2] * s3 for s1, s2, s3 in zip(Ss[1], Ss[2], Ss[3])]
            a[3] += r1[3]
            b[3] += r3[3]
            return k, [Ss[1], a, Ss[3], b]

        def axpy(A, c, D):
            return [[ai + c * di for ai, di in zip(ra, rd)] for ra, rd in zip(A, D)]

        def shift(xs, c, k):
            return tuple(a + c * b for a, b in zip(xs, k))

        for _ in range(self.substeps):
            k1, d1 = stage(x, S)
            if self.integrator == "euler":
                x = shift(x, h, k1)
                S = axpy(S, h, d1)
                continue
            k2, d2 = stage(shift(x, 0.5 * h, k1), axpy(S, 0.5 * h, d1))
            k3, d3 = stage(shift(x, 0.5 * h, k2), axpy(S, 0.5 * h, d2))
            k4, d4 = stage(shift(x, h, k3), axpy(S, h, d3))
            x = tuple(a + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4))
            S = [[s + h / 6.0 * (e1 + 2 * e2 + 2 * e3 + e4) for s, e1, e2, e3, e4 in zip(*rows)]
                 for rows in zip(S, d1, d2, d3, d4)]
        S = np.array(S)
        A = np.eye(4)
        A[:, 1:] = S[:, :3]
        nxt = np.array(x)
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError(f"cart-pole step produced non-finite state with F={F}")
        return nxt, A, S[:, 3:]



def mechanical_energy(state, params: CartPoleParams = CartPoleParams()) -> float:
    """Total energy of the unforced, undamped system (conserved when K_d = 0)."""
    _, zd, th, thd = (float(v) for v in state)
    mc, mp, L, g = params.m_cart, params.m_pend, params.L, params.g
    return (0.5 * (mc + mp) * zd * zd - mp * L * zd * thd * math.cos(th)
            + 0.5 * mp * L * L * thd * thd + mp * g * L * math.cos(th))


@dataclass(frozen=True)
class DisturbanceModel:
    kind: str = "none"  # "none" | "uniform_box"
    half_width: tuple = (0.0, 0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "uniform_box"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if any(h < 0 for h in self.half_width):
            raise ValueError("disturbance half_width must be >= 0")

    @property
    def eps_w(self) -> float:
        """Euclidean bound on every sample."""
        if self.kind == "none":
            return 0.0
        return float(np.linalg.norm(self.half_width))


def sample_disturbance(model: DisturbanceModel, k: int) -> np.ndarray:
    """Disturbance at step ``k``; a pure function of ``(seed, k)``."""
    hw = np.asarray(model.half_width, dtype=float)
    if model.kind == "none" or not np.any(hw):
        return np.zeros(hw.size)
    rng = np.random.default_rng([model.seed, k])
    return -hw + 2.0 * hw * rng.random(hw.size)


class CsvSchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def write_io_csv(path, t, U, Y) -> None:
    """Write an I/O log with header ``t,u_1..u_m,y_1..y_l``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if U.shape[0] != len(t):
        U = U.T
    if Y.shape[0] != len(t):
        Y = Y.T
    header = ["t"] + [f"u_{i + 1}" for i in range(U.shape[1])] + [f"y_{i + 1}" for i in range(Y.shape[1])]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in range(len(t)):
            wr.writerow([repr(float(t[k]))] + [repr(float(v)) for v in U[k]] + [repr(float(v)) for v in Y[k]])


def read_io_csv(path):
    """Parse an I/O log; returns ``(t, U, Y)`` arrays."""
    rows = list(replay_plant(path, with_time=True))
    if not rows:
        return np.zeros(0), np.zeros((0, 0)), np.zeros((0, 0))
    t = np.array([r[0] for r in rows])
    U = np.array([r[1] for r in rows])
    Y = np.array([r[2] for r in rows])
    return t, U, Y


def _parse_header(header, path):
    if not header or header[0].strip() != "t":
        raise CsvSchemaError(f"{path}: header must start with 't'", 1)
    names = [h.strip() for h in header[1:]]
    n_u = sum(1 for h in names if h.startswith("u_"))
    n_y = sum(1 for h in names if h.startswith("y_"))
    expect = [f"u_{i + 1}" for i in range(n_u)] + [f"y_{i + 1}" for i in range(n_y)]
    if names != expect or n_u == 0 or n_y == 0:
        raise CsvSchemaError(f"{path}: header must be t,u_1..u_m,y_1..y_l, got {','.join(header)}", 1)
    return n_u, n_y


def replay_plant(path, with_time: bool = False) -> Iterator[tuple]:
    """Yield ``(u, y)`` pairs from an I/O CSV in file order (no dynamics)."""
    path = Path(path)
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise CsvSchemaError(f"{path}: empty file", 1) from None
        n_u, n_y = _parse_header(header, path)
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 1 + n_u + n_y:
                raise CsvSchemaError(f"expected {1 + n_u + n_y} fields, got {len(row)}", lineno)
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise CsvSchemaError(f"non-numeric field in {row}", lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise CsvSchemaError("non-finite value", lineno)
            u = np.array(vals[1:1 + n_u])
            y = np.array(vals[1 + n_u:])
            yield (vals[0], u, y) if with_time else (u, y)
