"""Discrete-time model interface shared by the NMPC, policy and adaptation code.

A model is any object with integer attributes ``n`` (states) and ``m``
(inputs), an output selector matrix ``C`` (``y = C x``), and two methods::

    step(x, u) -> x_next
    jacobians(x, u) -> (df/dx, df/du)
"""
from __future__ import annotations

from typing import Callable, Protocol

import numpy as np
import scipy.linalg


class DiscreteModel(Protocol):
    n: int
    m: int
    C: np.ndarray

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class LinearModel:
    """x+ = A x + B u + c."""

    def __init__(self, A, B, C=None, c=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.n, self.m = self.B.shape
        self.C = np.eye(self.n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
        self.c = np.zeros(self.n) if c is None else np.asarray(c, dtype=float).ravel()

    def step(self, x, u):
        return self.A @ np.asarray(x, float) + self.B @ np.atleast_1d(np.asarray(u, float)) + self.c

    def jacobians(self, x, u):
        return self.A, self.B


def fd_jacobians(step: Callable, x, u, rel_step: float = 1e-6):
    """Central finite-difference Jacobians of ``step`` at (x, u)."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n, m = x.size, u.size
    fx = np.empty((step(x, u).size, n))
    fu = np.empty((fx.shape[0], m))
    for i in range(n):
        h = rel_step * (1.0 + abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        fx[:, i] = (step(x + e, u) - step(x - e, u)) / (2 * h)
    for j in range(m):
        h = rel_step * (1.0 + abs(u[j]))
        e = np.zeros(m)
        e[j] = h
        fu[:, j] = (step(x, u + e) - step(x, u - e)) / (2 * h)
    return fx, fu


def dlqr(A, B, Q, R):
    """Discrete LQR: returns (K, P) with u = -K x and P the Riccati solution."""
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P
