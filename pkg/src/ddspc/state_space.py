"""State-space form of a NARX/STF model.

The stacked state is ``x(k) = [u(k-1); ...; u(k-d_u+1); y(k); ...; y(k-d_y+1)]``
so the STF regressor that predicts ``y(k+1)`` is exactly ``[u(k); x(k)]``.
With the interpolation weights frozen at ``[u; x]`` the one-step map is affine::

    x(k+1) = A_t2 x(k) + A_t1 u(k) + b_t
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import stf_model as stf


class HistoryError(ValueError):
    pass


@dataclass(frozen=True)
class AffineStateMatrices:
    A_t2: np.ndarray
    A_t1: np.ndarray
    b_t: np.ndarray
    alpha: np.ndarray


def state_dim(hyper: stf.StfHyperParams) -> int:
    return hyper.n_u * (hyper.d_u - 1) + hyper.n_y * hyper.d_y


def stack_state(u_hist, y_hist, hyper: stf.StfHyperParams) -> np.ndarray:
    """``u_hist`` = [u(k-1), u(k-2), ...], ``y_hist`` = [y(k), y(k-1), ...] (newest first)."""
    nu_need, ny_need = hyper.d_u - 1, hyper.d_y
    if len(u_hist) < nu_need:
        raise HistoryError(f"need {nu_need} past inputs, got {len(u_hist)}")
    if len(y_hist) < ny_need:
        raise HistoryError(f"need {ny_need} outputs, got {len(y_hist)}")
    parts = [np.atleast_1d(np.asarray(u, float)).reshape(hyper.n_u) for u in list(u_hist)[:nu_need]]
    parts += [np.atleast_1d(np.asarray(y, float)).reshape(hyper.n_y) for y in list(y_hist)[:ny_need]]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def _blocks(hyper: stf.StfHyperParams):
    nu, ny, du, dy = hyper.n_u, hyper.n_y, hyper.d_u, hyper.d_y
    n_ub = nu * (du - 1)  # past-input block of x
    n_yb = ny * dy
    return nu, ny, n_ub, n_yb


def shift_structure(hyper: stf.StfHyperParams):
    """Constant parts of ``A_t2`` and ``A_t1`` (identities, zeros) and the row of y(k+1)."""
    nu, ny, n_ub, n_yb = _blocks(hyper)
    n = n_ub + n_yb
    A2 = np.zeros((n, n))
    A1 = np.zeros((n, nu))
    if n_ub:
        A1[:nu] = np.eye(nu)
        # tau_1: u(k-1).. shift down by one input slot
        A2[nu:n_ub, :n_ub - nu] = np.eye(n_ub - nu)
    # tau_2: y(k).. shift down by one output slot
    if n_yb > ny:
        A2[n_ub + ny:, n_ub:n - ny] = np.eye(n_yb - ny)
    return A2, A1, n_ub


def linearize_at(model: stf.CompositeStfModel, u, x) -> AffineStateMatrices:
    """Frozen-weight matrices at ``(u, x)``; the model must act on physical units."""
    hyper = model.hyper
    nu, ny, n_ub, n_yb = _blocks(hyper)
    u = np.atleast_1d(np.asarray(u, float))
    x = np.asarray(x, float)
    alpha = stf.interpolation_weights(model, np.concatenate([u, x]))
    A_bar = sum(a * lm.A for a, lm in zip(alpha, model.locals))
    b_bar = sum(a * lm.b for a, lm in zip(alpha, model.locals))
    A2, A1, row = shift_structure(hyper)
    A2[row:row + ny, :] = A_bar[:, nu:]  # [rho_1 rho_2]
    A1[row:row + ny, :] = A_bar[:, :nu]
    b = np.zeros(n_ub + n_yb)
    b[row:row + ny] = b_bar
    return AffineStateMatrices(A2, A1, b, alpha)


def rollout(model: stf.CompositeStfModel, x0, u_seq, w_seq=None) -> np.ndarray:
    """States ``x(0..N)`` of the affine recursion with weights refreshed every step."""
    x = np.asarray(x0, float)
    traj = [x]
    for k, u in enumerate(u_seq):
        M = linearize_at(model, u, x)
        x = M.A_t2 @ x + M.A_t1 @ np.atleast_1d(np.asarray(u, float)) + M.b_t
        if w_seq is not None:
            x = x + np.asarray(w_seq[k], float)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at step {k + 1}")
        traj.append(x)
    return np.array(traj)


class StfStateSpaceModel:
    """Stacked-state STF as a discrete model (``step`` and exact ``jacobians``).

    A normalized STF is converted to its physical-unit equivalent first.
    """

    def __init__(self, model: stf.CompositeStfModel):
        self.stf = model.denormalized()
        h = self.stf.hyper
        if h.n_static:
            raise ValueError("state-space form needs a NARX model (n_static = 0)")
        self.hyper = h
        self.n = state_dim(h)
        self.m = h.n_u
        _, ny, n_ub, _ = _blocks(h)
        self._row = n_ub
        self.C = np.zeros((ny, self.n))
        self.C[:, n_ub:n_ub + ny] = np.eye(ny)
        self._A2, self._A1, _ = shift_structure(h)

    def step(self, x, u):
        u = np.atleast_1d(np.asarray(u, float))
        x = np.asarray(x, float)
        y = stf.predict(self.stf, np.concatenate([u, x]))
        return self._A2 @ x + self._A1 @ u + self._place(y)

    def _place(self, y):
        out = np.zeros(self.n)
        out[self._row:self._row + y.size] = y
        return out

    def jacobians(self, x, u):
        """Exact derivatives including the dependence of the weights on ``[u; x]``."""
        u = np.atleast_1d(np.asarray(u, float))
        x = np.asarray(x, float)
        _, J = stf.predict_gradient(self.stf, np.concatenate([u, x]))
        A = self._A2.copy()
        B = self._A1.copy()
        r, ny = self._row, self.hyper.n_y
        A[r:r + ny] = J[:, self.m:]
        B[r:r + ny] = J[:, :self.m]
        return A, B

    def state_from_history(self, u_hist, y_hist):
        return stack_state(u_hist, y_hist, self.hyper)
