"""Online correction of an approximated control policy.

Two terms are added to the learned input ``u_tilde``:

* ``delta_u``, a Newton-type step on the KKT conditions of the steady-state
  problem ``min l(x, u) s.t. x = f(x, u)``, written in the reduced variable
  ``u`` through the steady-state sensitivity ``S = (I - f_x)^-1 f_u``;
* ``K``, an ancillary feedback on ``s = Gamma (x_hat - x)`` that pulls the
  plant towards the nominal trajectory.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import null_space

from .nmpc import CostWeights
from .safety import BarrierSpec, UncertaintyBounds


class SteadyStateSingularError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SensitivityMatrices:
    f_x: np.ndarray  # n x n
    f_u: np.ndarray  # n x m
    l_x: np.ndarray  # n
    l_u: np.ndarray  # m


def _step_fn(model):
    return model.step if hasattr(model, "step") else model


def linearize(model, x_hat, u, cost, rel_step: float = 1e-5) -> SensitivityMatrices:
    """Central finite differences of ``f`` and ``l`` at ``(x_hat, u)``.

    Each coordinate ``v`` is perturbed by ``rel_step * (1 + |v|)``.
    """
    f = _step_fn(model)
    x = np.asarray(x_hat, dtype=float).ravel()
    u = np.atleast_1d(np.asarray(u, dtype=float)).ravel()
    n, m = x.size, u.size
    v = np.concatenate([x, u])
    f0 = np.asarray(f(x, u), dtype=float)
    J = np.zeros((f0.size, n + m))
    g = np.zeros(n + m)
    for i in range(n + m):
        h = rel_step * (1.0 + abs(v[i]))
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        fp, fm = f(vp[:n], vp[n:]), f(vm[:n], vm[n:])
        lp, lm = cost(vp[:n], vp[n:]), cost(vm[:n], vm[n:])
        J[:, i] = (np.asarray(fp) - np.asarray(fm)) / (2 * h)
        g[i] = (lp - lm) / (2 * h)
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(g))):
        raise FloatingPointError(f"non-finite derivative at x = {x}, u = {u}")
    return SensitivityMatrices(J[:, :n], J[:, n:], g[:n], g[n:])


def steady_state_sensitivity(f_x, f_u, cond_max: float = 1e8) -> np.ndarray:
    """``S = (I - f_x)^-1 f_u``; raises when ``I - f_x`` is near singular (1-norm condition)."""
    f_x = np.asarray(f_x, dtype=float)
    M = np.eye(f_x.shape[0]) - f_x
    try:
        Mi = np.linalg.inv(M)
        c = np.abs(M).sum(0).max() * np.abs(Mi).sum(0).max()
    except np.linalg.LinAlgError:
        c = np.inf
    if not c <= cond_max:
        ev = np.linalg.eigvals(f_x)
        near = ev[np.argmin(np.abs(ev - 1.0))]
        raise SteadyStateSingularError(
            f"I - f_x is near singular (cond {c:.3g} > {cond_max:.0e}): f_x has eigenvalue {near:.6g} at 1; "
            "linearize the closed loop instead")
    return Mi @ np.asarray(f_u, dtype=float)


@dataclass(frozen=True)
class ActiveConstraint:
    """A steady-state constraint ``h(x, u) <= 0`` with value and gradients."""

    value: float
    h_x: np.ndarray
    h_u: np.ndarray
    name: str = ""


@dataclass(frozen=True)
class ReducedGradients:
    dl: np.ndarray  # m, reduced cost gradient
    dh_a: np.ndarray  # a x m
    h_a: np.ndarray  # a, active constraint values
    N_basis: np.ndarray  # m x (m - a)
    S: np.ndarray  # n x m
    d2l: np.ndarray | None = None  # m x m


def reduced_gradients(sens: SensitivityMatrices, active=(), d2l=None, cond_max: float = 1e8) -> ReducedGradients:
    S = steady_state_sensitivity(sens.f_x, sens.f_u, cond_max)
    m = S.shape[1]
    dl = np.asarray(sens.l_x, float) @ S + np.asarray(sens.l_u, float)
    if active:
        dh = np.array([np.asarray(c.h_x, float) @ S + np.asarray(c.h_u, float) for c in active]).reshape(-1, m)
        ha = np.array([c.value for c in active], dtype=float)
        N = null_space(dh)
    else:
        dh = np.zeros((0, m))
        ha = np.zeros(0)
        N = np.eye(m)
    return ReducedGradients(dl, dh, ha, N, S, None if d2l is None else np.atleast_2d(d2l))


def kkt_residual(grads: ReducedGradients) -> float:
    r = np.concatenate([np.abs(grads.h_a), np.abs(grads.N_basis.T @ grads.dl)])
    return float(r.max(initial=0.0))


def kkt_step(delta_u, grads: ReducedGradients, gain_cap: float = np.inf, reg: float = 1e-8,
             gain: float = 1.0) -> np.ndarray:
    """``delta_u - K0 [h_a; N' dl]`` with ``K0 = [dh_a; N' d2l]^-1``.

    The step is scaled by ``gain`` and its norm clipped to ``gain_cap``.
    """
    if grads.d2l is None:
        raise ValueError("reduced Hessian d2l is required for the KKT step")
    delta_u = np.atleast_1d(np.asarray(delta_u, dtype=float))
    N = grads.N_basis
    M = np.vstack([grads.dh_a, N.T @ grads.d2l])
    rhs = np.concatenate([grads.h_a, N.T @ grads.dl])
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"stacked KKT matrix is {M.shape}, expected square")
    M = M + reg * np.eye(M.shape[0])
    if M.shape[0] == 1:
        cond = np.inf if M[0, 0] == 0 else 1.0
    else:
        cond = np.linalg.cond(M)
    if cond > 1e12:
        warnings.warn("singular KKT matrix; using a damped pseudo-inverse", RuntimeWarning, stacklevel=2)
        d = -np.linalg.solve(M.T @ M + 1e-6 * np.eye(M.shape[0]), M.T @ rhs)
    else:
        d = -np.linalg.solve(M, rhs)
    d = gain * d
    nrm = math.sqrt(d @ d)
    if nrm > gain_cap:
        d *= gain_cap / nrm
    return delta_u + d


@dataclass(frozen=True)
class FeedbackGains:
    Gamma: np.ndarray  # m x n
    Upsilon: np.ndarray  # m x m diagonal

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.Upsilon, dtype=float))
        if np.any(U - np.diag(np.diag(U))):
            raise ValueError("Upsilon must be diagonal")
        if np.any(np.diag(U) < 0) or np.any(np.diag(U) >= 1):
            raise ValueError("Upsilon diagonal entries must lie in [0, 1)")

    @classmethod
    def design(cls, f_u, upsilon) -> "FeedbackGains":
        """``Gamma = pinv(f_u)`` so that ``Gamma f_u`` is (numerically) the identity."""
        f_u = np.atleast_2d(np.asarray(f_u, dtype=float))
        m = f_u.shape[1]
        ups = np.diag(np.broadcast_to(np.asarray(upsilon, float), (m,)).copy())
        return cls(np.linalg.pinv(f_u), ups)

    def off_diagonality(self, f_u) -> float:
        G = self.Gamma @ np.atleast_2d(f_u)
        return float(np.max(np.abs(G - np.diag(np.diag(G))), initial=0.0))

    def refreshed(self, f_u, tol: float = 1e-3) -> "FeedbackGains":
        if self.Upsilon.shape[0] == 1 or self.off_diagonality(f_u) <= tol:
            return self
        return FeedbackGains.design(f_u, np.diag(self.Upsilon))


def feedback_term(x_hat, x, gains: FeedbackGains, f_u, bounds: UncertaintyBounds = UncertaintyBounds(),
                  sign_free: bool = True):
    """Ancillary feedback ``K`` and the auxiliary variable ``s``.

    ``K_i = (Upsilon s + Gamma eps_w 1 + Gamma eps_s 1)_i / (Gamma f_u)_ii``
    with ``s = Gamma (x_hat - x)``. The sign-free variant drops the constant
    bound terms.
    """
    G = np.atleast_2d(gains.Gamma)
    s = G @ (np.asarray(x_hat, float) - np.asarray(x, float))
    diag = np.diag(G @ np.atleast_2d(f_u))
    if np.any(np.abs(diag) < 1e-6):
        raise ValueError(f"diagonal of Gamma f_u too small ({diag}); redesign Gamma")
    num = np.atleast_2d(gains.Upsilon) @ s
    if not sign_free:
        ones = np.ones(G.shape[1])
        num = num + G @ (bounds.eps_w * ones) + G @ (bounds.eps_s * ones)
    return num / diag, s


def adapt(u_tilde, delta_u, K, u_lo, u_hi) -> np.ndarray:
    return np.clip(np.asarray(u_tilde, float) + delta_u + K, u_lo, u_hi)


def nominal_observer(model, x_hat_prev, u_nominal, x_meas=None, k: int = 0, T_reset: float = math.inf):
    """``x_hat(k+1) = f(x_hat(k), u_nominal)``; restarts from ``x_meas`` every ``T_reset`` steps."""
    base = x_hat_prev
    if x_meas is not None and math.isfinite(T_reset) and k % int(T_reset) == 0:
        base = x_meas
    return np.asarray(_step_fn(model)(np.asarray(base, float), np.atleast_1d(u_nominal)), dtype=float)


# --- closed-loop adapter ------------------------------------------------------

def steady_state_cost(x, u, r, w: CostWeights, C) -> float:
    e = C @ x - r
    return float(x @ (w.Q + w.Q_N) @ x + u @ w.R @ u + e @ (w.P_out + w.P_N) @ e)


@dataclass(frozen=True)
class AdaptationConfig:
    upsilon: float = 0.1
    sign_free: bool = True
    burn_in: int = 20
    T_reset: float = math.inf
    gain_cap: float | None = None  # default 0.1 * ||u_hi - u_lo||
    kkt_gain: float = 0.05  # below 1 keeps the bias update slower than the closed loop
    active_tol: float = 1e-6
    hess_step: float = 1e-4
    hess_every: int = 10  # refresh the finite-difference reduced Hessian every this many steps
    use_jacobians: bool = True  # analytic model/policy Jacobians when available
    relin_tol: float = 0.0  # reuse the plant Jacobians while x_hat and u / (u_hi - u_lo) move less than this

    def __post_init__(self):
        if not 0 <= self.upsilon < 1:
            raise ValueError("upsilon must lie in [0, 1)")
        if self.burn_in < 0 or not self.T_reset >= 1:
            raise ValueError("burn_in must be >= 0 and T_reset >= 1")
        if self.relin_tol < 0:
            raise ValueError("relin_tol must be >= 0")
        if self.hess_every < 1:
            raise ValueError("hess_every must be >= 1")
        if not 0 < self.kkt_gain <= 1:
            raise ValueError("kkt_gain must lie in (0, 1]")


@dataclass
class AdaptationState:
    x_hat: np.ndarray
    delta_u: np.ndarray
    s: np.ndarray
    k: int = 0


class OnlineAdapter:
    """``u = u_tilde(x) + delta_u + K`` around a learned policy.

    The nominal state ``x_hat`` follows the nominal model under
    ``u_tilde(x_hat) + delta_u``. Steady-state sensitivities are taken on the
    nominal closed loop ``x -> f(x, u_tilde(x) + v)``, which keeps
    ``I - f_x`` invertible when the open-loop plant has integrating modes;
    ``delta_u`` is then the bias ``v``.
    """

    def __init__(self, model, policy, weights: CostWeights, u_lo, u_hi, barrier: BarrierSpec | None = None,
                 bounds: UncertaintyBounds = UncertaintyBounds(), config: AdaptationConfig = AdaptationConfig()):
        self.model, self.policy, self.weights = model, policy, weights
        self.m = int(np.size(u_lo)) if np.ndim(u_lo) else model.m
        self.u_lo = np.broadcast_to(np.asarray(u_lo, float), (self.m,)).copy()
        self.u_hi = np.broadcast_to(np.asarray(u_hi, float), (self.m,)).copy()
        self.barrier, self.bounds, self.config = barrier, bounds, config
        rng = np.linalg.norm(self.u_hi - self.u_lo)
        self.gain_cap = config.gain_cap if config.gain_cap is not None else (0.1 * rng if np.isfinite(rng) else np.inf)
        # steady-state cost derivative factors
        self._Qx = 2 * (weights.Q + weights.Q_N)
        self._Py = 2 * model.C.T @ (weights.P_out + weights.P_N)
        self._R2 = 2 * weights.R
        span = self.u_hi - self.u_lo
        self._u_scale = np.where(np.isfinite(span) & (span > 0), 1.0 / np.where(span > 0, span, 1.0), 1.0)
        self.gains: FeedbackGains | None = None
        self.state: AdaptationState | None = None
        self._hess = None
        self.log: list = []

    def reset(self, x0):
        x0 = np.asarray(x0, dtype=float)
        self.state = AdaptationState(x0.copy(), np.zeros(self.m), np.zeros(self.m))
        self.gains = None
        self._hess = None
        self._jac = None
        self._next = None
        self.log = []

    # closed-loop sensitivities at (x, v)
    def _policy_grad(self, x, win):
        if self.config.use_jacobians and hasattr(self.policy, "state_gradient"):
            return self.policy.state_gradient(x, win)
        u0 = np.asarray(self.policy(x, win), float)
        J = np.zeros((u0.size, x.size))
        for i in range(x.size):
            h = 1e-6 * (1 + abs(x[i]))
            e = np.zeros(x.size)
            e[i] = h
            J[:, i] = (np.asarray(self.policy(x + e, win)) - np.asarray(self.policy(x - e, win))) / (2 * h)
        return u0, J

    def _plant_jacobians(self, x, u, reuse):
        tol = self.config.relin_tol
        c = self._jac
        if (reuse and c is not None and np.max(np.abs(x - c[0])) <= tol
                and np.max(np.abs(u - c[1]) * self._u_scale) <= tol):
            return c[2], c[3]
        if reuse and hasattr(self.model, "step_jacobians"):
            self._next, A, B = self.model.step_jacobians(x, u)
        else:
            A, B = self.model.jacobians(x, u)
        if reuse:
            self._jac = (x.copy(), u.copy(), A, B)
        return A, B

    def sensitivities(self, x, v, win, reuse=False):
        """Closed-loop sensitivities, the nominal input, ``d u_tilde / d x`` and the plant ``f_u``.

        Saturated input channels do not respond to ``x`` or ``v``.
        """
        w, C = self.weights, self.model.C
        r = win[-1]
        ut, P = self._policy_grad(x, win)
        u = np.clip(ut + v, self.u_lo, self.u_hi)
        if self.config.use_jacobians and hasattr(self.model, "jacobians"):
            A, B = self._plant_jacobians(x, u, reuse)
            Bv = B
            l_u = self._R2 @ u
            sat = (u == self.u_lo) | (u == self.u_hi)
            if sat.any():
                P = np.where(sat[:, None], 0.0, P)
                Bv = B.copy()
                Bv[:, sat] = 0.0
                l_u[sat] = 0.0
            l_x = self._Qx @ x + self._Py @ (C @ x - r)
            sens = SensitivityMatrices(A + Bv @ P, Bv, l_x + l_u @ P, l_u)
        else:
            def f(xx, vv):
                return self.model.step(xx, np.clip(self.policy(xx, win) + vv, self.u_lo, self.u_hi))

            def cost(xx, vv):
                uu = np.clip(self.policy(xx, win) + vv, self.u_lo, self.u_hi)
                return steady_state_cost(xx, uu, r, w, C)

            sens = linearize(f, x, v, cost)
            B = linearize(self.model, x, u, lambda a, b: 0.0).f_u
        return sens, u, P, B

    def _active(self, x, u, P_rows, S, dl):
        """Steady-state constraints with ``|h| <= tol`` and a nonnegative multiplier."""
        cand = []
        tol = self.config.active_tol
        for i in range(self.m):
            hu = np.zeros(self.m)
            hu[i] = 1.0
            if abs(u[i] - self.u_hi[i]) <= tol:
                cand.append(ActiveConstraint(u[i] - self.u_hi[i], P_rows[i], hu, f"u{i}_hi"))
            if abs(self.u_lo[i] - u[i]) <= tol:
                cand.append(ActiveConstraint(self.u_lo[i] - u[i], -P_rows[i], -hu, f"u{i}_lo"))
        if self.barrier is not None:
            hv = self.barrier(x) + self.barrier.eta * self.bounds.total
            if abs(hv) <= tol:
                cand.append(ActiveConstraint(hv, self.barrier.gradient(x), np.zeros(self.m), "barrier"))
        if not cand:
            return ()
        dh = np.array([c.h_x @ S + c.h_u for c in cand])
        lam = np.linalg.lstsq(dh.T, -dl, rcond=None)[0]
        return tuple(c for c, l in zip(cand, lam) if l >= 0)[:self.m]

    def gradients(self, x, v, win, with_hessian: bool = True, lin=None) -> ReducedGradients:
        """Reduced gradients at ``(x, v)``; ``lin`` reuses a :meth:`sensitivities` result.

        ``with_hessian`` may also be an ``m x m`` array that is used as the
        reduced Hessian instead of recomputing it.
        """
        sens, u, P, _ = self.sensitivities(x, v, win) if lin is None else lin
        base = reduced_gradients(sens)
        active = self._active(x, u, P, base.S, base.dl)
        grads = reduced_gradients(sens, active) if active else base
        if isinstance(with_hessian, np.ndarray):
            return replace(grads, d2l=with_hessian)
        if not with_hessian:
            return grads
        # forward differences of dl along the linearized steady-state manifold
        h = self.config.hess_step
        H = np.zeros((self.m, self.m))
        for j in range(self.m):
            e = np.zeros(self.m)
            e[j] = h
            sj = self.sensitivities(x + grads.S @ e, v + e, win)
            H[:, j] = (reduced_gradients(sj[0]).dl - grads.dl) / h
        H = 0.5 * (H + H.T)
        return ReducedGradients(grads.dl, grads.dh_a, grads.h_a, grads.N_basis, grads.S, H)

    def step(self, x, r_window) -> np.ndarray:
        """Input for measured state ``x``; advances the nominal state and ``delta_u``."""
        x = np.asarray(x, dtype=float)
        if self.state is None:
            self.reset(x)
        st = self.state
        cfg = self.config
        win = np.atleast_2d(np.asarray(r_window, float))
        u_tilde = np.asarray(self.policy(x, win), float)
        self._next = None
        lin = self.sensitivities(st.x_hat, st.delta_u, win, reuse=True)
        u_nom, f_u = lin[1], lin[3]
        x_next = self._next
        self.gains = FeedbackGains.design(f_u, cfg.upsilon) if self.gains is None else self.gains.refreshed(f_u)
        K, s = feedback_term(st.x_hat, x, self.gains, f_u, self.bounds, cfg.sign_free)
        st.s = s
        u = adapt(u_tilde, st.delta_u, K, self.u_lo, self.u_hi)
        # KKT update of the bias for the next step
        want = st.k >= cfg.burn_in
        if want and self._hess is not None and (st.k - cfg.burn_in) % cfg.hess_every:
            want = self._hess
        try:
            grads = self.gradients(st.x_hat, st.delta_u, win, want, lin)
            self._hess = grads.d2l
        except SteadyStateSingularError:
            # saturated or marginally stable transient: no steady-state information
            grads = None
        res = kkt_residual(grads) if grads is not None else math.nan
        self.log.append((st.k, u_tilde, st.delta_u, K, math.sqrt(s @ s), res))
        du = st.delta_u
        if grads is not None and st.k >= cfg.burn_in:
            st.delta_u = kkt_step(st.delta_u, grads, self.gain_cap, gain=cfg.kkt_gain)
        if math.isfinite(cfg.T_reset) and st.k % int(cfg.T_reset) == 0:
            # predict from the measurement instead of the free-running nominal state
            st.x_hat = nominal_observer(self.model, x, np.clip(u_tilde + du, self.u_lo, self.u_hi))
        else:
            st.x_hat = x_next if x_next is not None else nominal_observer(self.model, st.x_hat, u_nom)
        st.k += 1
        return u

    __call__ = step

    def nominal_equilibrium(self, x0, r_window, delta_u=None, max_steps: int = 5000, tol: float = 1e-13):
        """Limit of the nominal closed loop under ``u_tilde + delta_u`` and its KKT residual."""
        win = np.atleast_2d(np.asarray(r_window, float))
        v = np.zeros(self.m) if delta_u is None else np.atleast_1d(np.asarray(delta_u, float))
        x = np.asarray(x0, dtype=float)
        for _ in range(max_steps):
            u = np.clip(np.asarray(self.policy(x, win), float) + v, self.u_lo, self.u_hi)
            nxt = self.model.step(x, u)
            if np.linalg.norm(nxt - x) <= tol * (1 + np.linalg.norm(x)):
                x = nxt
                break
            x = nxt
        return x, kkt_residual(self.gradients(x, v, win, with_hessian=False))

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["k", "u_tilde", "delta_u", "K", "s_norm", "kkt_residual"])
            for k, ut, du, K, sn, res in self.log:
                w.writerow([k, _fmt(ut), _fmt(du), _fmt(K), repr(sn), repr(res)])


def _fmt(v) -> str:
    v = np.atleast_1d(v)
    return repr(float(v[0])) if v.size == 1 else ";".join(repr(float(a)) for a in v)
