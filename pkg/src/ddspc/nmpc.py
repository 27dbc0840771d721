"""RCBF-constrained nonlinear MPC solved by sequential quadratic programming.

The horizon problem is condensed: decision variables are the inputs
``u_0 .. u_{N-1}`` and the scalar decay rate ``gamma``; states come from exact
rollouts of the model. Each SQP iteration builds a Gauss-Newton Hessian of the
quadratic cost, linearizes the barrier rows

    h(x_{k+1}) - (1 - gamma) h(x_k) + gamma eta (eps_w + eps_s + eps_c) <= 0

for every k, solves the QP with the input box and ``gamma_min <= gamma <= 1``
and takes a backtracking step on an l1 merit function.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import dlqr
from .qp import QPInfeasible, solve_qp
from .safety import BarrierSpec, UncertaintyBounds


def _pd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} must be a symmetric matrix")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return M


@dataclass(frozen=True, eq=False)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray
    P_out: np.ndarray
    Q_N: np.ndarray
    P_N: np.ndarray
    P_gamma: float = 1.0

    def __post_init__(self):
        for name in ("Q", "R", "P_out", "Q_N", "P_N"):
            object.__setattr__(self, name, _pd(getattr(self, name), name))
        if not self.P_gamma > 0:
            raise ValueError("P_gamma must be > 0")


def stage_cost(x, u, y, r, w: CostWeights) -> float:
    x, u = np.atleast_1d(x), np.atleast_1d(u)
    e = np.atleast_1d(y) - np.atleast_1d(r)
    return float(x @ w.Q @ x + u @ w.R @ u + e @ w.P_out @ e)


def terminal_cost(x, y, r, w: CostWeights) -> float:
    x = np.atleast_1d(x)
    e = np.atleast_1d(y) - np.atleast_1d(r)
    return float(x @ w.Q_N @ x + e @ w.P_N @ e)


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-6
    max_iter: int = 50
    gamma_min: float = 1e-3
    slack_penalty: float = 1e6
    feas_tol: float = 1e-8
    armijo: float = 1e-4
    min_step: float = 1e-10
    record_trace: bool = False


@dataclass(eq=False)
class OcpProblem:
    model: object
    x0: np.ndarray
    ref: np.ndarray  # (N+1) x n_y
    weights: CostWeights
    u_lo: np.ndarray
    u_hi: np.ndarray
    barrier: BarrierSpec | None = None
    bounds: UncertaintyBounds = field(default_factory=UncertaintyBounds)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.ref = np.atleast_2d(np.asarray(self.ref, dtype=float))
        if self.ref.shape[0] == 1 and self.ref.shape[1] != self.model.C.shape[0]:
            self.ref = self.ref.T
        self.u_lo = np.broadcast_to(np.asarray(self.u_lo, dtype=float), (self.model.m,)).copy()
        self.u_hi = np.broadcast_to(np.asarray(self.u_hi, dtype=float), (self.model.m,)).copy()
        if self.N < 1:
            raise ValueError("horizon N must be >= 1 (reference needs N+1 rows)")
        if np.any(self.u_lo > self.u_hi):
            raise ValueError("input box must satisfy lo <= hi")
        if self.x0.size != self.model.n:
            raise ValueError(f"x0 has length {self.x0.size}, model expects {self.model.n}")

    @property
    def N(self) -> int:
        return self.ref.shape[0] - 1


@dataclass(eq=False)
class OcpSolution:
    u: np.ndarray
    x: np.ndarray
    gamma: float
    objective: float
    iterations: int
    violation: float
    kkt_residual: float
    status: str  # solved | max_iter | infeasible
    fallback: bool = False
    merit_steps: list = field(default_factory=list)  # (before, after) of accepted steps
    trace: list = field(default_factory=list)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "merit", "kkt_residual", "step_norm", "gamma"])
            for row in self.trace:
                wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


class _Eval:
    """Rollout, cost and constraint values at one iterate (plus derivatives on demand)."""

    def __init__(self, prob: OcpProblem, U: np.ndarray, gamma: float):
        self.prob, self.U, self.gamma = prob, U, gamma
        m = prob.model
        xs = [prob.x0]
        for u in U:
            xs.append(np.asarray(m.step(xs[-1], u), dtype=float))
            if not np.all(np.isfinite(xs[-1])):
                raise FloatingPointError("model rollout produced a non-finite state")
        self.X = np.array(xs)
        w, C, N = prob.weights, m.C, prob.N
        Y = self.X @ C.T
        self.E = Y - prob.ref
        J = sum(stage_cost(self.X[k], U[k], Y[k], prob.ref[k], w) for k in range(N))
        J += terminal_cost(self.X[N], Y[N], prob.ref[N], w)
        self.J = J + w.P_gamma * gamma ** 2
        if prob.barrier is not None:
            self.hv = np.array([prob.barrier(x) for x in self.X])
            margin = prob.barrier.eta * prob.bounds.total
            self.c = self.hv[1:] - (1.0 - gamma) * self.hv[:-1] + gamma * margin
        else:
            self.c = np.zeros(0)

    def violation(self) -> float:
        return float(np.max(self.c, initial=0.0))

    def merit(self, mu: float) -> float:
        return self.J + mu * float(np.sum(np.maximum(self.c, 0.0)))

    def derivatives(self):
        prob, m = self.prob, self.prob.model
        N, n, nu = prob.N, m.n, m.m
        nv = N * nu + 1
        S = np.zeros((N + 1, n, N * nu))
        for k in range(N):
            A, B = m.jacobians(self.X[k], self.U[k])
            S[k + 1] = A @ S[k]
            S[k + 1][:, k * nu:(k + 1) * nu] += B
        w, C = prob.weights, m.C
        g = np.zeros(nv)
        H = np.zeros((nv, nv))
        Wx = 2.0 * (w.Q + C.T @ w.P_out @ C)
        WN = 2.0 * (w.Q_N + C.T @ w.P_N @ C)
        for k in range(1, N + 1):
            if k < N:
                gx = 2.0 * (w.Q @ self.X[k] + C.T @ w.P_out @ self.E[k])
                Wk = Wx
            else:
                gx = 2.0 * (w.Q_N @ self.X[k] + C.T @ w.P_N @ self.E[k])
                Wk = WN
            g[:-1] += gx @ S[k]
            H[:-1, :-1] += S[k].T @ Wk @ S[k]
        for k in range(N):
            sl = slice(k * nu, (k + 1) * nu)
            g[sl] += 2.0 * w.R @ self.U[k]
            H[sl, sl] += 2.0 * w.R
        g[-1] = 2.0 * w.P_gamma * self.gamma
        H[-1, -1] = 2.0 * w.P_gamma
        G = np.zeros((self.c.size, nv))
        if prob.barrier is not None:
            grads = [prob.barrier.gradient(x) for x in self.X]
            margin = prob.barrier.eta * prob.bounds.total
            for k in range(N):
                G[k, :-1] = grads[k + 1] @ S[k + 1] - (1.0 - self.gamma) * (grads[k] @ S[k])
                G[k, -1] = self.hv[k] + margin
        return g, 0.5 * (H + H.T), G


def _box_rows(prob: OcpProblem, U, gamma, gamma_min):
    """Bounds on the step as rows ``A d <= b``."""
    N, nu = prob.N, prob.model.m
    nv = N * nu + 1
    I = np.eye(nv)
    lo = np.concatenate([np.tile(prob.u_lo, N), [gamma_min]])
    hi = np.concatenate([np.tile(prob.u_hi, N), [1.0]])
    w = np.concatenate([U.ravel(), [gamma]])
    return np.vstack([I, -I]), np.concatenate([hi - w, w - lo])


def solve(problem: OcpProblem, warm_start=None, options: SolverOptions = SolverOptions()) -> OcpSolution:
    """Solve the RCBF-NMPC program; ``warm_start`` is ``(U, gamma)`` or ``U``."""
    prob, opt = problem, options
    N, nu = prob.N, prob.model.m
    if warm_start is None:
        U = np.zeros((N, nu))
        gamma = 1.0
    elif isinstance(warm_start, tuple):
        U = np.array(warm_start[0], dtype=float).reshape(N, nu)
        gamma = float(warm_start[1])
    else:
        U = np.array(warm_start, dtype=float).reshape(N, nu)
        gamma = 1.0
    U = np.clip(U, prob.u_lo, prob.u_hi)
    gamma = min(max(gamma, opt.gamma_min), 1.0)
    ev = _Eval(prob, U, gamma)
    mu = 10.0
    fallback = False
    merit_steps, trace = [], []
    status = "max_iter"
    kkt = np.inf
    it = 0
    for it in range(1, opt.max_iter + 1):
        g, H, G = ev.derivatives()
        A_box, b_box = _box_rows(prob, ev.U, ev.gamma, opt.gamma_min)
        nv = g.size
        try:
            res = solve_qp(H, g, A_in=np.vstack([A_box, G]), b_in=np.concatenate([b_box, -ev.c]))
            d = res.x
            lam_box, lam_c = res.lam_in[:A_box.shape[0]], res.lam_in[A_box.shape[0]:]
        except QPInfeasible:
            # elastic QP: slack s >= 0 on every barrier row
            nc = G.shape[0]
            Hs = np.zeros((nv + nc, nv + nc))
            Hs[:nv, :nv] = H
            Hs[nv:, nv:] = 1e-6 * np.eye(nc)
            gs = np.concatenate([g, np.full(nc, opt.slack_penalty)])
            A = np.vstack([
                np.hstack([A_box, np.zeros((A_box.shape[0], nc))]),
                np.hstack([G, -np.eye(nc)]),
                np.hstack([np.zeros((nc, nv)), -np.eye(nc)]),
            ])
            b = np.concatenate([b_box, -ev.c, np.zeros(nc)])
            res = solve_qp(Hs, gs, A_in=A, b_in=b)
            d = res.x[:nv]
            lam_box = res.lam_in[:A_box.shape[0]]
            lam_c = res.lam_in[A_box.shape[0]:A_box.shape[0] + nc]
            fallback = True
        # KKT residual of the current iterate with the QP multipliers
        stat = g + A_box.T @ lam_box + G.T @ lam_c
        comp_box = np.abs(lam_box * b_box)
        comp_c = np.abs(lam_c * ev.c)
        kkt = max(np.max(np.abs(stat)) / (1.0 + np.max(np.abs(g))),
                  float(np.max(comp_box, initial=0.0)), float(np.max(comp_c, initial=0.0)), ev.violation())
        if kkt <= opt.kkt_tol and ev.violation() <= opt.feas_tol:
            status = "solved"
            break
        if lam_c.size:
            mu = max(mu, 1.5 * float(np.max(lam_c)) + 1.0)
        m0 = ev.merit(mu)
        D = float(g @ d) - mu * float(np.sum(np.maximum(ev.c, 0.0)))
        t = 1.0
        accepted = None
        while t >= opt.min_step:
            Ut = ev.U + t * d[:-1].reshape(N, nu)
            gt = ev.gamma + t * d[-1]
            Ut = np.clip(Ut, prob.u_lo, prob.u_hi)
            gt = min(max(gt, opt.gamma_min), 1.0)
            trial = _Eval(prob, Ut, gt)
            m1 = trial.merit(mu)
            if m1 <= m0 + opt.armijo * t * min(D, 0.0) and m1 <= m0:
                accepted = trial
                break
            t *= 0.5
        if accepted is None:
            # no decrease possible along the QP direction: numerically stationary
            status = "solved" if kkt <= 1e3 * opt.kkt_tol else "max_iter"
            break
        merit_steps.append((m0, m1))
        if opt.record_trace:
            trace.append((it, m1, kkt, t * float(np.linalg.norm(d)), accepted.gamma))
        ev = accepted
    if ev.violation() > opt.feas_tol and (status == "solved" or fallback):
        status = "infeasible"
    if opt.record_trace and (not trace or status == "solved"):
        trace.append((it, ev.merit(mu), kkt, 0.0, ev.gamma))
    return OcpSolution(ev.U.copy(), ev.X.copy(), float(ev.gamma), float(ev.J), it, ev.violation(), float(kkt),
                       status, fallback, merit_steps, trace)


def lqr_terminal_weight(model, x_e, u_e, weights_Q, weights_R, C=None, P_out=None):
    """Riccati solution of the linearization at ``(x_e, u_e)`` for the stage cost."""
    A, B = model.jacobians(np.asarray(x_e, float), np.atleast_1d(np.asarray(u_e, float)))
    Qs = np.asarray(weights_Q, float)
    if C is not None and P_out is not None:
        Qs = Qs + C.T @ P_out @ C
    _, P = dlqr(A, B, Qs, np.atleast_2d(weights_R))
    return 0.5 * (P + P.T)


class NmpcController:
    """Receding-horizon wrapper: solve, apply ``u*(0)``, warm start by shifting."""

    def __init__(self, model, weights: CostWeights, N: int, u_lo, u_hi, barrier: BarrierSpec | None = None,
                 bounds: UncertaintyBounds = UncertaintyBounds(), options: SolverOptions = SolverOptions()):
        self.model, self.weights, self.N = model, weights, N
        self.u_lo, self.u_hi = u_lo, u_hi
        self.barrier, self.bounds, self.options = barrier, bounds, options
        self.reset()

    def reset(self):
        self._warm = None
        self.last: OcpSolution | None = None

    def problem(self, x, ref_window) -> OcpProblem:
        return OcpProblem(self.model, x, ref_window, self.weights, self.u_lo, self.u_hi, self.barrier, self.bounds)

    def solve(self, x, ref_window) -> OcpSolution:
        sol = solve(self.problem(x, ref_window), self._warm, self.options)
        if sol.status == "infeasible" or not np.all(np.isfinite(sol.u)):
            self._warm = None
        else:
            self._warm = (np.vstack([sol.u[1:], sol.u[-1:]]), sol.gamma)
        self.last = sol
        return sol

    def __call__(self, x, ref_window) -> np.ndarray:
        return self.solve(x, ref_window).u[0]


# --- steady-state target ----------------------------------------------------

@dataclass(eq=False)
class SteadyState:
    x: np.ndarray
    u: np.ndarray
    gamma: float
    cost: float
    iterations: int
    status: str
    fixed_point_residual: float


def steady_state_cost(x, u, gamma, r, model, w: CostWeights) -> float:
    y = model.C @ x
    return stage_cost(x, u, y, r, w) + terminal_cost(x, y, r, w) + w.P_gamma * gamma ** 2


def steady_state_solve(model, r, weights: CostWeights, u_lo, u_hi, barrier: BarrierSpec | None = None,
                       bounds: UncertaintyBounds = UncertaintyBounds(), x_init=None, u_init=None,
                       options: SolverOptions = SolverOptions()) -> SteadyState:
    """``min phi + psi + P_gamma gamma^2`` s.t. ``x = f(x, u)``, input box and
    the steady-state barrier row ``gamma (h(x) + eta sum eps) <= 0``.

    Full-space SQP over ``(x, u, gamma)`` with an l1 merit on the equality.
    """
    n, nu = model.n, model.m
    r = np.atleast_1d(np.asarray(r, float))
    u_lo = np.broadcast_to(np.asarray(u_lo, float), (nu,))
    u_hi = np.broadcast_to(np.asarray(u_hi, float), (nu,))
    x = np.zeros(n) if x_init is None else np.array(x_init, float)
    u = np.clip(np.zeros(nu) if u_init is None else np.atleast_1d(np.array(u_init, float)), u_lo, u_hi)
    gamma = 1.0
    w, C = weights, model.C
    Wx = 2.0 * (w.Q + w.Q_N + C.T @ (w.P_out + w.P_N) @ C)
    nv = n + nu + 1
    H = np.zeros((nv, nv))
    H[:n, :n] = Wx
    H[n:n + nu, n:n + nu] = 2.0 * w.R
    H[-1, -1] = 2.0 * w.P_gamma
    margin = 0.0 if barrier is None else barrier.eta * bounds.total

    def parts(x, u, g):
        ceq = np.asarray(model.step(x, u), float) - x
        cin = np.zeros(0) if barrier is None else np.array([g * (barrier(x) + margin)])
        return steady_state_cost(x, u, g, r, model, w), ceq, cin

    def merit(x, u, g, mu):
        J, ceq, cin = parts(x, u, g)
        return J + mu * (np.sum(np.abs(ceq)) + np.sum(np.maximum(cin, 0.0)))

    mu = 10.0
    status = "max_iter"
    it = 0
    for it in range(1, options.max_iter + 1):
        J, ceq, cin = parts(x, u, gamma)
        e = C @ x - r
        grad = np.concatenate([2.0 * (w.Q + w.Q_N) @ x + 2.0 * C.T @ (w.P_out + w.P_N) @ e,
                               2.0 * w.R @ u, [2.0 * w.P_gamma * gamma]])
        fx, fu = model.jacobians(x, u)
        Aeq = np.hstack([fx - np.eye(n), fu, np.zeros((n, 1))])
        rows, rhs = [], []
        I = np.eye(nv)
        lo = np.concatenate([np.full(n, -np.inf), u_lo, [options.gamma_min]])
        hi = np.concatenate([np.full(n, np.inf), u_hi, [1.0]])
        wv = np.concatenate([x, u, [gamma]])
        for i in range(n, nv):
            rows += [I[i], -I[i]]
            rhs += [hi[i] - wv[i], wv[i] - lo[i]]
        if barrier is not None:
            gb = np.concatenate([gamma * barrier.gradient(x), np.zeros(nu), [barrier(x) + margin]])
            rows.append(gb)
            rhs.append(-cin[0])
        A_in, b_in = np.array(rows), np.array(rhs)
        res = solve_qp(H, grad, Aeq, -ceq, A_in, b_in)
        d = res.x
        stat = grad + Aeq.T @ res.lam_eq + A_in.T @ res.lam_in
        kkt = max(np.max(np.abs(stat)) / (1.0 + np.max(np.abs(grad))), np.max(np.abs(ceq)),
                  float(np.max(np.abs(res.lam_in * b_in), initial=0.0)), float(np.max(cin, initial=0.0)))
        if kkt <= options.kkt_tol:
            status = "solved"
            break
        mu = max(mu, 1.5 * float(np.max(np.abs(np.concatenate([res.lam_eq, res.lam_in])), initial=0.0)) + 1.0)
        m0 = merit(x, u, gamma, mu)
        t = 1.0
        while t >= options.min_step:
            xt, ut, gt = x + t * d[:n], np.clip(u + t * d[n:n + nu], u_lo, u_hi), min(max(gamma + t * d[-1], options.gamma_min), 1.0)
            if merit(xt, ut, gt, mu) <= m0 - options.armijo * t * max(m0 - J, 0.0) + 1e-15 * abs(m0):
                break
            t *= 0.5
        else:
            break
        x, u, gamma = xt, ut, gt
    J, ceq, _ = parts(x, u, gamma)
    return SteadyState(x, u, float(gamma), float(J), it, status, float(np.linalg.norm(ceq)))
