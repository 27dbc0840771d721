"""Dense strictly convex QP solver (Goldfarb-Idnani dual active set).

Solves::

    min  0.5 x'Hx + g'x
    s.t. A_eq x  = b_eq
         A_in x <= b_in

H must be symmetric positive definite. The dual method needs no feasible
starting point and reports infeasibility through :class:`QPInfeasible`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS = np.finfo(float).eps


class QPInfeasible(RuntimeError):
    """The constraint set of the QP is empty (or numerically so)."""


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    lam_eq: np.ndarray
    lam_in: np.ndarray  # >= 0, one per inequality row
    active: np.ndarray  # indices of active inequality rows
    iterations: int


def _givens(a: float, b: float):
    h = np.hypot(a, b)
    if h == 0.0:
        return None
    c, s = a / h, b / h
    if c < 0.0:
        return -c, -s, -h
    return c, s, h


class _Factor:
    """J = L^-T rotated so that its first iq columns span the active normals."""

    def __init__(self, H: np.ndarray):
        L = np.linalg.cholesky(H)
        n = H.shape[0]
        self.n = n
        self.J = np.linalg.solve(L.T, np.eye(n))
        self.R = np.zeros((n, n))
        self.iq = 0
        self.r_norm = 1.0

    def direction(self, normal: np.ndarray):
        d = self.J.T @ normal
        iq = self.iq
        z = self.J[:, iq:] @ d[iq:]
        if iq:
            r = np.linalg.solve(np.triu(self.R[:iq, :iq]), d[:iq])
        else:
            r = np.zeros(0)
        return d, z, r

    def add(self, d: np.ndarray) -> bool:
        J, n, iq = self.J, self.n, self.iq
        for j in range(n - 1, iq, -1):
            rot = _givens(d[j - 1], d[j])
            if rot is None:
                continue
            c, s, h = rot
            d[j - 1], d[j] = h, 0.0
            xny = s / (1.0 + c)
            t1 = J[:, j - 1].copy()
            t2 = J[:, j].copy()
            J[:, j - 1] = t1 * c + t2 * s
            J[:, j] = xny * (t1 + J[:, j - 1]) - t2
        self.iq = iq = iq + 1
        self.R[:iq, iq - 1] = d[:iq]
        if abs(d[iq - 1]) <= _EPS * self.r_norm:
            return False
        self.r_norm = max(self.r_norm, abs(d[iq - 1]))
        return True

    def drop(self, pos: int):
        """Remove the active constraint stored in column ``pos`` of R."""
        R, J, n = self.R, self.J, self.n
        iq = self.iq
        R[:, pos:iq - 1] = R[:, pos + 1:iq]
        R[:, iq - 1] = 0.0
        self.iq = iq = iq - 1
        for j in range(pos, iq):
            rot = _givens(R[j, j], R[j + 1, j])
            if rot is None:
                continue
            c, s, h = rot
            R[j, j], R[j + 1, j] = h, 0.0
            xny = s / (1.0 + c)
            if j + 1 < iq:
                t1 = R[j, j + 1:iq].copy()
                t2 = R[j + 1, j + 1:iq].copy()
                R[j, j + 1:iq] = t1 * c + t2 * s
                R[j + 1, j + 1:iq] = xny * (t1 + R[j, j + 1:iq]) - t2
            t1 = J[:, j].copy()
            t2 = J[:, j + 1].copy()
            J[:, j] = t1 * c + t2 * s
            J[:, j + 1] = xny * (J[:, j] + t1) - t2


def solve_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None, max_iter: int = 500) -> QPResult:
    """Solve a strictly convex QP. See module docstring for the form."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float).ravel()
    n = g.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float).ravel()
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, float))
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, float).ravel()
    p, m = A_eq.shape[0], A_in.shape[0]

    # internal convention: c_i(x) = N_i' x - e_i >= 0
    N_in = -A_in
    e_in = -b_in

    try:
        fac = _Factor(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise ValueError("QP Hessian is not positive definite") from exc
    c1 = float(np.trace(H))
    c2 = float(np.trace(fac.J))

    x = -np.linalg.solve(H, g)
    f = 0.5 * float(g @ x)
    # active[k] >= 0 is an inequality row; -(i+1) is equality row i
    active: list[int] = []
    u: list[float] = []

    for i in range(p):
        normal = A_eq[i]
        d, z, r = fac.direction(normal)
        zn = float(z @ normal)
        t2 = 0.0
        if abs(float(z @ z)) > _EPS:
            t2 = (b_eq[i] - float(normal @ x)) / zn
        x = x + t2 * z
        u = [uk - t2 * rk for uk, rk in zip(u, r)] + [t2]
        f += 0.5 * t2 * t2 * zn
        active.append(-(i + 1))
        if not fac.add(d):
            raise QPInfeasible("equality constraints are linearly dependent")

    if m == 0:
        if p and np.max(np.abs(A_eq @ x - b_eq)) > 1e-8 * (1 + np.max(np.abs(b_eq))):
            raise QPInfeasible("equality constraints are inconsistent")
        return _result(x, H, g, p, m, active, u, 0)

    excluded = np.zeros(m, dtype=bool)
    it = 0
    while True:
        it += 1
        if it > max_iter:
            raise RuntimeError("QP active-set iteration limit reached")
        s = N_in @ x - e_in
        in_set = np.zeros(m, dtype=bool)
        for k in active:
            if k >= 0:
                in_set[k] = True
        psi = float(np.minimum(s, 0.0).sum())
        if abs(psi) <= m * _EPS * c1 * c2 * 100.0:
            return _result(x, H, g, p, m, active, u, it)
        x_old, active_old, u_old = x.copy(), list(active), list(u)

        while True:  # step 2: pick the most violated constraint
            cand = np.where(in_set | excluded, 0.0, s)
            ip = int(np.argmin(cand))
            if cand[ip] >= 0.0:
                return _result(x, H, g, p, m, active, u, it)
            normal = N_in[ip]
            u_new = 0.0
            restart = False
            while True:  # step 2a/2b/2c
                d, z, r = fac.direction(normal)
                # dual step length (only inequality multipliers may hit zero)
                t1, drop_pos = np.inf, -1
                for pos in range(p, len(active)):
                    if r[pos] > 0.0 and u[pos] / r[pos] < t1:
                        t1, drop_pos = u[pos] / r[pos], pos
                zz = float(z @ z)
                t2 = -s[ip] / float(z @ normal) if abs(zz) > _EPS else np.inf
                t = min(t1, t2)
                if not np.isfinite(t):
                    raise QPInfeasible("inequality constraints are infeasible")
                if not np.isfinite(t2):
                    u = [uk - t * rk for uk, rk in zip(u, r)]
                    u_new += t
                    in_set[active[drop_pos]] = False
                    del active[drop_pos]
                    del u[drop_pos]
                    fac.drop(drop_pos)
                    continue
                x = x + t * z
                f += t * float(z @ normal) * (0.5 * t + u_new)
                u = [uk - t * rk for uk, rk in zip(u, r)]
                u_new += t
                if abs(t - t2) < _EPS:
                    if not fac.add(d):
                        # degenerate: exclude ip and roll back to the saved point
                        excluded[ip] = True
                        fac = _refactor(H, A_eq, N_in, active_old, p)
                        active, u, x = active_old, u_old, x_old
                        in_set[:] = False
                        for k in active:
                            if k >= 0:
                                in_set[k] = True
                        s = N_in @ x - e_in
                        x_old, active_old, u_old = x.copy(), list(active), list(u)
                        restart = True
                        break
                    active.append(ip)
                    u.append(u_new)
                    break
                # partial step: drop the blocking constraint and retry
                in_set[active[drop_pos]] = False
                del active[drop_pos]
                del u[drop_pos]
                fac.drop(drop_pos)
                s[ip] = float(normal @ x) - e_in[ip]
            if restart:
                continue
            break


def _refactor(H, A_eq, N_in, active, p):
    fac = _Factor(0.5 * (H + H.T))
    for k in active:
        normal = A_eq[-k - 1] if k < 0 else N_in[k]
        d, _, _ = fac.direction(normal)
        fac.add(d)
    return fac


def _result(x, H, g, p, m, active, u, it) -> QPResult:
    lam_eq = np.zeros(p)
    lam_in = np.zeros(m)
    act = []
    for k, uk in zip(active, u):
        if k < 0:
            # eq rows enter as N'x - e = 0 with N = a; Lagrangian f - u(a'x - b)
            lam_eq[-k - 1] = -uk
        else:
            lam_in[k] = uk
            act.append(k)
    obj = 0.5 * float(x @ H @ x) + float(g @ x)
    return QPResult(x=x, objective=obj, lam_eq=lam_eq, lam_in=lam_in,
                    active=np.array(sorted(act), dtype=int), iterations=it)
