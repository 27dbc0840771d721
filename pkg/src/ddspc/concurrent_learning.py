"""Discrete-time concurrent learning of the STF local-model parameters.

The update law combines the current normalized sample with a recorded
history stack::

    Phi <- Phi - r e zbar' - r sum_j e_j zbar_j'

where ``zbar = zeta / m``, ``m = sqrt(rho + zeta' zeta)`` and every ``e_j`` is
recomputed with the current ``Phi``. Convergence needs the stack to span the
parameter space (rank condition) and ``r < 2 lambda_min(H2) / lambda_max(H2)^2``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import stf_model as stf


class LearningDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class LearningConfig:
    rho: float = 1.0
    r: float = 0.1
    auto_rate: bool = True
    safety_fraction: float = 0.5
    # "min_eig": r = safety * 2 lmin / lmax^2 (the convergence bound);
    # "max_eig": r = safety * 2 / lmax, a faster gradient-style step
    rate_rule: str = "min_eig"
    s_max: int | None = None  # default 2q
    n_candidates: int | None = None  # swap positions tried per record (None: all)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not self.r > 0:
            raise ValueError("r must be > 0")
        if not 0 < self.safety_fraction < 1:
            raise ValueError("safety_fraction must be in (0, 1)")
        if self.n_candidates is not None and self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.rate_rule not in ("min_eig", "max_eig"):
            raise ValueError(f"unknown rate_rule {self.rate_rule!r}")


@dataclass(frozen=True, eq=False)
class HistoryStack:
    """Recorded normalized regressors ``zbar`` (rows), outputs and ``m``.

    ``U`` optionally keeps the raw STF regressors so the packed rows can be
    rebuilt after the cluster structure changes.
    """

    zbar: np.ndarray
    y: np.ndarray
    m: np.ndarray
    capacity: int
    U: np.ndarray | None = None

    @classmethod
    def empty(cls, q: int, n_y: int, capacity: int | None = None, n_regressor: int | None = None):
        cap = 2 * q if capacity is None else capacity
        if cap < q:
            raise ValueError("stack capacity must be >= q")
        U = None if n_regressor is None else np.zeros((0, n_regressor))
        return cls(np.zeros((0, q)), np.zeros((0, n_y)), np.zeros(0), cap, U)

    def __len__(self):
        return self.zbar.shape[0]

    @property
    def q(self) -> int:
        return self.zbar.shape[1]

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity


def normalize(zeta, rho: float):
    """``(zeta / m, m)`` with ``m = sqrt(rho + zeta' zeta)``."""
    zeta = np.asarray(zeta, dtype=float)
    m = math.sqrt(rho + float(zeta @ zeta))
    return zeta / m, m


def _rank(M: np.ndarray, q: int) -> int:
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    tol = q * np.finfo(float).eps * sv[0]
    return int(np.sum(sv > tol))


def rank_condition(stack: HistoryStack) -> bool:
    """True iff the stored ``zbar`` span all ``q`` parameter directions."""
    if len(stack) < stack.q or stack.q == 0:
        return False
    return _rank(stack.zbar, stack.q) == stack.q


def h_matrices(stack: HistoryStack, zbar):
    zbar = np.asarray(zbar, dtype=float)
    H1 = stack.zbar.T @ stack.zbar
    H2 = H1 + np.outer(zbar, zbar)
    return H1, H2


def max_learning_rate(H2) -> float:
    """``2 lambda_min / lambda_max^2``; 0 when ``H2`` is singular."""
    ev = np.linalg.eigvalsh(np.asarray(H2, dtype=float))
    lmin, lmax = ev[0], ev[-1]
    if lmax <= 0 or lmin <= lmax * H2.shape[0] * np.finfo(float).eps:
        return 0.0
    return 2.0 * lmin / lmax ** 2


@dataclass(frozen=True)
class StepInfo:
    rank_ok: bool
    lambda_min_H2: float
    r: float
    frob_param_delta: float


def choose_rate(H2, rank_ok: bool, config: LearningConfig, ev=None) -> float:
    if not config.auto_rate:
        return config.r
    ev = np.linalg.eigvalsh(H2) if ev is None else ev
    lmin, lmax = ev[0], ev[-1]
    if lmax <= 0:
        return 0.0
    if config.rate_rule == "min_eig" and rank_ok and lmin > 0:
        return config.safety_fraction * 2.0 * lmin / lmax ** 2
    # rank condition not met yet (or max_eig rule): a step that is still
    # non-expansive for every direction of H2
    return config.safety_fraction * 2.0 / lmax


def cl_step(Phi, zeta, y, stack: HistoryStack, config: LearningConfig, rank_ok: bool | None = None):
    """One concurrent-learning update; returns ``(Phi_next, StepInfo)``."""
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    zbar, m = normalize(zeta, config.rho)
    ybar = np.atleast_1d(np.asarray(y, dtype=float)) / m
    e = Phi @ zbar - ybar
    Zs = stack.zbar
    E = Zs @ Phi.T - stack.y / stack.m[:, None] if len(stack) else np.zeros((0, Phi.shape[0]))
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(E))):
        raise LearningDiverged(f"non-finite identification error (|e|={np.linalg.norm(e)}, Phi max={np.abs(Phi).max()})")
    H1, H2 = h_matrices(stack, zbar)
    if rank_ok is None:
        rank_ok = rank_condition(stack)
    ev = np.linalg.eigvalsh(H2)
    r = choose_rate(H2, rank_ok, config, ev)
    grad = np.outer(e, zbar) + E.T @ Zs
    delta = r * grad
    lmin = float(ev[0])
    return Phi - delta, StepInfo(bool(rank_ok), lmin, float(r), float(np.linalg.norm(delta)))


def cl_update(Phi, zeta, y, stack: HistoryStack, config: LearningConfig) -> np.ndarray:
    return cl_step(Phi, zeta, y, stack, config)[0]


def _score(eigs: np.ndarray, q: int):
    lmax = eigs[..., -1]
    tol = q * np.finfo(float).eps * np.maximum(lmax, 1e-300)
    rank = np.sum(eigs > tol[..., None], axis=-1)
    return rank, eigs[..., 0]


def record_sample(stack: HistoryStack, zeta, y, m: float | None = None, rho: float = 1.0, U=None,
                  n_candidates: int | None = None):
    """Append, or swap in the sample if that raises ``lambda_min(H1)``.

    Returns ``(stack', accepted)``. At capacity every replacement position is
    tried (or, with ``n_candidates`` and a full-rank stack, only the entries
    with the smallest weight on the weakest eigenvector); candidates are
    ranked by (numerical rank, lambda_min) and the swap is rejected unless it
    strictly improves on the current stack.
    """
    zeta = np.asarray(zeta, dtype=float)
    if m is None:
        zbar, m = normalize(zeta, rho)
    else:
        zbar = zeta / m
    y = np.atleast_1d(np.asarray(y, dtype=float))
    Unew = None if stack.U is None or U is None else np.asarray(U, dtype=float)
    if not stack.full:
        newU = None if stack.U is None else np.vstack([stack.U, Unew[None, :]])
        return replace(stack, zbar=np.vstack([stack.zbar, zbar]), y=np.vstack([stack.y, y]),
                       m=np.append(stack.m, m), U=newU), True

    q = stack.q
    H1 = stack.zbar.T @ stack.zbar
    ev, V = np.linalg.eigh(H1)
    cur_rank, cur_min = _score(ev, q)
    # lambda_min(H1 - zj zj' + z z') <= lambda_min(H1) + (v_min' z)^2: a sample
    # with no component along the weakest direction cannot help
    if cur_rank == q and (V[:, 0] @ zbar) ** 2 <= 1e-14 * max(ev[-1], 1.0):
        return stack, False
    cand = np.arange(len(stack))
    if n_candidates is not None and cur_rank == q and len(stack) > n_candidates:
        # first order: removing z_j costs about (v_min' z_j)^2 of lambda_min
        cand = np.argsort((stack.zbar @ V[:, 0]) ** 2, kind="stable")[:n_candidates]
    Zc = stack.zbar[cand]
    C = H1[None] - np.einsum("si,sj->sij", Zc, Zc) + np.outer(zbar, zbar)[None]
    eigs = np.linalg.eigvalsh(C)
    ranks, mins = _score(eigs, q)
    best = None
    for i, j in enumerate(cand):
        key = (int(ranks[i]), float(mins[i]))
        if best is None or key > best[0]:
            best = (key, int(j))
    (b_rank, b_min), j = best
    gain = b_rank > cur_rank or (b_rank == cur_rank and b_min > cur_min + 1e-12 * max(ev[-1], 1.0))
    if not gain:
        return stack, False
    Z = stack.zbar.copy()
    Y = stack.y.copy()
    M = stack.m.copy()
    Z[j], Y[j], M[j] = zbar, y, m
    newU = None
    if stack.U is not None:
        newU = stack.U.copy()
        newU[j] = Unew
    return replace(stack, zbar=Z, y=Y, m=M, U=newU), True


def lyapunov(Phi_tilde, r: float) -> float:
    """``V = tr(Phi_tilde Omega^-1 Phi_tilde')`` with ``Omega = r I``."""
    Pt = np.atleast_2d(Phi_tilde)
    return float(np.sum(Pt * Pt)) / r


def noise_level(omega, zbar, m: float, s: int) -> float:
    """Per-step estimate of the bound on ``||H3||``: ``||omega_bar zbar'|| (s + 1)``."""
    wbar = np.atleast_1d(np.asarray(omega, dtype=float)) / m
    return float(np.linalg.norm(wbar) * np.linalg.norm(zbar)) * (s + 1)


def uub_bound(H2, r: float, eps_n: float) -> float:
    """Ultimate bound on ``||Phi_tilde||`` from ``Q1, Q2, Q3``."""
    ev = np.linalg.eigvalsh(np.asarray(H2, dtype=float))
    lmin, lmax = ev[0], ev[-1]
    Q1 = r * lmax ** 2 - 2.0 * lmin
    if Q1 >= 0:
        return math.inf
    Q2 = 2.0 * r * lmin * eps_n + 2.0 * eps_n
    Q3 = r * eps_n ** 2
    return (-Q2 - math.sqrt(Q2 * Q2 - 4.0 * Q1 * Q3)) / (2.0 * Q1)


# --- training loop over an evolving STF ------------------------------------

@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)
    rank_step: int | None = None  # first step at which the rank condition held

    def add(self, step: int, info: StepInfo):
        self.rows.append((step, int(info.rank_ok), info.lambda_min_H2, info.r, info.frob_param_delta))
        if info.rank_ok and self.rank_step is None:
            self.rank_step = step

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "rank_ok", "lambda_min_H2", "r", "frob_param_delta"])
            for s, ok, lm, r, d in self.rows:
                wr.writerow([s, ok, repr(lm), repr(r), repr(d)])


def _rebuild_stack(model, stack: HistoryStack, config: LearningConfig, q: int) -> HistoryStack:
    """Recompute packed rows of a stack after the cluster structure moved."""
    cap = config.s_max or 2 * q
    if len(stack) == 0:
        return HistoryStack.empty(q, model.hyper.n_y, max(cap, q), model.hyper.n_regressor)
    W = stf.weights_batch(model, stack.U)
    Z = stf.pack_regressor_batch(stack.U, W)
    m = np.sqrt(config.rho + np.einsum("ij,ij->i", Z, Z))
    keep = slice(0, min(len(stack), max(cap, q)))
    return HistoryStack(Z[keep] / m[keep, None], stack.y[keep], m[keep], max(cap, q), stack.U[keep])


def fit_stf(U_rows, Y_rows, hyper: stf.StfHyperParams, config: LearningConfig = LearningConfig(),
            epochs: int = 1, model: stf.CompositeStfModel | None = None, refresh_every: int = 1,
            record_every: int = 1, evolve_epochs: int | None = None, trace: TrainingTrace | None = None):
    """Train an STF on (already normalized) regressor/target rows.

    Each sample first passes through :func:`stf_model.evolve`, then one
    concurrent-learning step updates the local models. Stacked rows are
    rebuilt from their raw regressors every ``refresh_every`` steps so their
    interpolation weights follow the clusters. Cluster structure evolves
    during the first ``evolve_epochs`` passes (default: all).
    """
    U_rows = np.atleast_2d(np.asarray(U_rows, dtype=float))
    Y_rows = np.asarray(Y_rows, dtype=float).reshape(len(U_rows), -1)
    model = stf.CompositeStfModel(hyper) if model is None else model
    Phi = stf.pack_parameters(model)
    stack = HistoryStack.empty(max(model.q, 1), hyper.n_y, None, hyper.n_regressor)
    if model.L:
        stack = _rebuild_stack(model, stack, config, model.q)
    evolve_epochs = epochs if evolve_epochs is None else evolve_epochs
    step = 0
    rank_ok = False
    rank_dirty = True
    for ep in range(epochs):
        for U, y in zip(U_rows, Y_rows):
            step += 1
            moved = False
            if ep < evolve_epochs:
                model = model.with_parameters(Phi) if Phi.shape[1] else model
                model, event, _ = stf.evolve(model, U, y)
                moved = True
                if event == "created":
                    Phi = stf.pack_parameters(model)
                    stack = _rebuild_stack(model, stack, config, model.q)
                    rank_dirty = True
                    moved = False
            if moved and step % refresh_every == 0:
                stack = _rebuild_stack(model, stack, config, model.q)
                rank_dirty = True
            alpha = stf.interpolation_weights(model, U)
            zeta = stf.pack_regressor(U, alpha)
            if rank_dirty:
                rank_ok = rank_condition(stack)
                rank_dirty = False
            Phi, info = cl_step(Phi, zeta, y, stack, config, rank_ok)
            if trace is not None:
                trace.add(step, info)
            if step % record_every == 0 or not stack.full:
                stack, acc = record_sample(stack, zeta, y, rho=config.rho, U=U,
                                           n_candidates=config.n_candidates)
                rank_dirty = rank_dirty or acc
    return model.with_parameters(Phi), stack
