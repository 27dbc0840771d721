"""Offline approximation of the safe NMPC policy and its verification.

The policy maps ``z = [x; r(k); ...; r(k+N)]`` to the NMPC input. Labels come
from closed-loop rollouts of the nominal model under the NMPC, the map is
learned with a static STF trained by concurrent learning, and the result is
checked on ``N_v`` random closed loops.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import concurrent_learning as cl
from . import nmpc
from . import stf_model as stf


class DatasetError(RuntimeError):
    pass


class RankConditionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyLayout:
    n_state: int
    n_ref: int
    N: int
    m: int

    @property
    def n_input(self) -> int:
        return self.n_state + (self.N + 1) * self.n_ref


def reference_window(ref, k: int, N: int) -> np.ndarray:
    """Rows ``r(k..k+N)`` of a reference sequence, holding the last row."""
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    idx = np.minimum(np.arange(k, k + N + 1), len(ref) - 1)
    return ref[idx]


def policy_input(x, r_window, layout: PolicyLayout) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    R = np.asarray(r_window, dtype=float).reshape(-1)
    if x.size != layout.n_state or R.size != (layout.N + 1) * layout.n_ref:
        raise ValueError(f"policy input shape mismatch: x has {x.size} entries, window has {R.size}; "
                         f"expected {layout.n_state} and {(layout.N + 1) * layout.n_ref}")
    return np.concatenate([x, R])


@dataclass
class Dataset:
    layout: PolicyLayout
    Z: np.ndarray
    U: np.ndarray
    n_infeasible: int = 0
    n_solves: int = 0

    def __len__(self):
        return len(self.Z)

    def write_csv(self, path) -> None:
        lay = self.layout
        head = [f"x_{i + 1}" for i in range(lay.n_state)]
        for j in range(lay.N + 1):
            head += [f"r_{j}"] if lay.n_ref == 1 else [f"r_{j}_{c + 1}" for c in range(lay.n_ref)]
        head += [f"u_{i + 1}" for i in range(lay.m)]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(head)
            for z, u in zip(self.Z, self.U):
                w.writerow([repr(float(v)) for v in np.concatenate([z, u])])

    @classmethod
    def read_csv(cls, path, layout: PolicyLayout) -> "Dataset":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        width = layout.n_input + layout.m
        if not rows or len(rows[0]) != width:
            raise ValueError(f"{path}: expected {width} columns")
        data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, width)
        return cls(layout, data[:, :layout.n_input], data[:, layout.n_input:])


@dataclass(frozen=True)
class ScenarioSampler:
    """Initial states uniform in a box, references drawn from ``ref_levels``.

    Each scenario holds one level and switches to another one at a random
    step with probability ``step_prob``.
    """

    state_lo: np.ndarray
    state_hi: np.ndarray
    ref_levels: Sequence
    steps: int = 50
    step_prob: float = 0.5

    def sample(self, rng: np.random.Generator, N: int):
        lo = np.asarray(self.state_lo, float)
        hi = np.asarray(self.state_hi, float)
        x0 = lo + (hi - lo) * rng.random(lo.size)
        levels = np.atleast_2d(np.asarray(self.ref_levels, float))
        ref = np.repeat(levels[rng.integers(len(levels))][None, :], self.steps + N + 1, axis=0)
        if len(levels) > 1 and rng.random() < self.step_prob:
            k = int(rng.integers(1, self.steps + N + 1))
            ref[k:] = levels[rng.integers(len(levels))]
        return x0, ref


def collect_dataset(model, controller: nmpc.NmpcController, sampler: ScenarioSampler, n_rollouts: int,
                    seed: int, max_infeasible: float = 0.1) -> Dataset:
    """NMPC-labelled closed loops on the nominal model.

    Every label is a cold-started solve, so replaying ``nmpc.solve`` on a
    recorded ``(x, r)`` reproduces it exactly. A failed solve ends its rollout.
    """
    N = controller.N
    n_ref = model.C.shape[0]
    layout = PolicyLayout(model.n, n_ref, N, model.m)
    Z, Us = [], []
    bad = total = 0
    for i in range(n_rollouts):
        rng = np.random.default_rng([seed, i])
        x, ref = sampler.sample(rng, N)
        for k in range(sampler.steps):
            win = reference_window(ref, k, N)
            sol = nmpc.solve(controller.problem(x, win), options=controller.options)
            total += 1
            if sol.status != "solved":
                bad += 1
                break
            u = sol.u[0]
            Z.append(policy_input(x, win, layout))
            Us.append(u.copy())
            x = model.step(x, u)
            if not np.all(np.isfinite(x)):
                break
    if total and bad > max_infeasible * total:
        raise DatasetError(f"{bad} of {total} NMPC solves were not solved (> {max_infeasible:.0%}); "
                           "shrink the scenario state box or relax the barrier")
    Z = np.array(Z).reshape(-1, layout.n_input)
    Us = np.array(Us).reshape(-1, layout.m)
    return Dataset(layout, Z, Us, bad, total)


def bfr(measured, simulated) -> float:
    """Best fitting rate ``100 (1 - ||y - yhat|| / ||y - mean(y)||)``, floored at 0."""
    y = np.asarray(measured, dtype=float)
    yh = np.asarray(simulated, dtype=float)
    if y.shape != yh.shape:
        raise ValueError("measured and simulated series must have equal shapes")
    if len(y) < 2:
        raise ValueError("bfr needs at least 2 samples")
    den = np.linalg.norm(y - y.mean(axis=0))
    if den == 0:
        raise ValueError("bfr undefined for a constant measured series")
    return max(0.0, 100.0 * (1.0 - np.linalg.norm(y - yh) / den))


class _Compiled:
    """Physical-unit STF arrays for fast repeated evaluation."""

    def __init__(self, model: stf.CompositeStfModel):
        m = model.denormalized()
        self.centers = np.array([c.center_u for c in m.clusters])
        self.precs = np.array([c.prec_u for c in m.clusters])
        self.A = np.array([lm.A for lm in m.locals])
        self.b = np.array([lm.b for lm in m.locals])
        self.single = m.L == 1

    def __call__(self, z):
        if self.single:
            return self.A[0] @ z + self.b[0]
        return self.weights(z)[0] @ (np.einsum("lij,j->li", self.A, z) + self.b)

    def weights(self, z):
        diff = z - self.centers
        G = np.einsum("lij,lj->li", self.precs, diff)
        return stf.softmax_neg(0.5 * np.maximum(np.einsum("li,li->l", diff, G), 0.0)), G

    def gradient(self, z):
        if self.single:
            return self.A[0] @ z + self.b[0], self.A[0]
        a, G = self.weights(z)
        F = np.einsum("lij,j->li", self.A, z) + self.b
        y = a @ F
        g_bar = a @ G
        J = np.einsum("l,lij->ij", a, self.A) - np.einsum("l,li,lj->ij", a, F, G - g_bar)
        return y, J


@dataclass(frozen=True, eq=False)
class PolicyApproximator:
    """Static STF over the informative entries of ``z``.

    ``keep`` masks out input channels that were constant in the training
    data; they carry no information and would block the rank condition.
    """

    stf: stf.CompositeStfModel
    layout: PolicyLayout
    keep: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    train_bfr: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "_fast", _Compiled(self.stf))

    def raw(self, z) -> np.ndarray:
        return self._fast(np.asarray(z, float)[self.keep])

    def __call__(self, x, r_window) -> np.ndarray:
        return evaluate_policy(self, x, r_window)

    def state_gradient(self, x, r_window):
        """Clamped output and ``d u / d x``; saturated channels have zero rows."""
        z = policy_input(x, r_window, self.layout)
        y, J = self._fast.gradient(z[self.keep])
        full = np.zeros((self.layout.m, self.layout.n_input))
        full[:, self.keep] = J
        Jx = full[:, :self.layout.n_state]
        u = np.clip(y, self.u_lo, self.u_hi)
        Jx[u != y] = 0.0
        return u, Jx


def evaluate_policy(policy: PolicyApproximator, x, r_window) -> np.ndarray:
    z = policy_input(x, r_window, policy.layout)
    return np.clip(policy.raw(z), policy.u_lo, policy.u_hi)


def train_policy(dataset: Dataset, hyper: stf.StfHyperParams | None = None,
                 config: cl.LearningConfig = cl.LearningConfig(), u_lo=-np.inf, u_hi=np.inf,
                 epochs: int = 1, max_updates: int | None = None, **fit_kw) -> PolicyApproximator:
    """Learn the policy with evolve + concurrent learning.

    ``hyper`` only needs ``L_max`` and ``create_threshold``; the static layout
    is filled in here. ``max_updates`` truncates training (used to build
    deliberately degraded policies).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    Z, U = dataset.Z, dataset.U
    keep = Z.std(axis=0) > 1e-12
    if not keep.any():
        raise RankConditionError("every policy input is constant; sample richer scenarios")
    n_in = int(keep.sum())
    base = hyper or stf.StfHyperParams()
    h = stf.StfHyperParams(L_max=base.L_max, create_threshold=base.create_threshold, n_u=1,
                           n_y=dataset.layout.m, n_static=n_in, sigma0=base.sigma0, forgetting=base.forgetting)
    norm = stf.Normalizer.fit(Z[:, keep], U)
    Zn = (Z[:, keep] - norm.u_mean) / norm.u_std
    Un = (U - norm.y_mean) / norm.y_std
    rows = len(Zn) * epochs if max_updates is None else min(max_updates, len(Zn) * epochs)
    ep = math.ceil(rows / len(Zn))
    idx = np.tile(np.arange(len(Zn)), ep)[:rows]
    model, stack = cl.fit_stf(Zn[idx], Un[idx], h, config, epochs=1, **fit_kw)
    if not cl.rank_condition(stack):
        raise RankConditionError(
            f"rank condition not met (stack rank < q = {stack.q}); collect richer scenarios "
            "(more reference levels, a wider state box or more rollouts)")
    model = stf.CompositeStfModel(model.hyper, model.clusters, model.locals, norm)
    pol = PolicyApproximator(model, dataset.layout, keep, np.broadcast_to(np.asarray(u_lo, float), (dataset.layout.m,)).copy(),
                             np.broadcast_to(np.asarray(u_hi, float), (dataset.layout.m,)).copy())
    pred = np.array([pol.raw(z) for z in Z])
    return PolicyApproximator(model, pol.layout, keep, pol.u_lo, pol.u_hi, bfr(U, pred))


def n_required(eps: float, kappa: float) -> int:
    """Smallest ``N_v`` with ``N_v >= log(1/kappa) / log(1/(1-eps))`` (at least 1)."""
    if not (0 < eps < 1 and 0 < kappa < 1):
        raise ValueError("eps and kappa must lie in (0, 1)")
    bound = math.log(1.0 / kappa) / math.log(1.0 / (1.0 - eps))
    n = math.ceil(bound)
    # guard against ceil of a value one ulp above an integer
    if n - 1 >= bound * (1 - 1e-12):
        n -= 1
    return max(1, n)


@dataclass(frozen=True)
class VerificationConfig:
    eps: float = 0.01
    kappa: float = 0.01
    T_sim: int = 100
    tol: float = 1e-2
    state_lo: np.ndarray | None = None
    state_hi: np.ndarray | None = None
    # rollouts that leave this box fail; default: 10x the sampling box
    operating_lo: np.ndarray | None = None
    operating_hi: np.ndarray | None = None
    reference: np.ndarray | None = None  # one row per output, held constant

    def __post_init__(self):
        if not (0 < self.eps < 1 and 0 < self.kappa < 1):
            raise ValueError("eps and kappa must lie in (0, 1)")
        if self.T_sim < 1 or not self.tol > 0:
            raise ValueError("T_sim must be >= 1 and tol > 0")


@dataclass
class VerificationReport:
    passed: bool
    n_v: int
    eps: float
    kappa: float
    failures: list = field(default_factory=list)  # (index, initial state)
    seed: int = 0

    def guarantee(self) -> str:
        if not self.passed:
            return f"FAILED: {len(self.failures)} of {self.n_v} closed loops unstable; retrain the policy"
        return (f"PASSED: with confidence {1 - self.kappa:g} the closed loop is stable "
                f"with probability at least {1 - self.eps:g} (N_v = {self.n_v}, no failures)")

    def to_text(self) -> str:
        lines = [f"result = {'pass' if self.passed else 'fail'}", f"n_v = {self.n_v}",
                 f"eps = {self.eps:g}", f"kappa = {self.kappa:g}", f"seed = {self.seed}",
                 f"failures = {len(self.failures)}",
                 "stability = state norm below tol by T_sim without leaving the operating box",
                 f"guarantee = {self.guarantee()}"]
        for i, x0 in self.failures:
            lines.append(f"failure {i}: x0 = [{', '.join(repr(float(v)) for v in x0)}]")
        return "\n".join(lines) + "\n"


def probabilistic_verify(policy: Callable, model, config: VerificationConfig, seed: int = 0,
                         target=None) -> VerificationReport:
    """Simulate ``N_v`` closed loops of ``policy(x, r_window)`` on the nominal model.

    A loop passes when ``||x - target||`` falls below ``tol`` by ``T_sim`` and
    the state never leaves the operating box.
    """
    n_v = n_required(config.eps, config.kappa)
    lo = np.asarray(config.state_lo, float)
    hi = np.asarray(config.state_hi, float)
    span = np.maximum(np.abs(lo), np.abs(hi))
    op_lo = -10 * span if config.operating_lo is None else np.asarray(config.operating_lo, float)
    op_hi = 10 * span if config.operating_hi is None else np.asarray(config.operating_hi, float)
    target = np.zeros(lo.size) if target is None else np.asarray(target, float)
    layout = getattr(policy, "layout", None)
    n_ref = model.C.shape[0]
    N = layout.N if layout is not None else 0
    r = np.zeros(n_ref) if config.reference is None else np.asarray(config.reference, float)
    win = np.repeat(r[None, :], N + 1, axis=0)
    failures = []
    for i in range(n_v):
        rng = np.random.default_rng([seed, i])
        x0 = lo + (hi - lo) * rng.random(lo.size)
        x = x0
        ok = False
        with np.errstate(all="ignore"):
            try:
                for _ in range(config.T_sim):
                    x = model.step(x, policy(x, win))
                    if not np.all(np.isfinite(x)) or np.any(x < op_lo) or np.any(x > op_hi):
                        break
                else:
                    ok = bool(np.linalg.norm(x - target) < config.tol)
            except FloatingPointError:
                ok = False
        if not ok:
            failures.append((i, x0))
    return VerificationReport(not failures, n_v, config.eps, config.kappa, failures, seed)
