"""identify -> train-policy -> verify-policy -> simulate -> compare, plus bench.

Every phase reads its inputs from and writes its artifacts to ``cfg.out``.
Metric CSVs hold only deterministic numbers; wall times go to separate
timing files.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import adaptation as ad
from .. import concurrent_learning as cl
from .. import nmpc
from .. import policy as P
from .. import stf_model as stf
from ..models import LinearModel, dlqr
from ..plants import (CartPoleModel, CartPoleParams, CsvSchemaError, DisturbanceModel, read_io_csv,
                      sample_disturbance, step as cartpole_step, write_io_csv)
from ..safety import UncertaintyBounds, barrier_from_config
from ..state_space import StfStateSpaceModel
from . import plots
from .config import ConfigError, ExperimentConfig, plant_dims

CONTROLLERS = ("nmpc", "offline_policy", "online_adapted")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_VERIFY, EXIT_SAFETY, EXIT_BFR = 0, 1, 2, 3, 4, 5


class PipelineError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


# --- small I/O helpers ------------------------------------------------------

def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics(path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["metric", "value"])
        for k, v in metrics.items():
            wr.writerow([k, _num(v)])


def read_metrics(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    out = {}
    for k, v in rows:
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([_num(v) for v in r])


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PipelineError(f"{path}: empty file")
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing artifact {path}; run `ddspc {producer}` first")
    return path


def _diag(v, n=None):
    a = np.asarray(v, dtype=float).ravel()
    if n is not None and a.size == 1:
        a = np.full(n, a[0])
    return np.diag(a)


def _bcast(v, m):
    return np.broadcast_to(np.asarray(v, dtype=float).ravel(), (m,)).copy()


# --- plant and nominal model ------------------------------------------------

class Plant:
    """True plant with additive uniform disturbance ``w(k)``."""

    def __init__(self, cfg: ExperimentConfig, half_width=None, seed: int | None = None):
        p = cfg.plant
        self.n, self.m, self.p = plant_dims(cfg)
        hw = np.asarray(p.disturbance if half_width is None else half_width, float).ravel()
        hw = np.full(self.n, hw[0]) if hw.size == 1 else hw
        kind = "uniform_box" if np.any(hw > 0) else "none"
        self.disturbance = DisturbanceModel(kind, tuple(hw), cfg.seed if seed is None else seed)
        if p.kind == "cartpole":
            self.params = CartPoleParams(**p.params)
            self.model = CartPoleModel(self.params, p.integrator, p.substeps)
        else:
            A = np.atleast_2d(np.asarray(p.A, float))
            C = np.atleast_2d(np.asarray(p.C, float)) if p.C else None
            self.model = LinearModel(A, np.asarray(p.B, float), C)
        self.C = self.model.C
        self.T = self.params.T if p.kind == "cartpole" else 1.0

    def step(self, x, u, k: int):
        w = sample_disturbance(self.disturbance, k)
        if isinstance(self.model, CartPoleModel):
            return cartpole_step(self.params, x, u, w, self.model.integrator, self.model.substeps)
        return self.model.step(x, u) + w


class StateMap:
    """Measured plant state -> nominal-model state.

    The identity for the physics model; for an identified NARX model the
    nominal state stacks past inputs and measured outputs, with the plant
    assumed at rest (zero input, constant output) before ``k = 0``.
    """

    def __init__(self, nominal, C_plant):
        self.stacked = isinstance(nominal, StfStateSpaceModel)
        self.nominal = nominal
        self.C = C_plant

    def reset(self, x):
        if self.stacked:
            h = self.nominal.hyper
            y = self.C @ np.asarray(x, float)
            self.u_hist = [np.zeros(h.n_u)] * max(h.d_u - 1, 0)
            self.y_hist = [y] * h.d_y

    def __call__(self, x):
        if not self.stacked:
            return np.asarray(x, float)
        return self.nominal.state_from_history(self.u_hist, self.y_hist)

    def push(self, u, x_next):
        if self.stacked:
            h = self.nominal.hyper
            self.u_hist = ([np.atleast_1d(u).copy()] + self.u_hist)[:max(h.d_u - 1, 0)]
            self.y_hist = ([self.C @ x_next] + self.y_hist)[:h.d_y]


def _paths(cfg: ExperimentConfig) -> dict:
    root = Path(cfg.out)
    return {"root": root, "identify": root / "identify", "policy": root / "policy",
            "simulate": root / "simulate", "compare": root / "compare", "bench": root / "bench"}


def nominal_model(cfg: ExperimentConfig):
    if cfg.nominal == "physics":
        return Plant(cfg).model
    path = _require(_paths(cfg)["identify"] / "model.json", "identify")
    return StfStateSpaceModel(stf.load_model(path))


def _check_len(v, n, name):
    a = np.asarray(v, float).ravel()
    if a.size not in (1, n):
        raise ConfigError(f"{name} needs {n} entries for the {n}-state nominal model, got {a.size}")
    return a


def cost_weights(cfg: ExperimentConfig, model) -> nmpc.CostWeights:
    c = cfg.nmpc
    n, p = model.n, model.C.shape[0]
    Q = _diag(_check_len(c.Q, n, "nmpc.Q"), n)
    R = _diag(c.R, model.m)
    P_out = _diag(c.P_out, p)
    if isinstance(c.Q_N, str):
        u_lo, u_hi = _bcast(c.u_lo, model.m), _bcast(c.u_hi, model.m)
        u0 = np.clip(np.zeros(model.m), u_lo, u_hi)
        Q_N = nmpc.lqr_terminal_weight(model, np.zeros(n), u0, Q, R, model.C, P_out)
    else:
        Q_N = _diag(_check_len(c.Q_N, n, "nmpc.Q_N"), n)
    return nmpc.CostWeights(Q, R, P_out, Q_N, _diag(c.P_N, p), c.P_gamma)


def barrier(cfg: ExperimentConfig):
    return None if cfg.barrier is None else barrier_from_config(cfg.barrier)


def bounds(cfg: ExperimentConfig) -> UncertaintyBounds:
    b = cfg.bounds
    return UncertaintyBounds(b.eps_w, b.eps_s, b.eps_c)


def controller(cfg: ExperimentConfig, model) -> nmpc.NmpcController:
    c = cfg.nmpc
    return nmpc.NmpcController(model, cost_weights(cfg, model), c.N, _bcast(c.u_lo, model.m),
                               _bcast(c.u_hi, model.m), barrier(cfg), bounds(cfg),
                               nmpc.SolverOptions(max_iter=c.max_iter))


# --- identification ---------------------------------------------------------

def excitation_data(cfg: ExperimentConfig):
    """Closed-loop excitation of the true plant: stabilizing feedback + multisine + dither."""
    i = cfg.identify
    plant = Plant(cfg, i.disturbance)
    n, m = plant.n, plant.m
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(i.samples) * plant.T
    freqs = rng.uniform(i.f_lo, i.f_hi, (i.n_sines, m))
    phase = rng.uniform(0.0, 2 * np.pi, (i.n_sines, m))
    ms = np.sin(2 * np.pi * t[:, None, None] * freqs[None] + phase[None]).sum(axis=1) / math.sqrt(i.n_sines)
    K = np.zeros((m, n))
    if i.feedback == "lqr":
        A, B = plant.model.jacobians(np.zeros(n), np.zeros(m))
        Qd = np.asarray(cfg.nmpc.Q, float)
        Q = np.diag(Qd) if Qd.size == n else np.eye(n)
        K, _ = dlqr(A, B, Q, _diag(cfg.nmpc.R, m))
    lo, hi = _bcast(cfg.nmpc.u_lo, m), _bcast(cfg.nmpc.u_hi, m)
    x = np.zeros(n)
    U, Y = np.zeros((i.samples, m)), np.zeros((i.samples, plant.p))
    for k in range(i.samples):
        u = np.clip(-K @ x + i.amplitude * ms[k] + rng.uniform(-i.dither, i.dither, m), lo, hi)
        U[k], Y[k] = u, plant.C @ x
        x = plant.step(x, u, k)
        if not np.all(np.isfinite(x)):
            raise PipelineError("plant diverged during excitation; lower identify.amplitude or use feedback = 'lqr'")
    return t, U, Y


@dataclass
class IdentifyResult:
    model: stf.CompositeStfModel
    metrics: dict
    trace: cl.TrainingTrace
    Y_val: np.ndarray
    Y_pred: np.ndarray


def identify(cfg: ExperimentConfig, U, Y) -> IdentifyResult:
    """Chronological split, normalization on the training part, evolve + CL training, validation BFR."""
    i = cfg.identify
    U = np.asarray(U, float).reshape(len(U), -1)
    Y = np.asarray(Y, float).reshape(len(Y), -1)
    h = stf.StfHyperParams(d_u=i.d_u, d_y=i.d_y, L_max=i.L_max, create_threshold=i.create_threshold,
                           n_u=U.shape[1], n_y=Y.shape[1])
    Z, T = stf.narx_dataset(U, Y, h)
    n_tr = int(i.train_fraction * len(Z))
    if n_tr < 2 or len(Z) - n_tr < 2:
        raise PipelineError(f"only {len(Z)} regression rows; need more identification samples")
    norm = stf.Normalizer.fit(U[:n_tr], Y[:n_tr])
    mean, std = norm.regressor_scale(h)
    Zn = (Z - mean) / std
    Tn = (T - norm.y_mean) / norm.y_std
    trace = cl.TrainingTrace()
    config = cl.LearningConfig(rate_rule=i.rate_rule, n_candidates=i.n_candidates)
    model, stack = cl.fit_stf(Zn[:n_tr], Tn[:n_tr], h, config, epochs=i.epochs, trace=trace)
    model = stf.CompositeStfModel(model.hyper, model.clusters, model.locals, norm)
    pred = stf.predict_batch(model, Zn[n_tr:]) * norm.y_std + norm.y_mean
    Y_val = T[n_tr:]
    per = [P.bfr(Y_val[:, j], pred[:, j]) for j in range(Y_val.shape[1])]
    metrics = {"n_train": n_tr, "n_validation": len(Z) - n_tr, "clusters": model.L,
               "rank_condition": cl.rank_condition(stack),
               "rank_condition_step": -1 if trace.rank_step is None else trace.rank_step,
               "bfr": P.bfr(Y_val, pred)}
    for j, v in enumerate(per):
        metrics[f"bfr_y{j + 1}"] = v
    metrics["bfr_mean"] = float(np.mean(per))
    return IdentifyResult(model, metrics, trace, Y_val, pred)


def cmd_identify(cfg: ExperimentConfig, log=print) -> int:
    d = _paths(cfg)["identify"]
    d.mkdir(parents=True, exist_ok=True)
    i = cfg.identify
    t0 = time.perf_counter()
    if i.data_csv is not None:
        try:
            t, U, Y = read_io_csv(i.data_csv)
        except (CsvSchemaError, FileNotFoundError) as e:
            raise ConfigError(f"identify.data_csv: {e}") from None
        if len(t) == 0:
            raise ConfigError(f"identify.data_csv {i.data_csv} holds no samples")
    else:
        t, U, Y = excitation_data(cfg)
    write_io_csv(d / "data.csv", t, U, Y)
    res = identify(cfg, U, Y)
    res.metrics["bfr_floor"] = i.bfr_floor
    res.metrics["passed"] = res.metrics["bfr"] >= i.bfr_floor
    write_metrics(d / "metrics.csv", res.metrics)
    write_table(d / "validation.csv", [f"y_{j + 1}" for j in range(res.Y_val.shape[1])]
                + [f"yhat_{j + 1}" for j in range(res.Y_val.shape[1])], np.hstack([res.Y_val, res.Y_pred]))
    res.trace.write_csv(d / "trace.csv")
    write_metrics(d / "timing.csv", {"wall_s": time.perf_counter() - t0})
    stf.save_model(res.model, d / "model.json")
    log(f"identify: BFR {res.metrics['bfr']:.2f}% (per output "
        + ", ".join(f"{res.metrics[f'bfr_y{j + 1}']:.2f}%" for j in range(res.Y_val.shape[1]))
        + f") with {res.model.L} clusters -> {d}")
    if not res.metrics["passed"]:
        log(f"identify: BFR below the floor of {i.bfr_floor:g}%. Refine the identification: collect more samples, "
            "raise identify.L_max, lower identify.create_threshold, widen the excitation or add epochs.")
        return EXIT_BFR
    return EXIT_OK


# --- policy -----------------------------------------------------------------

def save_policy(pol: P.PolicyApproximator, path) -> None:
    lay = pol.layout
    d = {"format": "ddspc-policy", "version": 1, "stf": stf.model_to_dict(pol.stf),
         "layout": [lay.n_state, lay.n_ref, lay.N, lay.m], "keep": [bool(k) for k in pol.keep],
         "u_lo": [float(v) for v in pol.u_lo], "u_hi": [float(v) for v in pol.u_hi],
         "train_bfr": float(pol.train_bfr)}
    Path(path).write_text(json.dumps(d, indent=1))


def load_policy(path) -> P.PolicyApproximator:
    d = json.loads(Path(path).read_text())
    if d.get("format") != "ddspc-policy":
        raise PipelineError(f"{path}: not a policy file")
    return P.PolicyApproximator(stf.model_from_dict(d["stf"]), P.PolicyLayout(*d["layout"]),
                                np.array(d["keep"], bool), np.array(d["u_lo"]), np.array(d["u_hi"]),
                                d["train_bfr"])


def sampler(cfg: ExperimentConfig, model) -> P.ScenarioSampler:
    pc = cfg.policy
    return P.ScenarioSampler(_check_len(pc.state_lo, model.n, "policy.state_lo"),
                             _check_len(pc.state_hi, model.n, "policy.state_hi"),
                             np.asarray(pc.ref_levels, float), pc.steps, pc.step_prob)


def verification_config(cfg: ExperimentConfig, model) -> P.VerificationConfig:
    v, pc = cfg.verify, cfg.policy
    return P.VerificationConfig(v.eps, v.kappa, v.T_sim, v.tol,
                                np.broadcast_to(np.asarray(pc.state_lo, float), (model.n,)).copy(),
                                np.broadcast_to(np.asarray(pc.state_hi, float), (model.n,)).copy())


def _verify_and_persist(cfg, pol, model, d: Path, log) -> int:
    rep = P.probabilistic_verify(pol, model, verification_config(cfg, model), seed=cfg.seed)
    (d / "verification.txt").write_text(rep.to_text())
    write_metrics(d / "verification.csv", {"passed": rep.passed, "n_v": rep.n_v, "eps": rep.eps,
                                           "kappa": rep.kappa, "seed": rep.seed, "failures": len(rep.failures)})
    write_table(d / "failures.csv", ["seed", "index"] + [f"x0_{j + 1}" for j in range(model.n)],
                [[rep.seed, i, *x0] for i, x0 in rep.failures])
    log(f"verify: {rep.guarantee()}")
    if not rep.passed:
        log(f"verify: failing initial states written to {d / 'failures.csv'}; the policy must be retrained")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_train_policy(cfg: ExperimentConfig, log=print) -> int:
    d = _paths(cfg)["policy"]
    d.mkdir(parents=True, exist_ok=True)
    model = nominal_model(cfg)
    ctl = controller(cfg, model)
    pc = cfg.policy
    t0 = time.perf_counter()
    try:
        ds = P.collect_dataset(model, ctl, sampler(cfg, model), pc.rollouts, cfg.seed, pc.max_infeasible)
    except P.DatasetError as e:
        raise PipelineError(f"policy data collection: {e}") from None
    t1 = time.perf_counter()
    ds.write_csv(d / "dataset.csv")
    hyper = stf.StfHyperParams(L_max=pc.L_max, create_threshold=pc.create_threshold)
    try:
        pol = P.train_policy(ds, hyper, cl.LearningConfig(rate_rule=pc.rate_rule), ctl.u_lo, ctl.u_hi,
                             epochs=pc.epochs, max_updates=pc.max_updates)
    except (P.RankConditionError, ValueError) as e:
        raise PipelineError(f"policy training: {e}") from None
    t2 = time.perf_counter()
    write_metrics(d / "metrics.csv", {"samples": len(ds), "nmpc_solves": ds.n_solves,
                                      "nmpc_not_solved": ds.n_infeasible, "clusters": pol.stf.L,
                                      "train_bfr": pol.train_bfr})
    log(f"train-policy: {len(ds)} samples, {pol.stf.L} clusters, training BFR {pol.train_bfr:.2f}%")
    code = _verify_and_persist(cfg, pol, model, d, log)
    write_metrics(d / "timing.csv", {"collect_s": t1 - t0, "train_s": t2 - t1,
                                     "verify_s": time.perf_counter() - t2})
    # fail closed: a policy that did not verify is never picked up by simulate
    accepted, rejected = d / "policy.json", d / "policy_rejected.json"
    if code == EXIT_OK:
        save_policy(pol, accepted)
        rejected.unlink(missing_ok=True)
    else:
        save_policy(pol, rejected)
        accepted.unlink(missing_ok=True)
    return code


def cmd_verify_policy(cfg: ExperimentConfig, log=print) -> int:
    d = _paths(cfg)["policy"]
    path = d / "policy.json"
    if not path.exists() and (d / "policy_rejected.json").exists():
        path = d / "policy_rejected.json"
    pol = load_policy(_require(path, "train-policy"))
    code = _verify_and_persist(cfg, pol, nominal_model(cfg), d, log)
    # re-verification moves the artifact either way so simulate only sees verified policies
    if code == EXIT_OK and path.name == "policy_rejected.json":
        path.rename(d / "policy.json")
    elif code != EXIT_OK and path.name == "policy.json":
        path.rename(d / "policy_rejected.json")
    return code


# --- closed-loop simulation -------------------------------------------------

def reference_schedule(cfg: ExperimentConfig, n_rows: int, p: int) -> np.ndarray:
    ref = np.zeros((n_rows, p))
    for row in cfg.simulate.reference:
        ref[int(row[0]):] = row[1:]
    return ref


def performance_pct(R, Y) -> float:
    """``(1 - ||r - y|| / ||r - mean(r)||) * 100``; NaN for a constant reference."""
    R, Y = np.asarray(R, float), np.asarray(Y, float)
    den = np.linalg.norm(R - R.mean(axis=0))
    if den == 0:
        return math.nan
    return 100.0 * (1.0 - np.linalg.norm(R - Y) / den)


def rmse(R, Y) -> float:
    return float(np.sqrt(np.mean((np.asarray(R, float) - np.asarray(Y, float)) ** 2)))


def trajectory_header(n, m, p):
    return (["k"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
            + [f"y_{i + 1}" for i in range(p)] + [f"r_{i + 1}" for i in range(p)] + ["h", "stage_cost"])


def report_from_trajectory(header, data, n, m, p) -> dict:
    """Every number of a run report, recomputed from the trajectory columns."""
    col = {name: j for j, name in enumerate(header)}
    Y = data[:, [col[f"y_{i + 1}"] for i in range(p)]]
    R = data[:, [col[f"r_{i + 1}"] for i in range(p)]]
    h = data[:, col["h"]]
    out = {"steps": len(data), "closed_loop_cost": float(data[:, col["stage_cost"]].sum()),
           "max_h": float(np.max(h)) if np.all(np.isfinite(h)) else math.nan,
           "violations": int(np.sum(h > 0)), "performance_pct": performance_pct(R, Y), "rmse": rmse(R, Y)}
    half = len(data) // 2
    for i in range(p):
        out[f"tail_mean_error_y{i + 1}"] = float(np.mean(Y[half:, i] - R[half:, i]))
    return out


def _controller_fn(cfg, name, model, weights):
    c = cfg.nmpc
    lo, hi = _bcast(c.u_lo, model.m), _bcast(c.u_hi, model.m)
    extra = {}
    if name == "nmpc":
        ctl = controller(cfg, model)

        def fn(x, win):
            sol = ctl.solve(x, win)
            extra["not_solved"] = extra.get("not_solved", 0) + (sol.status != "solved")
            extra["fallbacks"] = extra.get("fallbacks", 0) + bool(sol.fallback)
            return sol.u[0]
        return fn, extra, None
    pol = load_policy(_require(_paths(cfg)["policy"] / "policy.json", "train-policy"))
    if name == "offline_policy":
        return (lambda x, win: P.evaluate_policy(pol, x, win)), extra, None
    a = cfg.adaptation
    acfg = ad.AdaptationConfig(upsilon=a.upsilon, sign_free=a.sign_free, burn_in=a.burn_in, T_reset=a.T_reset,
                               kkt_gain=a.kkt_gain, hess_every=a.hess_every, relin_tol=a.relin_tol)
    adapter = ad.OnlineAdapter(model, pol, weights, lo, hi, barrier(cfg), bounds(cfg), acfg)
    return adapter.step, extra, adapter


def simulate(cfg: ExperimentConfig, name: str):
    """Closed loop of controller ``name`` on the true plant; returns (header, rows, times, extra, adapter)."""
    if name not in CONTROLLERS:
        raise ConfigError(f"unknown controller {name!r}; choose from {', '.join(CONTROLLERS)}")
    plant = Plant(cfg)
    model = nominal_model(cfg)
    weights = cost_weights(cfg, model)
    fn, extra, adapter = _controller_fn(cfg, name, model, weights)
    bar = barrier(cfg)
    smap = StateMap(model, plant.C)
    T, N = cfg.simulate.steps, cfg.nmpc.N
    ref = reference_schedule(cfg, T + N + 1, plant.p)
    x = np.asarray(cfg.plant.x0, float)
    smap.reset(x)
    if adapter is not None:
        adapter.reset(smap(x))
    rows, times = [], []
    for k in range(T):
        xn = smap(x)
        win = P.reference_window(ref, k, N)
        t0 = time.perf_counter()
        u = np.atleast_1d(np.asarray(fn(xn, win), float))
        times.append(time.perf_counter() - t0)
        y = plant.C @ x
        h = bar(xn) if bar is not None else math.nan
        cost = nmpc.stage_cost(xn, u, model.C @ xn, ref[k], weights)
        rows.append([k, *x, *u, *y, *ref[k], h, cost])
        x_next = plant.step(x, u, k)
        if not np.all(np.isfinite(x_next)):
            raise PipelineError(f"{name}: plant state became non-finite at step {k}")
        smap.push(u, x_next)
        x = x_next
    return trajectory_header(plant.n, plant.m, plant.p), rows, times, extra, adapter


def cmd_simulate(cfg: ExperimentConfig, controller_name: str = "all", strict: bool | None = None, log=print) -> int:
    strict = cfg.simulate.strict if strict is None else strict
    names = CONTROLLERS if controller_name == "all" else (controller_name,)
    code = EXIT_OK
    for name in names:
        d = _paths(cfg)["simulate"] / name
        d.mkdir(parents=True, exist_ok=True)
        header, rows, times, extra, adapter = simulate(cfg, name)
        write_table(d / "trajectory.csv", header, rows)
        write_table(d / "timing.csv", ["k", "wall_s"], [[k, t] for k, t in enumerate(times)])
        n, m, p = plant_dims(cfg)
        rep = report_from_trajectory(header, np.array(rows, float), n, m, p)
        rep.update(extra)
        if adapter is not None:
            adapter.write_log(d / "adapter_log.csv")
            rep["final_kkt_residual"] = adapter.log[-1][5]
        rep["safe"] = rep["violations"] == 0
        write_metrics(d / "report.csv", rep)
        write_metrics(d / "timing_summary.csv", {"median_step_s": float(np.median(times)),
                                                 "mean_step_s": float(np.mean(times)),
                                                 "max_step_s": float(np.max(times))})
        perf = rep["performance_pct"]
        log(f"simulate[{name}]: cost {rep['closed_loop_cost']:.4g}, max h {rep['max_h']:.4g}, "
            f"violations {rep['violations']}, performance "
            + ("n/a (constant reference)" if math.isnan(perf) else f"{perf:.2f}%")
            + f", RMSE {rep['rmse']:.4g}, median step {np.median(times) * 1e6:.1f} us")
        if rep["violations"]:
            log(f"simulate[{name}]: SAFETY VIOLATION, h(x) > 0 at {rep['violations']} steps")
            if strict:
                code = EXIT_SAFETY
    return code


# --- comparison -------------------------------------------------------------

def cmd_compare(cfg: ExperimentConfig, run_dirs=None, log=print) -> int:
    """Table of performance and timing over simulated runs plus SVG plots."""
    if not run_dirs:
        base = _paths(cfg)["simulate"]
        run_dirs = [base / c for c in CONTROLLERS if (base / c / "trajectory.csv").exists()]
    run_dirs = [Path(r) for r in run_dirs]
    if len(run_dirs) < 2:
        raise PipelineError("compare needs at least two simulated runs; run `ddspc simulate` first")
    n, m, p = plant_dims(cfg)
    runs = []
    for r in run_dirs:
        header, data = read_table(_require(r / "trajectory.csv", "simulate"))
        _, tim = read_table(_require(r / "timing.csv", "simulate"))
        runs.append((r.name, header, data, tim[:, 1]))
    lengths = {len(data) for _, _, data, _ in runs}
    if len(lengths) > 1:
        raise PipelineError("runs have different horizons: "
                            + ", ".join(f"{name}={len(data)}" for name, _, data, _ in runs))
    out = _paths(cfg)["compare"]
    out.mkdir(parents=True, exist_ok=True)
    rows, t_rows = [], []
    for name, header, data, tim in runs:
        rep = report_from_trajectory(header, data, n, m, p)
        rows.append([name, rep["performance_pct"], rep["rmse"], rep["closed_loop_cost"], rep["max_h"],
                     rep["violations"]])
        t_rows.append([name, float(np.median(tim)), float(np.mean(tim))])
    write_table(out / "comparison.csv", ["controller", "performance_pct", "rmse", "closed_loop_cost", "max_h",
                                         "violations"], rows)
    ref_t = t_rows[0][1]
    write_table(out / "timing.csv", ["controller", "median_step_s", "mean_step_s", "speedup_vs_first"],
                [r + [ref_t / r[1] if r[1] > 0 else math.inf] for r in t_rows])
    for name, row, tr in zip([r[0] for r in runs], rows, t_rows):
        perf = "n/a" if math.isnan(row[1]) else f"{row[1]:7.2f}%"
        log(f"compare: {name:15s} performance {perf}  RMSE {row[2]:.4g}  cost {row[3]:.4g}  "
            f"max h {row[4]:.4g}  median step {tr[1] * 1e6:9.1f} us")
    col = {name: j for j, name in enumerate(runs[0][1])}
    k = runs[0][2][:, 0]
    for i in range(p):
        series = {name: data[:, col[f"y_{i + 1}"]] for name, _, data, _ in runs}
        series["reference"] = runs[0][2][:, col[f"r_{i + 1}"]]
        plots.line_chart(out / f"y_{i + 1}.svg", k, series, f"output y_{i + 1}", "k", f"y_{i + 1}")
    for i in range(m):
        plots.line_chart(out / f"u_{i + 1}.svg", k, {name: data[:, col[f"u_{i + 1}"]] for name, _, data, _ in runs},
                         f"input u_{i + 1}", "k", f"u_{i + 1}")
    if np.all(np.isfinite(runs[0][2][:, col["h"]])):
        plots.line_chart(out / "h.svg", k, {name: data[:, col["h"]] for name, _, data, _ in runs},
                         "barrier h(x)", "k", "h", hline=0.0)
    return EXIT_OK


# --- timing benchmark -------------------------------------------------------

def interleaved_timing(model, weights, pol, ctl: nmpc.NmpcController, adapter: ad.OnlineAdapter, plant: Plant,
                       x0, ref, steps: int):
    """Per-step wall time of ``nmpc.solve``, the policy and the adapted policy on the same states.

    The adapted closed loop drives the plant; NMPC and the bare policy are
    evaluated at the same measured states, interleaved so that machine load
    affects all three alike.
    """
    N = ctl.N
    x = np.asarray(x0, float)
    adapter.reset(x)
    ctl.reset()
    out = np.zeros((steps, 3))
    for k in range(steps):
        win = P.reference_window(ref, k, N)
        t0 = time.perf_counter()
        ctl.solve(x, win)
        t1 = time.perf_counter()
        P.evaluate_policy(pol, x, win)
        t2 = time.perf_counter()
        u = adapter.step(x, win)
        t3 = time.perf_counter()
        out[k] = (t1 - t0, t2 - t1, t3 - t2)
        x = plant.step(x, u, k)
    return out


def cmd_bench(cfg: ExperimentConfig, log=print) -> int:
    if cfg.nominal != "physics":
        raise ConfigError("bench runs on the physics nominal model")
    d = _paths(cfg)["bench"]
    d.mkdir(parents=True, exist_ok=True)
    plant = Plant(cfg)
    model = plant.model
    weights = cost_weights(cfg, model)
    pol = load_policy(_require(_paths(cfg)["policy"] / "policy.json", "train-policy"))
    _, _, adapter = _controller_fn(cfg, "online_adapted", model, weights)
    T, N = cfg.simulate.steps, cfg.nmpc.N
    ref = reference_schedule(cfg, T + N + 1, plant.p)
    t = interleaved_timing(model, weights, pol, controller(cfg, model), adapter, plant, cfg.plant.x0, ref, T)
    write_table(d / "bench.csv", ["k", "nmpc_s", "policy_s", "adapted_s"], [[k, *r] for k, r in enumerate(t)])
    med = np.median(t, axis=0)
    summary = {"N": N, "steps": T, "median_nmpc_s": med[0], "median_policy_s": med[1], "median_adapted_s": med[2],
               "speedup_policy": med[0] / med[1], "speedup_adapted": med[0] / med[2]}
    write_metrics(d / "summary.csv", summary)
    log(f"bench: median NMPC {med[0] * 1e3:.3f} ms, policy {med[1] * 1e6:.1f} us, "
        f"adapted policy {med[2] * 1e6:.1f} us; speedup {summary['speedup_policy']:.0f}x (policy), "
        f"{summary['speedup_adapted']:.1f}x (adapted)")
    return EXIT_OK
