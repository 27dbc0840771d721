"""Experiment configuration: TOML file -> validated dataclasses.

Every section has defaults; unknown keys and ill-shaped values are rejected
before anything runs.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlantConfig:
    kind: str = "cartpole"  # "cartpole" | "linear"
    x0: tuple = (1.0, 0.0, 0.2, 0.0)
    disturbance: tuple = (0.01,)  # uniform half width; one value or one per state
    # cartpole only
    params: dict = field(default_factory=dict)
    integrator: str = "rk4"
    substeps: int = 4
    # linear only
    A: tuple = ()
    B: tuple = ()
    C: tuple = ()


@dataclass(frozen=True)
class IdentifyConfig:
    samples: int = 6250  # total; the first train_fraction is used for training
    train_fraction: float = 0.8
    d_u: int = 2
    d_y: int = 2
    L_max: int = 10
    create_threshold: float = 5.0
    rate_rule: str = "max_eig"
    n_candidates: int | None = 4
    epochs: int = 1
    bfr_floor: float = 90.0
    disturbance: tuple = (0.001,)
    feedback: str = "lqr"  # stabilizing feedback under the excitation: "lqr" | "none"
    amplitude: float = 3.0  # multisine amplitude
    n_sines: int = 8
    f_lo: float = 0.05  # Hz
    f_hi: float = 2.0
    dither: float = 3.0  # uniform dither half width
    data_csv: str | None = None  # use logged I/O data instead of excitation rollouts


@dataclass(frozen=True)
class NmpcConfig:
    N: int = 4
    Q: tuple = (1.0, 0.1, 1.0, 0.1)  # diagonals
    R: tuple = (0.01,)
    P_out: tuple = (1.0, 1.0)
    Q_N: str | tuple = "lqr"  # "lqr" (Riccati at the origin) or a diagonal
    P_N: tuple = (1e-6, 1e-6)
    P_gamma: float = 1.0
    u_lo: tuple = (-100.0,)
    u_hi: tuple = (100.0,)
    max_iter: int = 50


@dataclass(frozen=True)
class BoundsConfig:
    eps_w: float = 0.02
    eps_s: float = 0.01
    eps_c: float = 0.01


@dataclass(frozen=True)
class PolicyConfig:
    rollouts: int = 30
    steps: int = 30
    state_lo: tuple = (-1.5, -0.5, -0.3, -0.5)
    state_hi: tuple = (1.5, 0.5, 0.3, 0.5)
    ref_levels: tuple = ((0.0, 0.0),)
    step_prob: float = 0.5
    L_max: int = 1
    create_threshold: float = 5.0
    rate_rule: str = "min_eig"
    epochs: int = 1
    max_updates: int | None = None
    max_infeasible: float = 0.1


@dataclass(frozen=True)
class VerifyConfig:
    eps: float = 0.01
    kappa: float = 0.01
    T_sim: int = 100
    tol: float = 1e-2


@dataclass(frozen=True)
class AdaptConfig:
    upsilon: float = 0.1
    kkt_gain: float = 0.05
    burn_in: int = 20
    hess_every: int = 10
    relin_tol: float = 1e-3
    T_reset: float = math.inf
    sign_free: bool = True


@dataclass(frozen=True)
class SimulateConfig:
    steps: int = 300
    # piecewise-constant reference: rows of [k_start, r_1, ..., r_p]
    reference: tuple = ((0, 0.0, 0.0),)
    strict: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    out: str = "runs/experiment"
    nominal: str = "physics"  # model used by the NMPC, policy and adapter: "physics" | "identified"
    plant: PlantConfig = PlantConfig()
    identify: IdentifyConfig = IdentifyConfig()
    nmpc: NmpcConfig = NmpcConfig()
    barrier: dict | None = field(default_factory=lambda: {"type": "box", "coord": 0, "bound": 5.0})
    bounds: BoundsConfig = BoundsConfig()
    policy: PolicyConfig = PolicyConfig()
    verify: VerifyConfig = VerifyConfig()
    adaptation: AdaptConfig = AdaptConfig()
    simulate: SimulateConfig = SimulateConfig()


_SECTIONS = {"plant": PlantConfig, "identify": IdentifyConfig, "nmpc": NmpcConfig, "bounds": BoundsConfig,
             "policy": PolicyConfig, "verify": VerifyConfig, "adaptation": AdaptConfig,
             "simulate": SimulateConfig}


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(a) for a in v)
    return v


def _section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(raw) - names)
    if extra:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(extra)}")
    return cls(**{k: _freeze(v) for k, v in raw.items()})


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    kw = {}
    for key in ("name", "seed", "out", "nominal"):
        if key in raw:
            kw[key] = raw.pop(key)
    if "barrier" in raw:
        b = raw.pop("barrier")
        kw["barrier"] = None if b in ({}, {"type": "none"}) else b
    for key, cls in _SECTIONS.items():
        if key in raw:
            kw[key] = _section(cls, raw.pop(key), key)
    if raw:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(raw))}")
    try:
        cfg = ExperimentConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(raw)


def _num_list(v, name, n=None):
    try:
        a = np.asarray(v, dtype=float).ravel()
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of numbers") from None
    if n is not None and a.size != n:
        raise ConfigError(f"{name} needs {n} entries, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} has non-finite entries")
    return a


def _matrix(v, name):
    try:
        M = np.atleast_2d(np.asarray(v, dtype=float))
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a numeric matrix") from None
    if M.ndim != 2 or M.size == 0:
        raise ConfigError(f"{name} must be a non-empty matrix")
    return M


def plant_dims(cfg: ExperimentConfig):
    """``(n, m, p)`` of the true plant."""
    p = cfg.plant
    if p.kind == "cartpole":
        return 4, 1, 2
    A, B = _matrix(p.A, "plant.A"), _matrix(p.B, "plant.B")
    C = _matrix(p.C, "plant.C") if p.C else np.eye(A.shape[0])
    return A.shape[0], B.shape[1], C.shape[0]


def _positive(v, name, strict=True):
    ok = v > 0 if strict else v >= 0
    if not ok:
        raise ConfigError(f"{name} must be {'> 0' if strict else '>= 0'}, got {v}")


def validate(cfg: ExperimentConfig) -> None:
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg.nominal not in ("physics", "identified"):
        raise ConfigError("nominal must be 'physics' or 'identified'")
    p = cfg.plant
    if p.kind not in ("cartpole", "linear"):
        raise ConfigError(f"plant.kind must be 'cartpole' or 'linear', got {p.kind!r}")
    if p.kind == "linear":
        if not p.A or not p.B:
            raise ConfigError("linear plant needs plant.A and plant.B")
        A, B = _matrix(p.A, "plant.A"), _matrix(p.B, "plant.B")
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ConfigError(f"plant.A must be square and plant.B must have {A.shape[0]} rows")
        if p.C and _matrix(p.C, "plant.C").shape[1] != A.shape[0]:
            raise ConfigError(f"plant.C must have {A.shape[0]} columns")
    else:
        unknown = set(p.params) - {"m_cart", "m_pend", "L", "K_d", "g", "T"}
        if unknown:
            raise ConfigError(f"plant.params unknown keys: {', '.join(sorted(unknown))}")
        if p.integrator not in ("rk4", "euler") or p.substeps < 1:
            raise ConfigError("plant.integrator must be rk4 or euler and substeps >= 1")
    n, m, ny = plant_dims(cfg)
    _num_list(p.x0, "plant.x0", n)
    for name, d in (("plant.disturbance", p.disturbance), ("identify.disturbance", cfg.identify.disturbance)):
        w = _num_list(d, name)
        if w.size not in (1, n) or np.any(w < 0):
            raise ConfigError(f"{name} needs 1 or {n} non-negative entries")

    i = cfg.identify
    if i.data_csv is None and i.samples < 10:
        raise ConfigError("identify.samples must be >= 10")
    if not 0 < i.train_fraction < 1:
        raise ConfigError("identify.train_fraction must lie in (0, 1)")
    if min(i.d_u, i.d_y, i.L_max, i.epochs, i.n_sines) < 1:
        raise ConfigError("identify.d_u, d_y, L_max, epochs and n_sines must be >= 1")
    if i.rate_rule not in ("min_eig", "max_eig") or cfg.policy.rate_rule not in ("min_eig", "max_eig"):
        raise ConfigError("rate_rule must be 'min_eig' or 'max_eig'")
    if i.feedback not in ("lqr", "none"):
        raise ConfigError("identify.feedback must be 'lqr' or 'none'")
    if not 0 < i.f_lo < i.f_hi:
        raise ConfigError("identify needs 0 < f_lo < f_hi")
    _positive(i.amplitude, "identify.amplitude", False)
    _positive(i.dither, "identify.dither", False)

    c = cfg.nmpc
    nc = n if cfg.nominal == "physics" else None
    if c.N < 1 or c.max_iter < 1:
        raise ConfigError("nmpc.N and nmpc.max_iter must be >= 1")
    if nc is not None:
        _num_list(c.Q, "nmpc.Q", nc)
        if not isinstance(c.Q_N, str):
            _num_list(c.Q_N, "nmpc.Q_N", nc)
    elif c.Q_N != "lqr" and isinstance(c.Q_N, str):
        raise ConfigError("nmpc.Q_N must be 'lqr' or a diagonal")
    if isinstance(c.Q_N, str) and c.Q_N != "lqr":
        raise ConfigError("nmpc.Q_N must be 'lqr' or a diagonal")
    _num_list(c.R, "nmpc.R", m)
    _num_list(c.P_out, "nmpc.P_out", ny)
    _num_list(c.P_N, "nmpc.P_N", ny)
    lo, hi = _num_list(c.u_lo, "nmpc.u_lo"), _num_list(c.u_hi, "nmpc.u_hi")
    if lo.size not in (1, m) or hi.size not in (1, m) or np.any(lo >= hi):
        raise ConfigError("nmpc.u_lo / u_hi need 1 or m entries with u_lo < u_hi")
    _positive(c.P_gamma, "nmpc.P_gamma")

    if cfg.barrier is not None:
        from ..safety import barrier_from_config
        try:
            barrier_from_config(cfg.barrier)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"[barrier] invalid: {e}") from None
    b = cfg.bounds
    for name in ("eps_w", "eps_s", "eps_c"):
        _positive(getattr(b, name), f"bounds.{name}", False)

    pc = cfg.policy
    if pc.rollouts < 1 or pc.steps < 1 or pc.epochs < 1 or pc.L_max < 1:
        raise ConfigError("policy.rollouts, steps, epochs and L_max must be >= 1")
    if nc is not None:
        slo = _num_list(pc.state_lo, "policy.state_lo", nc)
        shi = _num_list(pc.state_hi, "policy.state_hi", nc)
        if np.any(slo > shi):
            raise ConfigError("policy.state_lo must not exceed policy.state_hi")
    levels = np.asarray(pc.ref_levels, dtype=float)
    if levels.ndim != 2 or levels.shape[1] != ny:
        raise ConfigError(f"policy.ref_levels must be rows of {ny} values")
    if pc.max_updates is not None and pc.max_updates < 1:
        raise ConfigError("policy.max_updates must be >= 1")

    v = cfg.verify
    if not (0 < v.eps < 1 and 0 < v.kappa < 1) or v.T_sim < 1 or not v.tol > 0:
        raise ConfigError("verify needs eps, kappa in (0, 1), T_sim >= 1 and tol > 0")

    a = cfg.adaptation
    if not 0 <= a.upsilon < 1 or not 0 < a.kkt_gain <= 1 or a.burn_in < 0 or a.hess_every < 1:
        raise ConfigError("adaptation needs upsilon in [0, 1), kkt_gain in (0, 1], burn_in >= 0, hess_every >= 1")
    if a.relin_tol < 0 or not a.T_reset >= 1:
        raise ConfigError("adaptation.relin_tol must be >= 0 and T_reset >= 1")

    s = cfg.simulate
    if s.steps < 1:
        raise ConfigError("simulate.steps must be >= 1")
    ref = s.reference
    if not ref or any(len(r) != ny + 1 for r in ref):
        raise ConfigError(f"simulate.reference rows must be [k_start, r_1..r_{ny}]")
    starts = [r[0] for r in ref]
    if starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
        raise ConfigError("simulate.reference must start at k = 0 with increasing k_start")
