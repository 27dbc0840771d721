"""Evolving spatial-temporal filter (STF): clustered local linear models.

The model predicts ``y = sum_i alpha_i(U) (A_i U + b_i)`` where the weights are
a softmax over cluster dissimilarities. Each cluster lives in the joint
regressor/output space ``x_a = [U; y]``; at prediction time ``y`` is unknown,
so the weights use the Mahalanobis distance of ``U`` to the marginal of each
cluster and no residual term.

All core operations work in the model's own coordinates. Use
:class:`Normalizer` (stored on the model) to go to and from physical units,
or :meth:`CompositeStfModel.denormalized` to get the equivalent model that
acts directly on physical signals.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_NAME = "ddspc-stf"
FORMAT_VERSION = 1
_REG = 1e-9


class DimensionError(ValueError):
    """Raised when an input has the wrong shape; ``slot`` names the culprit."""

    def __init__(self, slot: str, message: str):
        super().__init__(f"{slot}: {message}")
        self.slot = slot


class SingularCovarianceError(np.linalg.LinAlgError):
    def __init__(self, name: str, cond: float):
        super().__init__(f"{name} is not positive definite (condition estimate {cond:.3e})")
        self.cond = cond


@dataclass(frozen=True)
class StfHyperParams:
    """Structure of an STF model.

    For NARX use ``n_u, n_y, d_u, d_y``; for a static map (e.g. a policy
    approximator) set ``n_static`` to the input length and the delays are
    ignored.
    """

    d_u: int = 1
    d_y: int = 1
    L_max: int = 10
    create_threshold: float = 10.0
    n_u: int = 1
    n_y: int = 1
    n_static: int = 0
    sigma0: float = 1.0
    forgetting: float = 0.995

    def __post_init__(self):
        if self.d_u < 1 or self.d_y < 1:
            raise ValueError("d_u and d_y must be >= 1")
        if self.L_max < 1:
            raise ValueError("L_max must be >= 1")
        if not self.create_threshold > 0:
            raise ValueError("create_threshold must be > 0")
        if self.n_u < 1 or self.n_y < 1:
            raise ValueError("n_u and n_y must be >= 1")
        if not 0 < self.forgetting <= 1:
            raise ValueError("forgetting must be in (0, 1]")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be > 0")

    @property
    def n_regressor(self) -> int:
        if self.n_static:
            return self.n_static
        return self.n_u * self.d_u + self.n_y * self.d_y

    @property
    def n_joint(self) -> int:
        return self.n_regressor + self.n_y


def _chol_inv(M: np.ndarray, name: str) -> np.ndarray:
    M = 0.5 * (M + M.T) + _REG * np.eye(M.shape[0])
    try:
        Lc = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(name, float(np.linalg.cond(M))) from None
    Li = np.linalg.solve(Lc, np.eye(M.shape[0]))
    return Li.T @ Li


@dataclass(eq=False)
class Cluster:
    centroid: np.ndarray  # nu, joint [U; y] space
    covariance: np.ndarray  # Xi
    residual_cov: np.ndarray  # Lambda
    sample_count: int = 1
    n_regressor: int = field(default=0)

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        self.residual_cov = np.asarray(self.residual_cov, dtype=float)
        if not self.n_regressor:
            self.n_regressor = self.centroid.size - self.residual_cov.shape[0]
        nU = self.n_regressor
        self.prec = _chol_inv(self.covariance, "cluster covariance")
        self.prec_u = _chol_inv(self.covariance[:nU, :nU], "cluster covariance (regressor block)")
        self.res_prec = _chol_inv(self.residual_cov, "residual covariance")

    @property
    def center_u(self) -> np.ndarray:
        return self.centroid[:self.n_regressor]


@dataclass(frozen=True, eq=False)
class LocalLinearModel:
    A: np.ndarray  # n_y x n_U
    b: np.ndarray  # n_y

    def __call__(self, U):
        return self.A @ U + self.b


@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine scaling ``(v - mean) / std`` for inputs and outputs."""

    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def identity(cls, n_u: int, n_y: int) -> "Normalizer":
        return cls(np.zeros(n_u), np.ones(n_u), np.zeros(n_y), np.ones(n_y))

    @classmethod
    def fit(cls, U, Y) -> "Normalizer":
        U = np.atleast_2d(np.asarray(U, float))
        Y = np.atleast_2d(np.asarray(Y, float))

        def stats(A):
            mu = A.mean(axis=0)
            sd = A.std(axis=0)
            sd[sd < 1e-12] = 1.0
            return mu, sd

        um, us = stats(U)
        ym, ys = stats(Y)
        return cls(um, us, ym, ys)

    def regressor_scale(self, hyper: StfHyperParams):
        """Mean/std of every regressor slot (channel stats repeated per delay)."""
        if hyper.n_static:
            return self.u_mean, self.u_std
        mean = np.concatenate([np.tile(self.u_mean, hyper.d_u), np.tile(self.y_mean, hyper.d_y)])
        std = np.concatenate([np.tile(self.u_std, hyper.d_u), np.tile(self.y_std, hyper.d_y)])
        return mean, std


def build_regressor(u_hist: Sequence, y_hist: Sequence, hyper: StfHyperParams) -> np.ndarray:
    """Stack ``[u(k-1); ...; u(k-d_u); y(k-1); ...; y(k-d_y)]`` (newest first)."""
    if len(u_hist) != hyper.d_u:
        raise DimensionError("u_hist", f"expected {hyper.d_u} entries, got {len(u_hist)}")
    if len(y_hist) != hyper.d_y:
        raise DimensionError("y_hist", f"expected {hyper.d_y} entries, got {len(y_hist)}")
    parts = []
    for i, u in enumerate(u_hist):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.size != hyper.n_u:
            raise DimensionError(f"u_hist[{i}]", f"expected dimension {hyper.n_u}, got {u.size}")
        parts.append(u)
    for i, y in enumerate(y_hist):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.size != hyper.n_y:
            raise DimensionError(f"y_hist[{i}]", f"expected dimension {hyper.n_y}, got {y.size}")
        parts.append(y)
    out = np.concatenate(parts)
    if not np.all(np.isfinite(out)):
        raise DimensionError("regressor", "non-finite entry")
    return out


def narx_dataset(U, Y, hyper: StfHyperParams):
    """Regressor matrix and targets from aligned I/O series (rows are time)."""
    U = np.asarray(U, dtype=float).reshape(len(U), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    start = max(hyper.d_u, hyper.d_y)
    rows = []
    for k in range(start, len(Y)):
        u_hist = [U[k - i] for i in range(1, hyper.d_u + 1)]
        y_hist = [Y[k - i] for i in range(1, hyper.d_y + 1)]
        rows.append(build_regressor(u_hist, y_hist, hyper))
    if not rows:
        return np.zeros((0, hyper.n_regressor)), np.zeros((0, hyper.n_y))
    return np.array(rows), Y[start:]


@dataclass(frozen=True, eq=False)
class CompositeStfModel:
    hyper: StfHyperParams
    clusters: tuple = ()
    locals: tuple = ()
    normalizer: Normalizer | None = None

    def __post_init__(self):
        if len(self.clusters) != len(self.locals):
            raise ValueError("clusters and locals must have equal length")
        if len(self.clusters) > self.hyper.L_max:
            raise ValueError("number of clusters exceeds L_max")

    @property
    def L(self) -> int:
        return len(self.clusters)

    @property
    def q(self) -> int:
        return self.L * (self.hyper.n_regressor + 1)

    def with_parameters(self, Phi: np.ndarray) -> "CompositeStfModel":
        return replace(self, locals=tuple(unpack_parameters(Phi, self.hyper.n_regressor)))

    def predict(self, U) -> np.ndarray:
        return predict(self, U)

    def predict_physical(self, U_phys) -> np.ndarray:
        """Predict from a physical-unit regressor, return physical outputs."""
        if self.normalizer is None:
            return predict(self, U_phys)
        mean, std = self.normalizer.regressor_scale(self.hyper)
        y = predict(self, (np.asarray(U_phys, float) - mean) / std)
        return y * self.normalizer.y_std + self.normalizer.y_mean

    def denormalized(self) -> "CompositeStfModel":
        """Equivalent model acting on physical units (identity normalizer)."""
        if self.normalizer is None:
            return self
        hyper = self.hyper
        mean_u, std_u = self.normalizer.regressor_scale(hyper)
        ym, ys = self.normalizer.y_mean, self.normalizer.y_std
        mean = np.concatenate([mean_u, ym])
        std = np.concatenate([std_u, ys])
        clusters = []
        for c in self.clusters:
            clusters.append(Cluster(
                centroid=c.centroid * std + mean,
                covariance=c.covariance * np.outer(std, std),
                residual_cov=c.residual_cov * np.outer(ys, ys),
                sample_count=c.sample_count,
                n_regressor=hyper.n_regressor,
            ))
        locs = []
        for lm in self.locals:
            A = ys[:, None] * lm.A / std_u[None, :]
            b = ys * lm.b + ym - A @ mean_u
            locs.append(LocalLinearModel(A, b))
        return CompositeStfModel(hyper, tuple(clusters), tuple(locs), None)


def _mahalanobis_sq(diff, prec):
    return float(diff @ prec @ diff)


def dissimilarity(point, cluster: Cluster, local: LocalLinearModel) -> float:
    """``D = 0.5 (M^2 + e' Lambda^-1 e)`` for ``point = (U, y)``."""
    U, y = point
    U = np.asarray(U, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    xa = np.concatenate([U, y])
    m2 = _mahalanobis_sq(xa - cluster.centroid, cluster.prec)
    e = y - local(U)
    return 0.5 * (max(m2, 0.0) + max(float(e @ cluster.res_prec @ e), 0.0))


def _prediction_dissimilarities(model: CompositeStfModel, U) -> np.ndarray:
    return np.array([0.5 * max(_mahalanobis_sq(U - c.center_u, c.prec_u), 0.0) for c in model.clusters])


def softmax_neg(D: np.ndarray) -> np.ndarray:
    """``exp(-D_i) / sum_j exp(-D_j)`` computed with a min shift."""
    D = np.minimum(np.nan_to_num(np.asarray(D, dtype=float), nan=np.inf), np.finfo(float).max)
    z = np.exp(-(D - D.min(axis=-1, keepdims=True)))
    return z / z.sum(axis=-1, keepdims=True)


def interpolation_weights(model: CompositeStfModel, U, y=None) -> np.ndarray:
    """Softmax weights over clusters.

    With ``y`` the full dissimilarity is used; without it (prediction) the
    regressor-marginal Mahalanobis distance with a zero residual term.
    """
    if model.L == 0:
        raise ValueError("model has no clusters")
    U = np.asarray(U, dtype=float)
    if U.size != model.hyper.n_regressor:
        raise DimensionError("U_stf", f"expected length {model.hyper.n_regressor}, got {U.size}")
    if y is None:
        D = _prediction_dissimilarities(model, U)
    else:
        D = np.array([dissimilarity((U, y), c, lm) for c, lm in zip(model.clusters, model.locals)])
    return softmax_neg(D)


def weights_batch(model: CompositeStfModel, U_rows: np.ndarray) -> np.ndarray:
    """Prediction weights for many regressors at once (rows of ``U_rows``)."""
    U_rows = np.atleast_2d(np.asarray(U_rows, dtype=float))
    D = np.empty((U_rows.shape[0], model.L))
    for i, c in enumerate(model.clusters):
        diff = U_rows - c.center_u
        D[:, i] = 0.5 * np.maximum(np.einsum("ij,jk,ik->i", diff, c.prec_u, diff), 0.0)
    return softmax_neg(D)


def pack_regressor(U, alpha) -> np.ndarray:
    """``zeta = [a_1 U; a_1; ...; a_L U; a_L]``."""
    U = np.asarray(U, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    return (alpha[:, None] * np.append(U, 1.0)[None, :]).ravel()


def pack_regressor_batch(U_rows, alpha_rows) -> np.ndarray:
    U_rows = np.atleast_2d(np.asarray(U_rows, dtype=float))
    ext = np.hstack([U_rows, np.ones((U_rows.shape[0], 1))])
    return (alpha_rows[:, :, None] * ext[:, None, :]).reshape(U_rows.shape[0], -1)


def pack_parameters(model: CompositeStfModel) -> np.ndarray:
    """``Phi = [A_1, b_1, ..., A_L, b_L]`` of shape ``n_y x q``."""
    if model.L == 0:
        return np.zeros((model.hyper.n_y, 0))
    return np.hstack([np.hstack([lm.A, lm.b[:, None]]) for lm in model.locals])


def unpack_parameters(Phi: np.ndarray, n_regressor: int) -> list[LocalLinearModel]:
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    w = n_regressor + 1
    if Phi.shape[1] % w:
        raise DimensionError("Phi", f"column count {Phi.shape[1]} is not a multiple of {w}")
    return [LocalLinearModel(Phi[:, i * w:i * w + n_regressor].copy(), Phi[:, i * w + n_regressor].copy())
            for i in range(Phi.shape[1] // w)]


def predict(model: CompositeStfModel, U) -> np.ndarray:
    """``y_hat = sum_i alpha_i(U) (A_i U + b_i)``."""
    U = np.asarray(U, dtype=float)
    alpha = interpolation_weights(model, U)
    out = np.zeros(model.hyper.n_y)
    for a, lm in zip(alpha, model.locals):
        out += a * (lm.A @ U + lm.b)
    return out


def predict_batch(model: CompositeStfModel, U_rows) -> np.ndarray:
    U_rows = np.atleast_2d(np.asarray(U_rows, dtype=float))
    alpha = weights_batch(model, U_rows)
    zeta = pack_regressor_batch(U_rows, alpha)
    return zeta @ pack_parameters(model).T


def predict_gradient(model: CompositeStfModel, U) -> tuple[np.ndarray, np.ndarray]:
    """Prediction and its exact Jacobian ``d y_hat / d U`` (weights included)."""
    U = np.asarray(U, dtype=float)
    alpha = interpolation_weights(model, U)
    G = np.array([c.prec_u @ (U - c.center_u) for c in model.clusters])  # dD_i/dU
    g_bar = alpha @ G
    F = np.array([lm.A @ U + lm.b for lm in model.locals])  # L x n_y
    y = alpha @ F
    J = np.zeros((model.hyper.n_y, U.size))
    for a, lm, f, gi in zip(alpha, model.locals, F, G):
        J += a * lm.A - a * np.outer(f, gi - g_bar)
    return y, J


def _new_cluster(hyper: StfHyperParams, xa: np.ndarray) -> Cluster:
    return Cluster(
        centroid=xa.copy(),
        covariance=hyper.sigma0 ** 2 * np.eye(hyper.n_joint),
        residual_cov=np.eye(hyper.n_y),
        sample_count=1,
        n_regressor=hyper.n_regressor,
    )


def evolve(model: CompositeStfModel, U, y):
    """Assimilate one data point into the cluster structure.

    Returns ``(new_model, event, index)`` where ``event`` is ``"created"`` or
    ``"matched"``. Local model parameters are left alone except that a newly
    created cluster copies the local model of its nearest neighbour.
    """
    hyper = model.hyper
    U = np.asarray(U, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if U.size != hyper.n_regressor:
        raise DimensionError("U_stf", f"expected length {hyper.n_regressor}, got {U.size}")
    if y.size != hyper.n_y:
        raise DimensionError("y", f"expected length {hyper.n_y}, got {y.size}")
    xa = np.concatenate([U, y])
    if model.L == 0:
        local = LocalLinearModel(np.zeros((hyper.n_y, hyper.n_regressor)), np.zeros(hyper.n_y))
        new = replace(model, clusters=(_new_cluster(hyper, xa),), locals=(local,))
        return new, "created", 0

    D = np.array([dissimilarity((U, y), c, lm) for c, lm in zip(model.clusters, model.locals)])
    j = int(np.argmin(D))  # lowest index on ties
    if D[j] > hyper.create_threshold and model.L < hyper.L_max:
        src = model.locals[j]
        local = LocalLinearModel(src.A.copy(), src.b.copy())
        new = replace(model, clusters=model.clusters + (_new_cluster(hyper, xa),),
                      locals=model.locals + (local,))
        return new, "created", model.L

    c = model.clusters[j]
    n = c.sample_count + 1
    w = max(1.0 / n, 1.0 - hyper.forgetting)
    d = xa - c.centroid
    e = y - model.locals[j](U)
    updated = Cluster(
        centroid=c.centroid + w * d,
        covariance=(1.0 - w) * (c.covariance + w * np.outer(d, d)),
        residual_cov=(1.0 - w) * c.residual_cov + w * np.outer(e, e),
        sample_count=n,
        n_regressor=hyper.n_regressor,
    )
    clusters = model.clusters[:j] + (updated,) + model.clusters[j + 1:]
    return replace(model, clusters=clusters), "matched", j


# --- persistence -----------------------------------------------------------

def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(model: CompositeStfModel) -> dict:
    h = model.hyper
    out = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "hyper": {k: getattr(h, k) for k in h.__dataclass_fields__},
        "clusters": [
            {"centroid": _arr(c.centroid), "covariance": _arr(c.covariance),
             "residual_cov": _arr(c.residual_cov), "sample_count": c.sample_count}
            for c in model.clusters
        ],
        "locals": [{"A": _arr(lm.A), "b": _arr(lm.b)} for lm in model.locals],
        "normalizer": None,
    }
    if model.normalizer is not None:
        nz = model.normalizer
        out["normalizer"] = {"u_mean": _arr(nz.u_mean), "u_std": _arr(nz.u_std),
                             "y_mean": _arr(nz.y_mean), "y_std": _arr(nz.y_std)}
    return out


def model_from_dict(d: dict) -> CompositeStfModel:
    if d.get("format") != FORMAT_NAME:
        raise ValueError(f"not an STF model file (format={d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported STF model version {d.get('version')!r}")
    hyper = StfHyperParams(**d["hyper"])
    clusters = tuple(
        Cluster(np.array(c["centroid"]), np.array(c["covariance"]), np.array(c["residual_cov"]),
                int(c["sample_count"]), hyper.n_regressor)
        for c in d["clusters"]
    )
    locs = tuple(LocalLinearModel(np.array(lm["A"], ndmin=2), np.array(lm["b"])) for lm in d["locals"])
    nz = d.get("normalizer")
    normalizer = None
    if nz is not None:
        normalizer = Normalizer(*(np.array(nz[k]) for k in ("u_mean", "u_std", "y_mean", "y_std")))
    return CompositeStfModel(hyper, clusters, locs, normalizer)


def save_model(model: CompositeStfModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> CompositeStfModel:
    return model_from_dict(json.loads(Path(path).read_text()))
