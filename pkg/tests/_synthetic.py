"""Synthetic composite systems with known parameters for learning tests."""
import numpy as np

from ddspc import concurrent_learning as cl
from ddspc import stf_model as stf


def composite_system(seed=0, n_regressor=3, L=2):
    """Fixed two-regime STF structure and a random true ``Phi`` (q = 8)."""
    rng = np.random.default_rng(seed)
    hyper = stf.StfHyperParams(L_max=L, n_static=n_regressor)
    clusters = []
    for i in range(L):
        c = np.full(n_regressor, 1.0 if i % 2 == 0 else -1.0) * (1 + i // 2)
        clusters.append(stf.Cluster(np.append(c, 0.0), np.eye(n_regressor + 1), np.eye(1), 10, n_regressor))
    locs = tuple(stf.LocalLinearModel(np.zeros((1, n_regressor)), np.zeros(1)) for _ in range(L))
    model = stf.CompositeStfModel(hyper, tuple(clusters), locs)
    Phi = rng.normal(size=(1, model.q))
    return model, Phi, rng


def sample_zeta(model, rng, scale=1.5):
    U = rng.normal(size=model.hyper.n_regressor) * scale
    return stf.pack_regressor(U, stf.interpolation_weights(model, U))


def filled_stack(model, Phi, rng, rho=1.0, n=400, noise=0.0):
    stack = cl.HistoryStack.empty(model.q, 1)
    for _ in range(n):
        z = sample_zeta(model, rng)
        y = Phi @ z + rng.uniform(-noise, noise, size=1)
        stack, _ = cl.record_sample(stack, z, y, rho=rho)
    return stack


def uniform_fixed_rate(stack, fraction=0.9):
    """A rate below the bound for every possible current sample (||zbar|| < 1)."""
    ev = np.linalg.eigvalsh(stack.zbar.T @ stack.zbar)
    return fraction * 2.0 * ev[0] / (ev[-1] + 1.0) ** 2
