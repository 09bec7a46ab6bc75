import numpy as np
import pytest

from faelvm import diffengine as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_grads(loss_fn, params: dict[str, np.ndarray], tol: float = 1e-5, h: float = 1e-5) -> float:
    """Compare tape gradients of ``loss_fn(tensors) -> scalar Tensor`` with finite differences.

    Returns the worst per-parameter relative error.
    """
    tape = ad.Tape()
    P = {k: tape.param(k, v) for k, v in params.items()}
    grads = ad.backward(tape, loss_fn(P))
    worst = 0.0
    for name, value in params.items():

        def f(x, name=name):
            vals = {k: ad.Tensor(x if k == name else v) for k, v in params.items()}
            return loss_fn(vals).item()

        err = rel_error(grads[name], numeric_grad(f, value, h))
        worst = max(worst, err)
        assert err < tol, f"{name}: relative gradient error {err:.3g}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ENSEMBLE_REPS = {250: 5, 500: 10, 1000: 10, 2000: 10}


class _EnsembleRuns:
    """Two-ring ensemble experiments per recording length, computed on first use."""

    def __init__(self):
        self._cache = {}

    def __getitem__(self, T):
        if T not in self._cache:
            from faelvm.experiments import EnsembleConfig, run_ensembles

            self._cache[T] = run_ensembles(range(ENSEMBLE_REPS[T]), EnsembleConfig(n_bins=T))
        return self._cache[T]


@pytest.fixture(scope="session")
def ensemble_runs():
    return _EnsembleRuns()
