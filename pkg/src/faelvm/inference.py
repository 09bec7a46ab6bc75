"""Test-time latent estimation with a trained model.

``infer_variational`` reads out the encoder's posterior means. ``hybrid_infer``
starts from posterior samples and climbs the decoder likelihood of the training
neurons with Adam, moving only the latents.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import diffengine as ad
from .diffengine import Tensor
from .errors import ContractError, ShapeError
from .manifold import CIRCULAR, TWO_PI, wrap
from .model import FaeLVM, poisson_nllh, sample_posterior

log = logging.getLogger(__name__)


def infer_variational(model: FaeLVM, spikes) -> np.ndarray:
    """Posterior-mean latent trajectory (T, D); no sampling."""
    spikes = np.asarray(spikes, dtype=np.float64)
    if spikes.ndim != 2 or spikes.shape[0] != model.n_neurons:
        raise ShapeError(f"expected ({model.n_neurons}, T) spikes from the training neurons, got {spikes.shape}")
    return model.encode(spikes).mean


@dataclass
class HybridResult:
    latents: np.ndarray
    lane_llh: np.ndarray
    init_llh: np.ndarray
    best_lane: int


def _lane_llh(model: FaeLVM, rates: np.ndarray, y: np.ndarray, const: float) -> np.ndarray:
    var = float(np.exp(model.params["dec.log_noise_var"][0]))
    n = y.size
    return -(0.5 * n * np.log(TWO_PI * var) + ((rates - y) ** 2).sum(axis=(-2, -1)) / (2 * var))


def hybrid_infer_lanes(model: FaeLVM, spikes, M: int = 10, steps: int = 2000, lr: float = 0.001, rng=None, init=None) -> HybridResult:
    """Hybrid inference with per-lane bookkeeping.

    ``M`` posterior samples (or the given ``init`` lanes, shape (M, T, D)) are
    refined independently by Adam ascent on log p(spikes | z) with the decoder
    frozen. Each lane keeps its best-so-far trajectory, and the lane with the
    highest final log-likelihood is returned.
    """
    if M < 1 or steps < 0:
        raise ContractError("need M >= 1 and steps >= 0")
    y = np.asarray(spikes, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != model.n_neurons:
        raise ShapeError(f"expected ({model.n_neurons}, T) spikes from the training neurons, got {y.shape}")
    topo = model.config.topology
    T, D = y.shape[1], topo.total_dim
    if T == 0:
        return HybridResult(np.zeros((0, D)), np.zeros(M), np.zeros(M), 0)
    if init is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        post = model.encode(y)
        z = np.stack([sample_posterior(post, rng) for _ in range(M)])
    else:
        z = np.array(init, dtype=np.float64).reshape(M, T, D)
    circ = topo.circular_mask
    P = model.tensors()
    const = float(gammaln(y + 1.0).sum()) if model.config.likelihood == "poisson" else 0.0
    yb = np.broadcast_to(y, (M,) + y.shape)
    state = ad.AdamState(lr=lr)
    best_z = z.copy()
    best_llh = np.full(M, -np.inf)
    init_llh = None
    poisson = model.config.likelihood == "poisson"
    for step in range(steps + 1):
        tape = ad.Tape()
        zt = tape.param("z", z)
        cols = [zt[..., f] for f in range(D)]
        rates = model.decode_t(P, cols)
        if poisson:
            loss, lane_nll = ad.poisson_loss(rates, yb, partial_axes=(-2, -1))
            llh = -(lane_nll + const)
        else:
            loss = model.reconstruction_nllh(P, yb, rates)
            llh = _lane_llh(model, rates.data, yb, const)
        if init_llh is None:
            init_llh = llh.copy()
        better = llh > best_llh
        best_llh[better] = llh[better]
        best_z[better] = z[better]
        if step == steps:
            break
        grads = ad.backward(tape, loss)
        z = ad.adam_step(state, {"z": z}, grads)["z"]
        if circ.any():
            z[..., circ] = np.mod(z[..., circ], TWO_PI)
    lane = int(np.argmax(best_llh))
    for m in range(M):
        log.debug("hybrid lane %d: init LLH %.3f -> best %.3f", m, init_llh[m], best_llh[m])
    return HybridResult(wrap(best_z[lane], topo), best_llh, init_llh, lane)


def hybrid_infer(model: FaeLVM, spikes, M: int = 10, steps: int = 2000, lr: float = 0.001, rng=None) -> np.ndarray:
    """Refined latent trajectory (T, D); see :func:`hybrid_infer_lanes`."""
    return hybrid_infer_lanes(model, spikes, M, steps, lr, rng).latents


def predict_test_rates(test_decoder: FaeLVM, latents, test_spikes) -> tuple[np.ndarray, float]:
    """Predicted rates of held-out neurons on held-out bins and their NLLH."""
    y = np.asarray(test_spikes, dtype=np.float64)
    latents = np.asarray(latents, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != test_decoder.n_neurons:
        raise ShapeError("test spikes do not match the test decoder")
    if latents.shape[0] != y.shape[1]:
        raise ShapeError(f"{latents.shape[0]} latent bins vs {y.shape[1]} spike bins")
    if y.shape[1] == 0:
        return np.zeros(y.shape), 0.0
    P = test_decoder.tensors()
    rates = test_decoder.decode_t(P, [Tensor(latents[:, f]) for f in range(latents.shape[1])])
    nll = test_decoder.reconstruction_nllh(P, y, rates).item()
    return rates.data, nll


def rates_nllh(y, rates) -> float:
    return poisson_nllh(np.asarray(y, dtype=np.float64), np.asarray(rates, dtype=np.float64)).item()
