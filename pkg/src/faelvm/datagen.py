"""Synthetic ground-truth populations.

Ring populations follow the standard desk-scale recipe: a smooth Gaussian
process latent wrapped onto the circle, Gaussian-bump tuning with random
centers, and Poisson spike counts. A calcium kernel and a moving-dot retina
toy cover the continuous-trace setting.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import ContractError, DomainError, NumericError
from .manifold import TWO_PI, LatentTopology, geodesic_distance
from .model import FaeLVM, ModelConfig

CHOLESKY_MAX_T = 4000


@dataclass
class SynthConfig:
    n_neurons: int = 30
    n_bins: int = 1000
    n_ensembles: int = 1
    tuning_width: float = 1.2
    peak_rate: float = 0.5
    background: float = 0.005
    gp_sd: float = 5.0
    gp_scale: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.tuning_width <= 0:
            raise ContractError("tuning_width must be > 0")
        if self.peak_rate < 0 or self.background < 0:
            raise ContractError("rates must be >= 0")
        if self.n_bins < 2:
            raise ContractError("need at least 2 bins")
        if self.n_ensembles < 1 or self.n_neurons < 1:
            raise ContractError("need at least one neuron and one ensemble")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    """Everything the generator knows: latents (T, k), labels, centers and rates."""

    latents: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    rates: np.ndarray
    tuning_width: float
    peak_rate: float
    background: float
    topology: LatentTopology = field(default_factory=LatentTopology.circle)

    @property
    def n_ensembles(self) -> int:
        return self.latents.shape[1] // self.topology.total_dim

    def decoder_model(self) -> tuple[FaeLVM, np.ndarray]:
        """A bump decoder reproducing :attr:`rates`, and its one-hot ensemble weights."""
        k = self.n_ensembles
        N = len(self.labels)
        cfg = ModelConfig(
            spaces=[self.topology] * k,
            decoder="bump",
            nonlinearity="exp",
            learn_coeff=True,
            background_rate=self.background,
        )
        params = {}
        for j in range(k):
            params[f"dec.{j}.centers"] = self.centers.reshape(N, -1).copy()
            params[f"dec.{j}.log_sigma"] = np.array([np.log(self.tuning_width)])
        params["dec.log_gain"] = np.full(N, np.log(self.peak_rate)) if self.peak_rate > 0 else np.full(N, -np.inf)
        weights = np.zeros((N, k))
        weights[np.arange(N), self.labels] = 1.0
        if k > 1:
            params["dec.logits"] = np.where(weights > 0, 30.0, 0.0)
        return FaeLVM(cfg, N, params), weights

    def to_dict(self) -> dict:
        return {
            "labels": self.labels.tolist(),
            "centers": self.centers.tolist(),
            "tuning_width": self.tuning_width,
            "peak_rate": self.peak_rate,
            "background": self.background,
            "topology": self.topology.to_dict(),
        }


def _se_kernel(lags: np.ndarray, sd: float, scale: float) -> np.ndarray:
    return sd * sd * np.exp(-(lags**2) / (2.0 * scale * scale))


def sample_gp(T: int, sd: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Unwrapped zero-mean GP sample with a squared-exponential kernel on bins 0..T-1.

    Uses a Cholesky factor of the Gram matrix (diagonal jitter 1e-8) for
    ``T <= 4000`` and circulant embedding beyond that.
    """
    if T < 2:
        raise ContractError("T must be >= 2")
    if sd == 0:
        return np.zeros(T)
    if T <= CHOLESKY_MAX_T:
        t = np.arange(T, dtype=np.float64)
        K = _se_kernel(t[:, None] - t[None, :], sd, scale) + 1e-8 * np.eye(T)
        try:
            L = linalg.cholesky(K, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericError(f"GP Gram matrix not positive definite: {exc}") from None
        return L @ rng.standard_normal(T)
    m = 1 << int(np.ceil(np.log2(2 * (T + int(10 * scale)))))
    lags = np.minimum(np.arange(m), m - np.arange(m)).astype(np.float64)
    lam = np.fft.fft(_se_kernel(lags, sd, scale)).real
    lam = np.maximum(lam, 0.0)
    w = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    x = np.fft.fft(np.sqrt(lam / m) * w)
    return x.real[:T]


def sample_gp_latent(T: int, sd: float = 5.0, scale: float = 50.0, seed=0) -> np.ndarray:
    """GP latent wrapped onto the circle, shape (T, 1)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = sample_gp(T, sd, scale, rng)
    z = np.mod(x, TWO_PI)
    z[z >= TWO_PI] = 0.0
    return z[:, None]


def bump_rates(latent: np.ndarray, centers: np.ndarray, width: float, peak: float, background: float) -> np.ndarray:
    """``peak * exp(-d^2 / width^2) + background`` for each center (rows) and bin (columns)."""
    d = geodesic_distance(latent.reshape(1, -1, 1), np.asarray(centers).reshape(-1, 1, 1), LatentTopology.circle())
    return peak * np.exp(-(d**2) / width**2) + background


def generate_multi_ensemble(cfg: SynthConfig) -> tuple[np.ndarray, GroundTruth]:
    """``k`` equally sized ensembles, each tuned to its own GP ring latent.

    Neurons are built contiguously per ensemble and then rows are shuffled.
    """
    k, N, T = cfg.n_ensembles, cfg.n_neurons, cfg.n_bins
    if N % k:
        raise ContractError(f"{N} neurons cannot be split into {k} equal ensembles")
    ss = np.random.SeedSequence(cfg.seed)
    lat_ss, cen_ss, perm_ss, spk_ss = ss.spawn(4)
    lat_rngs = [np.random.default_rng(s) for s in lat_ss.spawn(k)]
    latents = np.concatenate([sample_gp_latent(T, cfg.gp_sd, cfg.gp_scale, r) for r in lat_rngs], axis=1)
    centers = np.random.default_rng(cen_ss).uniform(0.0, TWO_PI, N)
    labels = np.repeat(np.arange(k), N // k)
    perm = np.random.default_rng(perm_ss).permutation(N)
    labels, centers = labels[perm], centers[perm]
    rates = np.empty((N, T))
    for j in range(k):
        idx = labels == j
        rates[idx] = bump_rates(latents[:, j], centers[idx], cfg.tuning_width, cfg.peak_rate, cfg.background)
    spikes = np.random.default_rng(spk_ss).poisson(rates).astype(np.float64)
    gt = GroundTruth(latents, labels, centers[:, None], rates, cfg.tuning_width, cfg.peak_rate, cfg.background)
    return spikes, gt


def generate_ring_ensemble(cfg: SynthConfig) -> tuple[np.ndarray, GroundTruth]:
    """Single ring population (``n_ensembles`` is ignored)."""
    one = SynthConfig(**{**cfg.to_dict(), "n_ensembles": 1})
    return generate_multi_ensemble(one)


# -- calcium and the visual toy --------------------------------------------------------


def calcium_kernel(tau_rise: float, tau_decay: float, length: int | None = None) -> np.ndarray:
    """Double-exponential kernel ``exp(-t/tau_decay) - exp(-t/tau_rise)`` scaled to peak 1."""
    if not (tau_decay > tau_rise > 0):
        raise DomainError("need tau_decay > tau_rise > 0")
    length = length or int(np.ceil(10 * tau_decay)) + 1
    t = np.arange(length, dtype=np.float64)
    h = np.exp(-t / tau_decay) - np.exp(-t / tau_rise)
    t_peak = np.log(tau_decay / tau_rise) * tau_rise * tau_decay / (tau_decay - tau_rise)
    peak = np.exp(-t_peak / tau_decay) - np.exp(-t_peak / tau_rise)
    return h / peak


def calcium_convolve(spikes, tau_rise: float = 1.0, tau_decay: float = 8.0, noise_sd: float = 0.0, rng=None) -> np.ndarray:
    """Causal convolution of spike counts (N, T) with the calcium kernel, plus Gaussian noise."""
    h = calcium_kernel(tau_rise, tau_decay)
    spikes = np.atleast_2d(np.asarray(spikes, dtype=np.float64))
    T = spikes.shape[1]
    traces = np.stack([np.convolve(row, h)[:T] for row in spikes])
    if noise_sd > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        traces = traces + rng.normal(0.0, noise_sd, traces.shape)
    return traces


@dataclass
class VisualToyConfig:
    n_bins: int = 2000
    grid: int = 32
    rf_per_side: int = 6
    center_sd: float = 2.0
    surround_sd: float = 4.0
    surround_weight: float = 0.5
    peak_rate: float = 0.5
    background: float = 0.005
    speed_sd: float = 0.15
    momentum: float = 0.95
    tau_rise: float = 1.0
    tau_decay: float = 8.0
    noise_sd: float = 0.05
    seed: int = 0


def dog_rates(positions: np.ndarray, rf_centers: np.ndarray, cfg: VisualToyConfig) -> np.ndarray:
    """Rectified difference-of-Gaussians response of each RF (rows) to dot positions (columns)."""
    d2 = ((positions[None, :, :] - rf_centers[:, None, :]) ** 2).sum(axis=-1)
    dog = np.exp(-d2 / (2 * cfg.center_sd**2)) - cfg.surround_weight * np.exp(-d2 / (2 * cfg.surround_sd**2))
    return cfg.peak_rate * np.maximum(dog, 0.0) / (1.0 - cfg.surround_weight) + cfg.background


def random_walk_2d(cfg: VisualToyConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth random walk in the box [0, grid) with reflective walls, shape (T, 2)."""
    hi = float(cfg.grid - 1)
    pos = np.empty((cfg.n_bins, 2))
    p = rng.uniform(0.25 * hi, 0.75 * hi, 2)
    v = np.zeros(2)
    for t in range(cfg.n_bins):
        v = cfg.momentum * v + rng.normal(0.0, cfg.speed_sd, 2)
        p = p + v
        for a in range(2):
            if p[a] < 0:
                p[a], v[a] = -p[a], -v[a]
            elif p[a] > hi:
                p[a], v[a] = 2 * hi - p[a], -v[a]
        pos[t] = p
    return pos


def generate_visual_toy(seed: int = 0, cfg: VisualToyConfig | None = None) -> tuple[np.ndarray, GroundTruth]:
    """Moving dot seen by a grid of center-surround cells; returns calcium traces (N, T)."""
    cfg = cfg or VisualToyConfig(seed=seed)
    ss = np.random.SeedSequence(seed)
    walk_ss, spk_ss, noise_ss = ss.spawn(3)
    pos = random_walk_2d(cfg, np.random.default_rng(walk_ss))
    ax = (np.arange(cfg.rf_per_side) + 0.5) * cfg.grid / cfg.rf_per_side
    rf = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    rates = dog_rates(pos, rf, cfg)
    spikes = np.random.default_rng(spk_ss).poisson(rates).astype(np.float64)
    traces = calcium_convolve(spikes, cfg.tau_rise, cfg.tau_decay, cfg.noise_sd, np.random.default_rng(noise_ss))
    gt = GroundTruth(pos, np.zeros(len(rf), dtype=int), rf, rates, cfg.center_sd, cfg.peak_rate, cfg.background, LatentTopology.euclidean(2))
    return traces, gt
