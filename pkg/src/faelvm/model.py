"""The feature-sharing, ensemble-detecting latent variable model.

The encoder is a small temporal convolutional network that maps a window of
spike counts to a factorized posterior over latent coordinates: a mean angle
and a tangent-space variance for every circular factor, a mean and variance
for every Euclidean factor. The decoder is a parametric tuning-curve model.
Each latent space carries one shared tuning shape (a single heat-kernel bump,
or a small Gaussian basis) that every neuron reuses at its own center, and a
per-neuron softmax over latent spaces decides which ensemble a neuron
belongs to.

All tensor-level functions here build on :mod:`faelvm.diffengine`, so they are
differentiable with respect to every parameter and latent.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from . import diffengine as ad
from .diffengine import Tensor
from .errors import ContractError, DomainError, FormatError, ShapeError, VersionError
from .manifold import CIRCULAR, TWO_PI, LatentTopology, wrap

FORMAT_VERSION = 1
VAR_MIN = 1e-6
VAR_MAX = 1.0
NORM_EPS = 1e-8
DECODER_VARIANTS = ("bump", "shared_basis", "free_basis")
VARIANT_ALIASES = {"b": "bump", "s": "shared_basis", "n": "free_basis"}


@dataclass
class ModelConfig:
    spaces: list[LatentTopology] = field(default_factory=lambda: [LatentTopology.circle()])
    decoder: str = "bump"
    n_basis: int = 4
    kernel_size: int = 9
    n_hidden: int = 64
    nonlinearity: str = "softplus"
    learn_coeff: bool = False
    learn_mean: bool = False
    learn_var: bool = False
    isotropic: bool = False
    background_rate: float = 1e-4
    likelihood: str = "poisson"

    def __post_init__(self):
        self.spaces = [s if isinstance(s, LatentTopology) else _topology_from(s) for s in self.spaces]
        self.decoder = VARIANT_ALIASES.get(self.decoder, self.decoder)
        if self.decoder not in DECODER_VARIANTS:
            raise ContractError(f"unknown decoder variant {self.decoder!r}")
        if self.n_basis < 1:
            raise ContractError("n_basis must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ContractError("kernel_size must be a positive odd integer")
        if self.nonlinearity not in ("exp", "softplus"):
            raise ContractError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.likelihood not in ("poisson", "gaussian"):
            raise ContractError(f"unknown likelihood {self.likelihood!r}")
        if self.background_rate < 0:
            raise ContractError("background_rate must be >= 0")
        if not self.spaces:
            raise ContractError("at least one latent space is required")

    @property
    def n_spaces(self) -> int:
        return len(self.spaces)

    @property
    def topology(self) -> LatentTopology:
        """All latent spaces concatenated into one product topology."""
        topo = self.spaces[0]
        for s in self.spaces[1:]:
            topo = topo + s
        return topo

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spaces"] = [s.to_dict() for s in self.spaces]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["spaces"] = [_topology_from(s) for s in d.get("spaces", ["S1"])]
        return cls(**d)


def _topology_from(s) -> LatentTopology:
    if isinstance(s, LatentTopology):
        return s
    if isinstance(s, str):
        return LatentTopology.parse(s)
    return LatentTopology.from_dict(s)


@dataclass
class PosteriorParams:
    """Per-bin posterior means (angles for circular factors) and variances, shape (T, D)."""

    mean: np.ndarray
    var: np.ndarray
    topology: LatentTopology

    def __len__(self) -> int:
        return self.mean.shape[0]


@dataclass
class Posterior:
    """Tensor-valued posterior: one (mean, var) pair of shape (T,) per factor."""

    means: list[Tensor]
    variances: list[Tensor]
    topology: LatentTopology

    def numpy(self) -> PosteriorParams:
        T = self.means[0].shape[0] if self.means else 0
        mean = np.stack([m.data for m in self.means], axis=-1) if self.means else np.zeros((T, 0))
        var = np.stack([v.data for v in self.variances], axis=-1) if self.variances else np.zeros((T, 0))
        D = len(self.means)
        return PosteriorParams(mean.reshape(T, D), var.reshape(T, D), self.topology)


# -- likelihoods and KL --------------------------------------------------------------


def poisson_nllh(y, rates) -> Tensor:
    """Summed Poisson negative log-likelihood, including the log(y!) term."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    rates = rates if isinstance(rates, Tensor) else Tensor(rates)
    if y.shape != rates.shape:
        raise ShapeError(f"counts {y.shape} vs rates {rates.shape}")
    if np.any(rates.data <= 0):
        raise DomainError("Poisson rates must be > 0")
    if np.any(y < 0):
        raise DomainError("counts must be >= 0")
    const = float(gammaln(y + 1.0).sum())
    return ad.poisson_loss(rates, y) + const


def gaussian_nllh(x, predictions, noise_var) -> Tensor:
    """Summed Gaussian negative log-likelihood with a scalar noise variance."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    pred = predictions if isinstance(predictions, Tensor) else Tensor(predictions)
    var = noise_var if isinstance(noise_var, Tensor) else Tensor(np.asarray(noise_var, dtype=np.float64))
    if var.size != 1:
        raise ShapeError("noise variance must be a scalar")
    if float(var.data.reshape(())) <= 0:
        raise DomainError("noise variance must be > 0")
    if x.shape != pred.shape:
        raise ShapeError(f"traces {x.shape} vs predictions {pred.shape}")
    var = ad.reshape(var, ())
    resid = pred - Tensor(x)
    n = x.size
    return ad.log(var * TWO_PI) * (0.5 * n) + ad.sum(ad.square(resid)) / (var * 2.0)


def kl_divergence(post: Posterior) -> Tensor:
    """Tangent-space KL to the unit-variance prior, summed over bins and factors.

    Circular factors use ``0.5 * (v - 1 - log v)`` with the prior mean matched
    to the posterior mean; Euclidean factors use the full Gaussian KL against
    N(0, 1).
    """
    total = Tensor(0.0)
    for kind, m, v in zip(post.topology.factors, post.means, post.variances):
        if np.any(v.data <= 0) or np.any(v.data > VAR_MAX * (1 + 1e-12)):
            raise DomainError("posterior variance outside (0, 1]")
        term = v - 1.0 - ad.log(v)
        if kind != CIRCULAR:
            term = term + ad.square(m)
        total = total + ad.sum(term) * 0.5
    return total


# -- tuning curves -------------------------------------------------------------------


def _nonlinearity(name: str):
    return ad.exp if name == "exp" else ad.softplus


def _as_cols(z, topo: LatentTopology) -> list[Tensor]:
    if isinstance(z, (list, tuple)):
        return [c if isinstance(c, Tensor) else Tensor(c) for c in z]
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape[-1] != topo.total_dim:
        raise ShapeError(f"latent dim {z.shape[-1]} vs topology dim {topo.total_dim}")
    return [z[..., f] for f in range(topo.total_dim)]


def bump_log_rate(z, centers, sigma, topo: LatentTopology) -> Tensor:
    """``-d(z, center)^2 / sigma^2`` for every neuron and bin, shape (..., N, T)."""
    cols = _as_cols(z, topo)
    centers = centers if isinstance(centers, Tensor) else Tensor(np.atleast_2d(centers))
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma, dtype=np.float64))
    if np.any(sigma.data <= 0):
        raise DomainError("tuning width must be > 0")
    d2 = ad.pairwise_sq_dist(cols, centers, topo.circular_mask)
    return ad.div(d2, ad.square(ad.reshape(sigma, ()))) * -1.0


def basis_log_rate(z, centers, beta, basis_mu, basis_sigma, topo: LatentTopology) -> Tensor:
    """Weighted Gaussian-basis log-rate, shape (..., N, T).

    Basis function k of neuron i is centered at ``center_i + basis_mu_k``, so
    moving a neuron's center translates its whole tuning curve. ``beta`` is
    either shared (K,) or per neuron (N, K).
    """
    cols = _as_cols(z, topo)
    centers = centers if isinstance(centers, Tensor) else Tensor(np.atleast_2d(centers))
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    basis_mu = basis_mu if isinstance(basis_mu, Tensor) else Tensor(np.asarray(basis_mu, dtype=np.float64).reshape(-1, topo.total_dim))
    basis_sigma = basis_sigma if isinstance(basis_sigma, Tensor) else Tensor(np.atleast_1d(basis_sigma))
    if np.any(basis_sigma.data <= 0):
        raise DomainError("basis widths must be > 0")
    K = basis_mu.shape[0]
    if beta.shape[-1] != K:
        raise ShapeError(f"beta has {beta.shape[-1]} entries for {K} basis functions")
    N = centers.shape[0]
    shape = cols[0].shape[:-1] + (N, cols[0].shape[-1])
    lead = len(shape) - 2
    D = topo.total_dim
    total = None
    for k in range(K):
        # distance to the shifted center, wrapped per factor inside the kernel
        shifted = centers + ad.broadcast_to(ad.reshape(basis_mu[k], (1, D)), (N, D))
        s = basis_sigma[k] if basis_sigma.shape[0] == K else basis_sigma[0]
        d2 = ad.pairwise_sq_dist(cols, shifted, topo.circular_mask)
        e = ad.exp(ad.div(d2, ad.square(s)) * -1.0)
        if beta.ndim == 2:
            b = ad.broadcast_to(ad.reshape(beta[:, k], (1,) * lead + (N, 1)), shape)
            term = e * b
        else:
            term = e * beta[k]
        total = term if total is None else total + term
    return total


def tuning_bump(z, center, sigma, topo: LatentTopology | None = None, nonlinearity: str = "exp") -> np.ndarray:
    """Evaluate the heat-kernel bump tuning curve at points ``z`` (..., D)."""
    topo = topo or LatentTopology.circle()
    if np.any(np.asarray(sigma) <= 0):
        raise DomainError("tuning width must be > 0")
    z = np.asarray(z, dtype=np.float64)
    zz = z.reshape(-1, topo.total_dim)
    lr = bump_log_rate(zz, np.asarray(center, dtype=np.float64).reshape(1, -1), sigma, topo)
    return _nonlinearity(nonlinearity)(lr).data[0].reshape(z.shape[:-1])


def tuning_basis(z, center, beta, basis_mu, basis_sigma, topo: LatentTopology | None = None, nonlinearity: str = "exp") -> np.ndarray:
    """Evaluate the Gaussian-basis tuning curve at points ``z`` (..., D)."""
    topo = topo or LatentTopology.circle()
    if np.any(np.asarray(basis_sigma) <= 0):
        raise DomainError("basis widths must be > 0")
    z = np.asarray(z, dtype=np.float64)
    zz = z.reshape(-1, topo.total_dim)
    lr = basis_log_rate(zz, np.asarray(center, dtype=np.float64).reshape(1, -1), np.asarray(beta, dtype=np.float64), basis_mu, np.asarray(basis_sigma, dtype=np.float64), topo)
    return _nonlinearity(nonlinearity)(lr).data[0].reshape(z.shape[:-1])


# -- the model -----------------------------------------------------------------------


def basis_grid(topo: LatentTopology, K: int) -> tuple[np.ndarray, float]:
    """Fixed basis centers: K evenly spaced points, plus the spacing used as width."""
    circ = np.arange(K) * (TWO_PI / K)
    eucl = np.linspace(-2.0, 2.0, K) if K > 1 else np.zeros(1)
    cols = [circ if kind == CIRCULAR else eucl for kind in topo.factors]
    mu = np.stack(cols, axis=-1)
    if all(kind == CIRCULAR for kind in topo.factors):
        spacing = TWO_PI / K
    else:
        spacing = 4.0 / (K - 1) if K > 1 else 1.0
    return mu, spacing


class FaeLVM:
    """Encoder + tuning-curve decoder with named numpy parameter arrays.

    ``params`` maps names to float64 arrays; names listed in ``frozen`` are
    never updated by the optimizer.
    """

    def __init__(self, config: ModelConfig, n_neurons: int, params: dict[str, np.ndarray], frozen: set[str] | None = None):
        self.config = config
        self.n_neurons = int(n_neurons)
        self.params = params
        self.frozen = set(frozen or ())

    # construction -----------------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, n_neurons: int, seed: int = 0, data: np.ndarray | None = None) -> "FaeLVM":
        rng = np.random.default_rng(seed)
        N, H, K = n_neurons, config.n_hidden, config.kernel_size
        topo = config.topology
        head = sum(3 if f == CIRCULAR else 2 for f in topo.factors)
        p: dict[str, np.ndarray] = {
            "enc.conv.w": rng.normal(0.0, np.sqrt(1.0 / K), (N, 1, K)),
            "enc.conv.b": np.zeros(N),
            "enc.l1.w": rng.normal(0.0, np.sqrt(1.0 / N), (N, H)),
            "enc.l1.b": np.zeros(H),
            "enc.l2.w": rng.normal(0.0, np.sqrt(1.0 / H), (H, H)),
            "enc.l2.b": np.zeros(H),
            "enc.head.w": rng.normal(0.0, np.sqrt(1.0 / H), (H, head)),
            "enc.head.b": np.zeros(head),
        }
        frozen: set[str] = set()
        for j, space in enumerate(config.spaces):
            cen = np.empty((N, space.total_dim))
            for f, kind in enumerate(space.factors):
                cen[:, f] = rng.uniform(0.0, TWO_PI, N) if kind == CIRCULAR else rng.normal(0.0, 1.0, N)
            p[f"dec.{j}.centers"] = cen
            if config.decoder == "bump":
                p[f"dec.{j}.log_sigma"] = np.zeros(1)
            else:
                nb = config.n_basis
                mu, spacing = basis_grid(space, nb)
                p[f"dec.{j}.beta"] = np.zeros((N, nb) if config.decoder == "free_basis" else nb)
                p[f"dec.{j}.basis_mu"] = mu
                p[f"dec.{j}.basis_log_sigma"] = np.full(1 if config.isotropic else nb, np.log(spacing))
                if not config.learn_mean:
                    frozen.add(f"dec.{j}.basis_mu")
                if not config.learn_var:
                    frozen.add(f"dec.{j}.basis_log_sigma")
        if config.n_spaces > 1:
            p["dec.logits"] = np.zeros((N, config.n_spaces))
        if config.learn_coeff:
            if data is not None:
                rate = np.asarray(data, dtype=np.float64).mean(axis=1)
                p["dec.log_gain"] = np.log(np.maximum(np.abs(rate), 1e-3))
            else:
                p["dec.log_gain"] = np.zeros(N)
        if config.likelihood == "gaussian":
            v = float(np.var(data)) if data is not None else 1.0
            p["dec.log_noise_var"] = np.array([np.log(max(v, 1e-6))])
        return cls(config, N, p, frozen)

    def copy(self) -> "FaeLVM":
        return FaeLVM(self.config, self.n_neurons, {k: v.copy() for k, v in self.params.items()}, set(self.frozen))

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def tensors(self, tape: ad.Tape | None = None, names=None) -> dict[str, Tensor]:
        """Parameters as tensors; with a tape, ``names`` (default: trainable) are registered."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return tape.params_from(self.params, self.trainable if names is None else names)

    # encoder -----------------------------------------------------------------------

    def encode_t(self, P: dict[str, Tensor], spikes) -> Posterior:
        spikes = np.asarray(spikes.data if isinstance(spikes, Tensor) else spikes, dtype=np.float64)
        if spikes.ndim != 2 or spikes.shape[0] != self.n_neurons:
            raise ShapeError(f"encoder expects ({self.n_neurons}, T) spikes, got {spikes.shape}")
        topo = self.config.topology
        T = spikes.shape[1]
        if T == 0:
            empty = [Tensor(np.zeros(0)) for _ in topo.factors]
            return Posterior(empty, [Tensor(np.zeros(0)) for _ in topo.factors], topo)
        x = Tensor(spikes.T)
        h = ad.conv1d(x, P["enc.conv.w"], P["enc.conv.b"], groups=self.n_neurons)
        h = ad.tanh(ad.affine(h, P["enc.l1.w"], P["enc.l1.b"]))
        h = ad.tanh(ad.affine(h, P["enc.l2.w"], P["enc.l2.b"]))
        out = ad.affine(h, P["enc.head.w"], P["enc.head.b"])
        return _posterior_from_head(out, topo)

    def encode(self, spikes) -> PosteriorParams:
        return self.encode_t(self.tensors(), spikes).numpy()

    # decoder -----------------------------------------------------------------------

    def space_log_rates(self, P: dict[str, Tensor], z_cols: list[Tensor], j: int, neurons=None) -> Tensor:
        cfg = self.config
        space = cfg.spaces[j]
        cen = P[f"dec.{j}.centers"]
        if neurons is not None:
            cen = cen[neurons]
        if cfg.decoder == "bump":
            return bump_log_rate(z_cols, cen, ad.exp(P[f"dec.{j}.log_sigma"]), space)
        beta = P[f"dec.{j}.beta"]
        if beta.ndim == 2 and neurons is not None:
            beta = beta[neurons]
        return basis_log_rate(z_cols, cen, beta, P[f"dec.{j}.basis_mu"], ad.exp(P[f"dec.{j}.basis_log_sigma"]), space)

    def decode_t(self, P: dict[str, Tensor], z, neurons=None, weights: Tensor | None = None) -> Tensor:
        """Rates (..., N, T) for latent columns ``z`` (list of (..., T) per factor or array (..., T, D)).

        ``weights`` overrides the softmax ensemble weights (shape (N, k)).
        """
        cfg = self.config
        topo = cfg.topology
        cols = _as_cols(z, topo)
        if len(cols) != topo.total_dim:
            raise ShapeError(f"{len(cols)} latent columns for topology of dim {topo.total_dim}")
        nl = _nonlinearity(cfg.nonlinearity)
        bounds = np.cumsum([0] + [s.total_dim for s in cfg.spaces])
        per_space = [nl(self.space_log_rates(P, cols[bounds[j] : bounds[j + 1]], j, neurons)) for j in range(cfg.n_spaces)]
        shape = per_space[0].shape
        lead = len(shape) - 2
        N = shape[-2]
        if cfg.n_spaces == 1 and weights is None:
            mix = per_space[0]
        else:
            if weights is None:
                logits = P["dec.logits"] if neurons is None else P["dec.logits"][neurons]
                weights = ad.softmax(logits)
            mix = None
            for j, g in enumerate(per_space):
                wj = ad.broadcast_to(ad.reshape(weights[:, j], (1,) * lead + (N, 1)), shape)
                term = g * wj
                mix = term if mix is None else mix + term
        if "dec.log_gain" in P:
            lg = P["dec.log_gain"] if neurons is None else P["dec.log_gain"][neurons]
            mix = mix * ad.broadcast_to(ad.reshape(ad.exp(lg), (1,) * lead + (N, 1)), shape)
        return mix + cfg.background_rate if cfg.background_rate > 0 else mix

    def decode_rates(self, z, neurons=None) -> np.ndarray:
        return self.decode_t(self.tensors(), np.asarray(z, dtype=np.float64), neurons).data

    def ensemble_weights(self) -> np.ndarray:
        if "dec.logits" not in self.params:
            return np.ones((self.n_neurons, 1))
        return ad.softmax(Tensor(self.params["dec.logits"])).data

    def reconstruction_nllh(self, P: dict[str, Tensor], y, rates: Tensor) -> Tensor:
        if self.config.likelihood == "poisson":
            return poisson_nllh(y, rates)
        return gaussian_nllh(y, rates, ad.exp(P["dec.log_noise_var"]))

    # neuron subsets ----------------------------------------------------------------

    def neuron_params(self, names=("centers", "beta", "logits", "log_gain")) -> list[str]:
        """Names of parameters that have one row per neuron."""
        out = []
        for k, v in self.params.items():
            if k.startswith("enc."):
                continue
            if k.split(".")[-1] in names and v.ndim >= 1 and v.shape[0] == self.n_neurons:
                if k.endswith(".beta") and v.ndim != 2:
                    continue
                out.append(k)
        return out

    # persistence -------------------------------------------------------------------

    def to_dict(self) -> dict:
        def enc(a):
            a = np.ascontiguousarray(a, dtype="<f8")
            return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}

        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "n_neurons": self.n_neurons,
            "encoder": {k: enc(v) for k, v in self.params.items() if k.startswith("enc.")},
            "decoder": {k: enc(v) for k, v in self.params.items() if not k.startswith("enc.")},
            "frozen": sorted(self.frozen),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaeLVM":
        if d.get("format_version") != FORMAT_VERSION:
            raise VersionError(f"unsupported checkpoint format_version {d.get('format_version')!r}")

        def dec(e):
            raw = np.frombuffer(base64.b64decode(e["data"]), dtype="<f8")
            return raw.reshape(e["shape"]).astype(np.float64)

        params = {k: dec(v) for k, v in d["encoder"].items()}
        params.update({k: dec(v) for k, v in d["decoder"].items()})
        return cls(ModelConfig.from_dict(d["config"]), d["n_neurons"], params, set(d.get("frozen", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FaeLVM":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a JSON checkpoint ({exc})") from None
        return cls.from_dict(d)


def _posterior_from_head(out: Tensor, topo: LatentTopology) -> Posterior:
    means, variances = [], []
    c = 0
    for kind in topo.factors:
        if kind == CIRCULAR:
            v = out[:, c : c + 2]
            ok = np.sqrt((v.data**2).sum(axis=1)) > NORM_EPS
            u = ad.l2_normalize(v, NORM_EPS)
            ux, uy = u[:, 0], u[:, 1]
            if not ok.all():
                # a vanishing direction has no angle; read it as 0 with no gradient
                ux, uy = ad.where_const(ok, ux, 1.0), ad.where_const(ok, uy, 0.0)
            means.append(ad.wrap_angle(ad.atan2(uy, ux)))
            raw = out[:, c + 2]
            c += 3
        else:
            means.append(out[:, c])
            raw = out[:, c + 1]
            c += 2
        # smooth clamp of the variance into [VAR_MIN, VAR_MAX]
        variances.append(ad.sigmoid(raw) * (VAR_MAX - VAR_MIN) + VAR_MIN)
    return Posterior(means, variances, topo)


def posterior_from_head(out, topo: LatentTopology) -> PosteriorParams:
    """Posterior implied by raw encoder head outputs, shape (T, P)."""
    return _posterior_from_head(Tensor(np.asarray(out, dtype=np.float64)), topo).numpy()


def sample_posterior_t(post: Posterior, eps: list[np.ndarray]) -> list[Tensor]:
    """Reparameterized draw ``wrap(mean + sqrt(var) * eps)`` per factor."""
    cols = []
    for kind, m, v, e in zip(post.topology.factors, post.means, post.variances, eps):
        z = m + ad.sqrt(v) * Tensor(e)
        cols.append(ad.wrap_angle(z) if kind == CIRCULAR else z)
    return cols


def sample_posterior(post: PosteriorParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one latent trajectory (T, D) from the factorized posterior."""
    eps = rng.standard_normal(post.mean.shape)
    return wrap(post.mean + np.sqrt(post.var) * eps, post.topology)


def mean_trajectory(post: PosteriorParams) -> np.ndarray:
    return post.mean.copy()
