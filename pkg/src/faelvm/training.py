"""ELBO objective, the chunked Adam training loop and multi-seed model selection."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as ad
from .diffengine import Tensor
from .errors import ContractError, ShapeError, TrainingAborted
from .manifold import CIRCULAR, TWO_PI, LatentTopology
from .model import FaeLVM, ModelConfig, Posterior, kl_divergence, poisson_nllh, sample_posterior_t

log = logging.getLogger(__name__)

GAIN_FLOOR = 1e-6


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    chunk_length: int = 128
    batch_size: int = 1
    num_worse: int = 5
    max_epochs: int = 500
    weight_kl: float = 0.0
    weight_time: float = 0.0
    time_penalty: str = "L1"
    weight_entropy: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("weight_kl", "weight_time", "weight_entropy"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.time_penalty not in ("L1", "L2"):
            raise ContractError("time_penalty must be 'L1' or 'L2'")
        if self.learning_rate <= 0 or self.chunk_length < 1 or self.batch_size < 1 or self.num_worse < 1:
            raise ContractError("invalid training hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    model: FaeLVM
    history: list[dict]
    step_nllh: list[float]
    train_llh: float
    seed: int
    wall_clock: float
    best_epoch: int = 0
    chunk_length: int = 0
    epoch_wall: list[float] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return min(h["objective"] for h in self.history)


# -- loss terms ----------------------------------------------------------------------


def transition_penalty(z_cols: list[Tensor], topo: LatentTopology, kind: str = "L1") -> Tensor:
    """Sum over t of the (squared, for L2) geodesic step length between z_t and z_{t+1}."""
    T = z_cols[0].shape[-1]
    if T < 2:
        return Tensor(0.0)
    d2 = None
    for f, k in enumerate(topo.factors):
        step = z_cols[f][..., 1:] - z_cols[f][..., :-1]
        if k == CIRCULAR:
            step = ad.wrap_diff(step)
        sq = ad.square(step)
        d2 = sq if d2 is None else d2 + sq
    return ad.sum(ad.sqrt(d2) if kind == "L1" else d2)


def ensemble_entropy(weights: Tensor) -> Tensor:
    """Summed Shannon entropy (nats) of the per-neuron ensemble weights."""
    w = weights.data
    if np.any(w <= 0):
        # saturated softmax rows: the zero entries contribute nothing
        safe = ad.where_const(w > 0, weights, 1.0)
        return ad.sum(ad.where_const(w > 0, weights * ad.log(safe), 0.0)) * -1.0
    return ad.sum(weights * ad.log(weights)) * -1.0


def _loss_from_latents(model: FaeLVM, P, y, z_cols, post: Posterior | None, cfg: TrainConfig):
    rates = model.decode_t(P, z_cols)
    rec = model.reconstruction_nllh(P, y, rates)
    loss = rec
    if cfg.weight_kl > 0 and post is not None:
        loss = loss + kl_divergence(post) * cfg.weight_kl
    if cfg.weight_time > 0:
        loss = loss + transition_penalty(z_cols, model.config.topology, cfg.time_penalty) * cfg.weight_time
    if cfg.weight_entropy > 0 and "dec.logits" in P:
        loss = loss + ensemble_entropy(ad.softmax(P["dec.logits"])) * cfg.weight_entropy
    return loss, rec


def elbo_loss(chunk, model: FaeLVM, cfg: TrainConfig, rng: np.random.Generator | None = None, eps=None):
    """Negative ELBO (plus optional regularizers) on one chunk, with a fresh tape.

    ``chunk`` is a (neurons, bins) matrix or a list of them (a mini-batch whose
    losses are summed). One reparameterized posterior sample is drawn from
    ``rng`` unless the noise ``eps`` (one (T,) array per factor) is given.
    Returns ``(loss, tape)``; ``tape.extras`` holds the reconstruction term.
    """
    chunks = [np.asarray(c, dtype=np.float64) for c in chunk] if isinstance(chunk, (list, tuple)) else [np.asarray(chunk, dtype=np.float64)]
    if cfg.weight_time > 0 and min(c.shape[1] for c in chunks) < 2:
        raise ContractError("transition penalty needs chunks of length >= 2")
    tape = ad.Tape()
    P = model.tensors(tape)
    # chunks are joined with zero gaps of half a kernel, which reproduces the
    # per-chunk zero padding of the convolution exactly
    gap = model.config.kernel_size // 2
    N = chunks[0].shape[0]
    pieces, keep, bounds = [], [], []
    pos = 0
    for i, c in enumerate(chunks):
        if i and gap:
            pieces.append(np.zeros((N, gap)))
            pos += gap
        pieces.append(c)
        keep.append(np.arange(pos, pos + c.shape[1]))
        bounds.append((pos, pos + c.shape[1]))
        pos += c.shape[1]
    joined = np.concatenate(pieces, axis=1) if len(pieces) > 1 else chunks[0]
    post = model.encode_t(P, joined)
    if len(chunks) > 1:
        idx = np.concatenate(keep)
        post = Posterior([m[idx] for m in post.means], [v[idx] for v in post.variances], post.topology)
        y = np.concatenate(chunks, axis=1)
    else:
        y = chunks[0]
    T = y.shape[1]
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = [rng.standard_normal(T) for _ in post.means]
    z = sample_posterior_t(post, eps)
    rates = model.decode_t(P, z)
    rec = model.reconstruction_nllh(P, y, rates)
    loss = rec
    if cfg.weight_kl > 0:
        loss = loss + kl_divergence(post) * cfg.weight_kl
    if cfg.weight_time > 0:
        start = 0
        for c in chunks:
            L = c.shape[1]
            zc = [col[start : start + L] for col in z]
            loss = loss + transition_penalty(zc, model.config.topology, cfg.time_penalty) * cfg.weight_time
            start += L
    if cfg.weight_entropy > 0 and "dec.logits" in P:
        loss = loss + ensemble_entropy(ad.softmax(P["dec.logits"])) * cfg.weight_entropy
    if not np.isfinite(loss.data):
        raise TrainingAborted("non-finite loss")
    tape.extras = {"reconstruction": rec.item()}
    return loss, tape


def full_objective(model: FaeLVM, data, cfg: TrainConfig) -> tuple[float, float]:
    """Deterministic objective on the whole data set (latents at posterior means).

    Returns ``(objective, reconstruction NLLH)``.
    """
    P = model.tensors()
    post = model.encode_t(P, data)
    loss, rec = _loss_from_latents(model, P, data, post.means, post, cfg)
    return loss.item(), rec.item()


def train_llh(model: FaeLVM, data) -> float:
    """Log-likelihood of ``data`` with latents at the posterior means."""
    P = model.tensors()
    post = model.encode_t(P, data)
    return -model.reconstruction_nllh(P, data, model.decode_t(P, post.means)).item()


# -- training loop -------------------------------------------------------------------


def effective_chunk_length(T: int, chunk_length: int) -> int:
    if T >= chunk_length:
        return chunk_length
    return min(64, T)


def fit(data, model_cfg: ModelConfig, train_cfg: TrainConfig, init: FaeLVM | None = None) -> FitResult:
    """Train a model with Adam on random contiguous chunks and epoch-level early stopping.

    One epoch is ``ceil(T / chunk_length)`` optimizer steps. After each epoch the
    deterministic full-data objective is evaluated; training stops once it has not
    improved for ``num_worse`` epochs and the best epoch's parameters are returned.
    """
    t0 = time.perf_counter()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError("data must be a (neurons, bins) matrix")
    N, T = data.shape
    L = effective_chunk_length(T, train_cfg.chunk_length)
    if L < 1:
        raise ContractError("empty data")
    rng = np.random.default_rng([train_cfg.seed, 1])
    model = init.copy() if init is not None else FaeLVM.init(model_cfg, N, train_cfg.seed, data)
    state = ad.AdamState(lr=train_cfg.learning_rate)
    steps_per_epoch = math.ceil(T / L)
    best_obj, _ = full_objective(model, data, train_cfg)
    best = model.copy()
    best_epoch = 0
    history = [{"epoch": 0, "objective": best_obj, "step": 0}]
    step_nllh: list[float] = []
    epoch_wall = [time.perf_counter() - t0]
    worse = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        for _ in range(steps_per_epoch):
            starts = rng.integers(0, T - L + 1, size=train_cfg.batch_size)
            batch = [data[:, s : s + L] for s in starts]
            try:
                loss, tape = elbo_loss(batch, model, train_cfg, rng)
                grads = ad.backward(tape, loss)
            except (TrainingAborted, FloatingPointError, ValueError) as exc:
                if isinstance(exc, (ShapeError, ContractError)):
                    raise
                raise TrainingAborted(f"seed {train_cfg.seed}, epoch {epoch}: {exc}", last_good=best) from exc
            step_nllh.append(tape.extras["reconstruction"])
            if any(not np.all(np.isfinite(v)) for v in grads.values()):
                raise TrainingAborted(f"seed {train_cfg.seed}, epoch {epoch}: non-finite gradient", last_good=best)
            model.params = ad.adam_step(state, model.params, grads)
            _wrap_centers(model)
        obj, _ = full_objective(model, data, train_cfg)
        if not np.isfinite(obj):
            raise TrainingAborted(f"seed {train_cfg.seed}, epoch {epoch}: non-finite objective", last_good=best)
        history.append({"epoch": epoch, "objective": obj, "step": state.step})
        epoch_wall.append(time.perf_counter() - t0)
        if obj < best_obj:
            best_obj, best, best_epoch, worse = obj, model.copy(), epoch, 0
        else:
            worse += 1
            if worse >= train_cfg.num_worse:
                break
    llh = train_llh(best, data)
    return FitResult(best, history, step_nllh, llh, train_cfg.seed, time.perf_counter() - t0, best_epoch, L, epoch_wall)


def _wrap_centers(model: FaeLVM) -> None:
    for j, space in enumerate(model.config.spaces):
        c = model.params[f"dec.{j}.centers"]
        for f, kind in enumerate(space.factors):
            if kind == CIRCULAR:
                c[:, f] = np.mod(c[:, f], TWO_PI)


def _fit_job(args):
    data, model_cfg, train_cfg = args
    try:
        return fit(data, model_cfg, train_cfg)
    except TrainingAborted as exc:
        log.warning("fit aborted: %s", exc)
        return exc


def multi_seed_fit(data, model_cfg: ModelConfig, train_cfg: TrainConfig, n_seeds: int, threads: int = 1, seeds=None, fit_fn=None):
    """Fit ``n_seeds`` models (seeds 0..n_seeds-1) and pick the highest train LLH.

    Aborted fits are dropped. Returns ``(best, results)`` where ``results`` holds
    every surviving :class:`FitResult` in seed order.
    """
    if n_seeds < 1:
        raise ContractError("n_seeds must be >= 1")
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    cfgs = [TrainConfig(**{**train_cfg.to_dict(), "seed": int(s)}) for s in seeds]
    if fit_fn is not None:
        outcomes = []
        for c in cfgs:
            try:
                outcomes.append(fit_fn(data, model_cfg, c))
            except TrainingAborted as exc:
                outcomes.append(exc)
    elif threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_fit_job, [(data, model_cfg, c) for c in cfgs]))
    else:
        outcomes = [_fit_job((data, model_cfg, c)) for c in cfgs]
    results = [r for r in outcomes if isinstance(r, FitResult)]
    if not results:
        raise TrainingAborted("all seeds aborted")
    best = max(results, key=lambda r: r.train_llh)
    return best, results


# -- test-neuron decoders ------------------------------------------------------------


def _test_neuron_init(model: FaeLVM, latents: np.ndarray, y: np.ndarray, rng) -> dict[str, np.ndarray]:
    """Grid-search initial centers per latent space, with the closed-form Poisson gain."""
    cfg = model.config
    Nt = y.shape[0]
    P = model.tensors()
    bounds = np.cumsum([0] + [s.total_dim for s in cfg.spaces])
    cols = [Tensor(latents[:, f]) for f in range(latents.shape[1])]
    out: dict[str, np.ndarray] = {}
    for j, space in enumerate(cfg.spaces):
        if space.total_dim == 1 and space.factors[0] == CIRCULAR:
            cand = (np.arange(72) * TWO_PI / 72)[:, None]
        else:
            cand = np.empty((128, space.total_dim))
            for f, kind in enumerate(space.factors):
                sub = latents[:, bounds[j] + f]
                cand[:, f] = rng.uniform(0, TWO_PI, 128) if kind == CIRCULAR else rng.uniform(sub.min(), sub.max(), 128)
        Pc = dict(P)
        Pc[f"dec.{j}.centers"] = Tensor(cand)
        if f"dec.{j}.beta" in P and P[f"dec.{j}.beta"].ndim == 2:
            Pc[f"dec.{j}.beta"] = Tensor(np.broadcast_to(model.params[f"dec.{j}.beta"].mean(axis=0), (len(cand), cfg.n_basis)).copy())
        nl = ad.exp if cfg.nonlinearity == "exp" else ad.softplus
        g = nl(model.space_log_rates(Pc, cols[bounds[j] : bounds[j + 1]], j)).data  # (C, T)
        gain = np.maximum(y.sum(axis=1, keepdims=True) / g.sum(axis=1)[None, :], GAIN_FLOOR)  # (Nt, C)
        rate = gain[:, :, None] * g[None] + cfg.background_rate
        nll = (rate - y[:, None, :] * np.log(rate)).sum(axis=2)
        best = np.argmin(nll, axis=1)
        out[f"dec.{j}.centers"] = cand[best].copy()
        out.setdefault("_gain", []).append(gain[np.arange(Nt), best])
    gains = np.mean(out.pop("_gain"), axis=0)
    if cfg.learn_coeff:
        out["dec.log_gain"] = np.log(np.maximum(gains, GAIN_FLOOR))
    if cfg.n_spaces > 1:
        out["dec.logits"] = np.zeros((Nt, cfg.n_spaces))
    for j in range(cfg.n_spaces):
        b = model.params.get(f"dec.{j}.beta")
        if b is not None and b.ndim == 2:
            out[f"dec.{j}.beta"] = np.broadcast_to(b.mean(axis=0), (Nt, cfg.n_basis)).copy()
    return out


def fit_test_neurons(model: FaeLVM, latents, test_spikes, steps: int = 1500, lr: float = 0.01, seed: int = 0) -> FaeLVM:
    """Fit decoder rows for held-out neurons on frozen latents and shared features.

    Only per-neuron parameters (centers, gains, ensemble logits and, for the
    free-basis decoder, basis weights) are optimized, by full-batch Adam on the
    Poisson NLLH. Returns a decoder-only :class:`FaeLVM` over the test neurons.
    """
    y = np.asarray(test_spikes, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise ContractError("need at least one test neuron")
    latents = np.asarray(latents, dtype=np.float64).reshape(y.shape[1], -1)
    rng = np.random.default_rng([seed, 7])
    Nt = y.shape[0]
    rows = _test_neuron_init(model, latents, y, rng)
    params = {k: v.copy() for k, v in model.params.items() if k.startswith("dec.") and k not in model.neuron_params()}
    params.update(rows)
    test = FaeLVM(model.config, Nt, params, set(model.frozen))
    trainable = list(rows)
    state = ad.AdamState(lr=lr)
    cols = [latents[:, f] for f in range(latents.shape[1])]
    best_nll, best_params = np.inf, None
    for _ in range(steps + 1):
        tape = ad.Tape()
        P = test.tensors(tape, trainable)
        rates = test.decode_t(P, [Tensor(c) for c in cols])
        loss = test.reconstruction_nllh(P, y, rates)
        if loss.item() < best_nll:
            best_nll, best_params = loss.item(), {k: v.copy() for k, v in test.params.items()}
        if _ == steps:
            break
        grads = ad.backward(tape, loss)
        test.params = ad.adam_step(state, test.params, grads)
        _wrap_centers(test)
        if "dec.log_gain" in test.params:
            np.maximum(test.params["dec.log_gain"], np.log(GAIN_FLOOR), out=test.params["dec.log_gain"])
    test.params = best_params
    return test
