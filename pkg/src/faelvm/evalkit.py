"""Evaluation metrics and the random hyperparameter search."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import ndimage, stats

from .errors import ConfigError, ShapeError
from .manifold import TWO_PI, LatentTopology, align_trajectories, geodesic_distance

log = logging.getLogger(__name__)


# -- latent recovery -------------------------------------------------------------------


def geodesic_error(truth, inferred, topo: LatentTopology | None = None, spaces=None) -> float:
    """Mean geodesic distance per bin after aligning ``inferred`` to ``truth``.

    ``topo`` defaults to all-circular factors.
    """
    truth = np.asarray(truth, dtype=np.float64)
    inferred = np.asarray(inferred, dtype=np.float64)
    if truth.ndim == 1:
        truth = truth[:, None]
    if inferred.ndim == 1:
        inferred = inferred[:, None]
    if truth.shape != inferred.shape:
        raise ShapeError(f"trajectory shapes differ: {truth.shape} vs {inferred.shape}")
    if truth.shape[0] == 0:
        return 0.0
    topo = topo or LatentTopology.torus(truth.shape[1])
    aligned, _ = align_trajectories(truth, inferred, topo, spaces)
    return float(geodesic_distance(aligned, truth, topo).mean())


def mean_rank(scores) -> np.ndarray:
    """Mean rank of each model (rows) over seeds (columns); rank 1 is the lowest score."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError("scores must be a (models, seeds) matrix")
    return stats.rankdata(s, method="average", axis=0).mean(axis=1)


# -- rate maps -------------------------------------------------------------------------


@dataclass
class RateMap:
    rates: np.ndarray  # (..., n_bins, n_bins), zero where unvisited
    occupancy: np.ndarray  # (n_bins, n_bins) bin counts
    visited: np.ndarray
    edges: tuple[np.ndarray, np.ndarray]


def rate_map(activity, coords, n_bins: int = 50, smooth_sd: float = 2.75, circular=(False, False), extent=None) -> RateMap:
    """Occupancy-normalized mean activity over a 2-D coordinate grid.

    ``activity`` is (T,) or (N, T) and ``coords`` is (T, 2). Circular axes span
    [0, 2*pi) and are smoothed with wraparound; other axes span the data range
    (or ``extent``) with reflective boundaries. ``smooth_sd`` is in bins; 0
    disables smoothing.
    """
    act = np.asarray(activity, dtype=np.float64)
    xy = np.asarray(coords, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ShapeError("coords must be (T, 2)")
    single = act.ndim == 1
    act = np.atleast_2d(act)
    if act.shape[1] != xy.shape[0]:
        raise ShapeError(f"{act.shape[1]} activity bins vs {xy.shape[0]} coordinates")
    circ = tuple(bool(c) for c in np.broadcast_to(np.asarray(circular, dtype=bool), (2,)))
    edges = []
    idx = []
    for a in range(2):
        if circ[a]:
            lo, hi = 0.0, TWO_PI
            x = np.mod(xy[:, a], TWO_PI)
        else:
            lo, hi = (extent[a] if extent is not None else (float(xy[:, a].min()), float(xy[:, a].max())) if len(xy) else (0.0, 1.0))
            x = xy[:, a]
            if hi <= lo:
                hi = lo + 1.0
        e = np.linspace(lo, hi, n_bins + 1)
        edges.append(e)
        idx.append(np.clip(((x - lo) / (hi - lo) * n_bins).astype(int), 0, n_bins - 1))
    flat = idx[0] * n_bins + idx[1]
    occ = np.bincount(flat, minlength=n_bins * n_bins).reshape(n_bins, n_bins).astype(np.float64)
    visited = occ > 0
    sums = np.stack([np.bincount(flat, weights=row, minlength=n_bins * n_bins) for row in act]).reshape(-1, n_bins, n_bins)
    rates = np.where(visited, sums / np.where(visited, occ, 1.0), 0.0)
    if smooth_sd > 0:
        modes = ["wrap" if c else "reflect" for c in circ]
        rates = np.stack([ndimage.gaussian_filter(r, smooth_sd, mode=modes) for r in rates])
    return RateMap(rates[0] if single else rates, occ, visited, (edges[0], edges[1]))


def spatial_information(rates, occupancy) -> float:
    """Skaggs information in bits per spike; zero-rate bins contribute nothing."""
    lam = np.asarray(rates, dtype=np.float64)
    occ = np.asarray(occupancy, dtype=np.float64)
    if lam.shape != occ.shape:
        raise ShapeError("rate map and occupancy shapes differ")
    total = occ.sum()
    if total <= 0:
        return 0.0
    p = occ / total
    mean = float((p * lam).sum())
    if mean <= 0:
        return 0.0
    r = lam / mean
    ok = (r > 0) & (p > 0)
    return float(max((p[ok] * r[ok] * np.log2(r[ok])).sum(), 0.0))


def spearman(x, y) -> tuple[float, float]:
    """Spearman rank correlation with its two-sided p-value (t approximation)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("spearman needs two equal-length 1-D samples")
    res = stats.spearmanr(x, y)
    return float(res.statistic), float(res.pvalue)


# -- random hyperparameter search --------------------------------------------------------

# Ranges of the random search; a plain value is a fixed setting.
SEARCH_SPACE: dict[str, Any] = {
    "kernel_size": {"choice": [1, 9, 17]},
    "num_hidden": {"choice": [16, 32, 64, 128, 256, 512]},
    "shared": {"choice": [True, False]},
    "learn_coeff": {"choice": [True, False]},
    "learn_mean": {"choice": [True, False]},
    "learn_var": {"choice": [True, False]},
    "isotropic": {"choice": [True, False]},
    "num_basis": {"choice": [1, 2, 4, 8]},
    "nonlinearity": {"choice": ["exp", "softplus"]},
    "batch_size": {"choice": [1, 16, 32]},
    "batch_length": {"choice": [64, 128]},
    "learning_rate": {"loguniform": [1e-4, 1e-1]},
    "num_worse": {"choice": [10, 50, 100]},
    "weight_kl": {"choice": [0.0, {"loguniform": [1e-9, 1e0]}]},
    "weight_time": {"choice": [0.0, {"loguniform": [1e-9, 1e0]}]},
    "weight_entropy": {"choice": [0.0, {"loguniform": [1e-9, 1e0]}]},
}

BEST_CONFIG: dict[str, Any] = {
    "kernel_size": 1,
    "num_hidden": 128,
    "shared": False,
    "learn_coeff": True,
    "learn_mean": False,
    "learn_var": False,
    "isotropic": False,
    "num_basis": 4,
    "nonlinearity": "softplus",
    "batch_size": 32,
    "batch_length": 64,
    "learning_rate": 0.001003,
    "num_worse": 10,
    "weight_kl": 0.0,
    "weight_time": 0.0,
    "weight_entropy": 0.0,
}


def validate_space(space: dict) -> None:
    for name, spec in space.items():
        _validate_entry(name, spec)


def _validate_entry(name: str, spec) -> None:
    if not isinstance(spec, dict):
        return
    if len(spec) != 1:
        raise ConfigError(f"{name}: a range needs exactly one of choice/uniform/loguniform")
    (kind, arg), = spec.items()
    if kind == "choice":
        if not isinstance(arg, list) or not arg:
            raise ConfigError(f"{name}: choice needs a non-empty list")
        for v in arg:
            _validate_entry(name, v)
    elif kind in ("uniform", "loguniform"):
        if not isinstance(arg, (list, tuple)) or len(arg) != 2:
            raise ConfigError(f"{name}: {kind} needs [low, high]")
        lo, hi = float(arg[0]), float(arg[1])
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise ConfigError(f"{name}: need finite low < high, got {arg}")
        if kind == "loguniform" and lo <= 0:
            raise ConfigError(f"{name}: loguniform bounds must be > 0")
    else:
        raise ConfigError(f"{name}: unknown range kind {kind!r}")


def sample_value(spec, rng: np.random.Generator):
    if not isinstance(spec, dict):
        return spec
    (kind, arg), = spec.items()
    if kind == "choice":
        return sample_value(arg[int(rng.integers(len(arg)))], rng)
    lo, hi = float(arg[0]), float(arg[1])
    if kind == "uniform":
        return float(rng.uniform(lo, hi))
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_config(space: dict, rng: np.random.Generator) -> dict:
    return {name: sample_value(spec, rng) for name, spec in space.items()}


def configs_from_search(cfg: dict, spaces=None):
    """Translate a search-space sample into ``(ModelConfig, TrainConfig)``.

    ``shared`` selects the shared-basis decoder, otherwise free basis.
    """
    from .model import ModelConfig
    from .training import TrainConfig

    full = {**BEST_CONFIG, **cfg}
    mc = ModelConfig(
        spaces=spaces or [LatentTopology.circle()],
        decoder="shared_basis" if full["shared"] else "free_basis",
        n_basis=int(full["num_basis"]),
        kernel_size=int(full["kernel_size"]),
        n_hidden=int(full["num_hidden"]),
        nonlinearity=str(full["nonlinearity"]),
        learn_coeff=bool(full["learn_coeff"]),
        learn_mean=bool(full["learn_mean"]),
        learn_var=bool(full["learn_var"]),
        isotropic=bool(full["isotropic"]),
    )
    tc = TrainConfig(
        learning_rate=float(full["learning_rate"]),
        chunk_length=int(full["batch_length"]),
        batch_size=int(full["batch_size"]),
        num_worse=int(full["num_worse"]),
        weight_kl=float(full["weight_kl"]),
        weight_time=float(full["weight_time"]),
        weight_entropy=float(full["weight_entropy"]),
    )
    return mc, tc


@dataclass
class SearchResult:
    rows: list[dict]
    correlations: list[dict] = field(default_factory=list)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "hypersearch.csv", self.rows)
        write_rows(out / "spearman.csv", self.correlations)


def write_rows(path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _numeric(values: list) -> np.ndarray | None:
    """Values as numbers for rank correlation; strings are ranked by sorted category."""
    if all(isinstance(v, (bool, np.bool_)) for v in values):
        return np.array(values, dtype=float)
    if all(isinstance(v, (int, float, np.integer, np.floating)) for v in values):
        return np.array(values, dtype=float)
    if all(isinstance(v, str) for v in values):
        cats = sorted(set(values))
        return np.array([cats.index(v) for v in values], dtype=float)
    return None


def factor_correlations(configs: list[dict], scores) -> list[dict]:
    """Spearman correlation of every varied factor with ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    ok = np.isfinite(scores)
    configs = [c for c, keep in zip(configs, ok) if keep]
    scores = scores[ok]
    out = []
    if len(scores) < 3:
        return out
    for name in configs[0]:
        x = _numeric([c[name] for c in configs])
        if x is None or np.ptp(x) == 0 or np.ptp(scores) == 0:
            continue
        rho, p = spearman(x, scores)
        out.append({"factor": name, "rho": rho, "p": p})
    return out


def hypersearch(
    evaluate: Callable[[dict, int], float],
    space: dict | None = None,
    n_samples: int = 50,
    n_seeds: int = 3,
    seed: int = 0,
    budget: float | None = None,
    threads: int = 1,
) -> SearchResult:
    """Random search: sample configs, score each for ``n_seeds`` seeds, correlate factors.

    ``evaluate(config, seed)`` returns a test log-likelihood (higher is better).
    ``budget`` (seconds) stops drawing new configurations once exceeded, which
    makes the number of rows machine dependent.
    """
    space = SEARCH_SPACE if space is None else space
    validate_space(space)
    if n_samples < 1 or n_seeds < 1:
        raise ConfigError("n_samples and n_seeds must be >= 1")
    rng = np.random.default_rng(seed)
    configs = [sample_config(space, rng) for _ in range(n_samples)]
    t0 = time.perf_counter()
    jobs = [(i, c, s) for i, c in enumerate(configs) for s in range(n_seeds)]
    rows: list[dict] = []
    if threads > 1 and budget is None:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(_evaluate_job, [(evaluate, c, s) for _, c, s in jobs]))
    else:
        scores = []
        for i, c, s in jobs:
            if budget is not None and time.perf_counter() - t0 > budget and s == 0:
                log.info("hypersearch budget exhausted after %d configurations", i)
                break
            scores.append(_evaluate_job((evaluate, c, s)))
    for (i, c, s), score in zip(jobs, scores):
        rows.append({"config": i, "seed": s, **c, "test_llh": score})
    done = sorted({r["config"] for r in rows})
    means = []
    for i in done:
        vals = np.array([r["test_llh"] for r in rows if r["config"] == i])
        vals = vals[np.isfinite(vals)]
        means.append(float(vals.mean()) if vals.size else float("nan"))
    corr = factor_correlations([configs[i] for i in done], means) if len(done) > 2 else []
    return SearchResult(rows, corr)


def _evaluate_job(args) -> float:
    evaluate, cfg, s = args
    try:
        return float(evaluate(cfg, s))
    except Exception as exc:  # a failing configuration scores as missing
        log.warning("configuration failed: %s", exc)
        return float("nan")


# -- SVG figures -------------------------------------------------------------------------


def save_svg(path, kind: str, *args, title: str = "", **kwargs) -> None:
    """Write a simple line, scatter or image plot as SVG (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "faelvm"
    fig, ax = plt.subplots(figsize=(5, 4))
    if kind == "line":
        ax.plot(*args, **kwargs)
    elif kind == "scatter":
        ax.scatter(*args, s=4, **kwargs)
    elif kind == "image":
        im = ax.imshow(*args, origin="lower", aspect="auto", **kwargs)
        fig.colorbar(im, ax=ax)
    else:
        plt.close(fig)
        raise ConfigError(f"unknown plot kind {kind!r}")
    ax.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
