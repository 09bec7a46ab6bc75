"""Ensemble detection from a trained model, baseline clusterings and scoring.

Predicted labels are compared to ground truth with :func:`matched_accuracy`,
which maximizes agreement over renamings of the predicted labels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .diffengine import Tensor
from .errors import ContractError, ShapeError
from .manifold import TWO_PI
from .model import FaeLVM

MAX_PERMUTATION_K = 6


# -- reading ensembles off a model -----------------------------------------------------


def ensemble_weights(model: FaeLVM) -> np.ndarray:
    """Softmax ensemble weights (N, k); rows sum to one."""
    if model.config.n_spaces < 2:
        raise ContractError("ensemble weights need at least two latent spaces")
    return model.ensemble_weights()


def assign_hard(w) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError("weights must be a (neurons, k) matrix")
    return np.argmax(w, axis=1)


def greedy_assign(model: FaeLVM, spikes, latents=None) -> np.ndarray:
    """Per neuron, the latent space whose one-hot weight row gives the lowest Poisson NLLH.

    ``latents`` defaults to the encoder's posterior means on ``spikes``. All other
    decoder parameters stay as trained. Ties go to the lowest index.
    """
    y = np.asarray(spikes, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != model.n_neurons:
        raise ShapeError(f"expected ({model.n_neurons}, T) spikes")
    if latents is None:
        latents = model.encode(y).mean
    latents = np.asarray(latents, dtype=np.float64)
    k = model.config.n_spaces
    N = model.n_neurons
    P = model.tensors()
    cols = [Tensor(latents[:, f]) for f in range(latents.shape[1])]
    nll = np.empty((N, k))
    for j in range(k):
        onehot = np.zeros((N, k))
        onehot[:, j] = 1.0
        rates = model.decode_t(P, cols, weights=Tensor(onehot)).data
        nll[:, j] = (rates - y * np.log(rates)).sum(axis=1)
    return np.argmin(nll, axis=1)


# -- scoring ---------------------------------------------------------------------------


def _n_labels(*labels: np.ndarray) -> int:
    return int(max(int(lab.max()) if lab.size else 0 for lab in labels)) + 1


def matched_accuracy(pred, truth) -> float:
    """Best agreement over all renamings of the predicted labels (k <= 6)."""
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError("label vectors must be 1-D and of equal length")
    if pred.size == 0:
        return 1.0
    if pred.min() < 0 or truth.min() < 0:
        raise ContractError("labels must be non-negative")
    k = _n_labels(pred, truth)
    if k > MAX_PERMUTATION_K:
        raise ContractError(f"permutation matching supports k <= {MAX_PERMUTATION_K}, got {k}")
    conf = np.zeros((k, k))
    np.add.at(conf, (pred, truth), 1.0)
    best = max(conf[list(perm), range(k)].sum() for perm in itertools.permutations(range(k)))
    return float(best / pred.size)


def chance_level(truth, k: int, n_draws: int = 100_000, seed: int = 0, batch: int = 10_000) -> float:
    """Mean matched accuracy of uniformly random labelings with ``k`` labels."""
    truth = np.asarray(truth, dtype=int)
    N = truth.size
    kk = max(k, _n_labels(truth))
    if kk > MAX_PERMUTATION_K:
        raise ContractError(f"permutation matching supports k <= {MAX_PERMUTATION_K}")
    rng = np.random.default_rng(seed)
    perms = np.array(list(itertools.permutations(range(kk))))  # (P, kk)
    total = 0.0
    done = 0
    while done < n_draws:
        m = min(batch, n_draws - done)
        pred = rng.integers(0, k, size=(m, N))
        # confusion counts per draw: conf[d, a, b] = #{pred = a, truth = b}
        flat = (np.arange(m)[:, None] * kk * kk + pred * kk + truth[None, :]).ravel()
        conf = np.bincount(flat, minlength=m * kk * kk).reshape(m, kk, kk)
        agree = conf[:, perms, np.arange(kk)].sum(axis=-1)  # (m, P)
        total += agree.max(axis=1).sum() / N
        done += m
    return float(total / n_draws)


# -- PCA and k-means -------------------------------------------------------------------


@dataclass
class PCAResult:
    projection: np.ndarray
    components: np.ndarray  # (features, n) unit columns
    eigenvalues: np.ndarray
    mean: np.ndarray


def pca_decompose(X, n_components: int) -> PCAResult:
    """Top eigenvectors of the feature covariance of mean-centred ``X``.

    Eigenvalues are in descending order and each eigenvector's largest-magnitude
    entry is positive. When there are more features than samples, the sample
    Gram matrix is diagonalized instead, which yields the same nonzero spectrum.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("PCA needs a (samples, features) matrix")
    n, p = X.shape
    if not 1 <= n_components <= min(n, p):
        raise ContractError(f"n_components must be in [1, {min(n, p)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    denom = max(n - 1, 1)
    if p <= n:
        vals, vecs = np.linalg.eigh(Xc.T @ Xc / denom)
        order = np.argsort(vals)[::-1][:n_components]
        vals, vecs = vals[order], vecs[:, order]
    else:
        gvals, gvecs = np.linalg.eigh(Xc @ Xc.T / denom)
        order = np.argsort(gvals)[::-1][:n_components]
        gvals, gvecs = gvals[order], gvecs[:, order]
        vecs = Xc.T @ gvecs
        norms = np.linalg.norm(vecs, axis=0)
        # null directions of a rank-deficient matrix get an arbitrary orthonormal completion
        good = norms > 1e-12 * max(1.0, norms.max(initial=0.0))
        vecs[:, good] /= norms[good]
        if not good.all():
            vecs = _complete_basis(vecs, good)
        vals = np.where(good, gvals, 0.0)
    vals = np.maximum(vals, 0.0)
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    vecs = vecs * signs
    return PCAResult(Xc @ vecs, vecs, vals, mean)


def _complete_basis(vecs: np.ndarray, good: np.ndarray) -> np.ndarray:
    q = vecs[:, good]
    out = vecs.copy()
    basis = np.eye(vecs.shape[0])
    fill = [i for i in range(len(good)) if not good[i]]
    j = 0
    for i in fill:
        while True:
            v = basis[:, j % basis.shape[1]].copy()
            j += 1
            v -= q @ (q.T @ v)
            if np.linalg.norm(v) > 1e-8:
                break
        v /= np.linalg.norm(v)
        out[:, i] = v
        q = np.column_stack([q, v])
    return out


def pca(X, n_components: int) -> np.ndarray:
    """Projection (samples, n_components) of ``X`` onto its top principal axes."""
    return pca_decompose(X, n_components).projection


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, centers[0][None]).ravel()
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[i])
        d2 = np.minimum(d2, _sq_dists(X, X[i][None]).ravel())
    return np.array(centers)


def lloyd(X, centers, max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations from ``centers``; returns labels, centers and the inertia after each step.

    An empty cluster takes over the point farthest from its current center.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.array(centers, dtype=np.float64)
    k = C.shape[0]
    history: list[float] = []
    labels = np.full(X.shape[0], -1)
    for _ in range(max_iter):
        d = _sq_dists(X, C)
        new = np.argmin(d, axis=1)
        for j in range(k):
            if not np.any(new == j):
                own = d[np.arange(len(new)), new]
                # never strip a cluster of its last point
                counts = np.bincount(new, minlength=k)
                own = np.where(counts[new] > 1, own, -1.0)
                far = int(np.argmax(own))
                new[far] = j
        for j in range(k):
            C[j] = X[new == j].mean(axis=0)
        inertia = float(_sq_dists(X, C)[np.arange(len(new)), new].sum())
        history.append(inertia)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, C, history


def kmeans(X, k: int, n_init: int = 100, max_iter: int = 1000, seed: int = 0) -> tuple[np.ndarray, float]:
    """Best of ``n_init`` k-means++ seeded Lloyd runs by inertia.

    Samples are processed in a canonical (lexicographic) order so that the
    result does not depend on the order of the input rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("k-means needs a (samples, features) matrix")
    n = X.shape[0]
    if k < 1 or k > n:
        raise ContractError(f"k must be in [1, {n}]")
    if len(np.unique(X, axis=0)) < k:
        raise ContractError("fewer distinct points than clusters")
    order = np.lexsort(X.T[::-1]) if X.shape[1] else np.arange(n)
    Xs = X[order]
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(n_init):
        labels, _, hist = lloyd(Xs, kmeans_pp_init(Xs, k, rng), max_iter)
        if hist[-1] < best_inertia - 1e-12:
            best_labels, best_inertia = labels, hist[-1]
    out = np.empty(n, dtype=int)
    out[order] = _relabel_by_first(best_labels)
    return out, float(best_inertia)


def _relabel_by_first(labels: np.ndarray) -> np.ndarray:
    mapping: dict[int, int] = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels], dtype=int)


# -- baselines -------------------------------------------------------------------------

N_COMPONENTS = 8


def raw_pca_baseline(spikes, k: int, n_components: int = N_COMPONENTS, seed: int = 0, n_init: int = 100) -> np.ndarray:
    """k-means on the neurons' activity projected onto the top principal components."""
    y = np.asarray(spikes, dtype=np.float64)
    n = min(n_components, *y.shape)
    return kmeans(pca(y, n), k, n_init=n_init, seed=seed)[0]


def cov_pca_baseline(spikes, k: int, n_components: int = N_COMPONENTS, seed: int = 0, n_init: int = 100) -> np.ndarray:
    """k-means on principal components of the absolute neuron-by-neuron covariance."""
    y = np.asarray(spikes, dtype=np.float64)
    c = np.abs(np.cov(y))
    n = min(n_components, c.shape[0])
    return kmeans(pca(c, n), k, n_init=n_init, seed=seed)[0]


def _bin_index(x: np.ndarray, n_bins: int, circular: bool) -> np.ndarray:
    if circular:
        lo, hi = 0.0, TWO_PI
        x = np.mod(x, TWO_PI)
    else:
        lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros(x.shape, dtype=int)
    return np.clip(((x - lo) / (hi - lo) * n_bins).astype(int), 0, n_bins - 1)


def _entropy_mm(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum() + (len(p) - 1) / (2.0 * n))


def mutual_information(x, z, n_bins: int = 16, circular_z: bool = True) -> float:
    """Binned plug-in MI (nats) with the Miller-Madow bias correction on each entropy."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape or x.ndim != 1:
        raise ShapeError("MI needs two equal-length 1-D samples")
    n = x.size
    bx = _bin_index(x, n_bins, False)
    bz = _bin_index(z, n_bins, circular_z)
    hx = _entropy_mm(np.bincount(bx, minlength=n_bins), n)
    hz = _entropy_mm(np.bincount(bz, minlength=n_bins), n)
    hxz = _entropy_mm(np.bincount(bx * n_bins + bz, minlength=n_bins * n_bins), n)
    return hx + hz - hxz


def mi_features(spikes, latents, n_bins: int = 16, circular=True) -> np.ndarray:
    """Matrix (N, D) of MI between each neuron's counts and each latent dimension."""
    y = np.asarray(spikes, dtype=np.float64)
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != y.shape[1]:
        raise ShapeError(f"{z.shape[0]} latent bins vs {y.shape[1]} spike bins")
    circ = np.broadcast_to(np.asarray(circular, dtype=bool), (z.shape[1],))
    return np.array([[mutual_information(row, z[:, d], n_bins, bool(circ[d])) for d in range(z.shape[1])] for row in y])


def mi_supervised_baseline(spikes, true_latents, k: int, n_bins: int = 16, circular=True, seed: int = 0, n_init: int = 100) -> np.ndarray:
    """Supervised upper bound: k-means on per-neuron MI with each true latent dimension."""
    if true_latents is None:
        raise ContractError("the supervised baseline needs the true latents")
    feats = mi_features(spikes, true_latents, n_bins, circular)
    return kmeans(feats, k, n_init=n_init, seed=seed)[0]
