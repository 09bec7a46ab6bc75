import itertools

import numpy as np
import pytest
from scipy.stats import binom

from faelvm.datagen import SynthConfig, generate_multi_ensemble, generate_ring_ensemble
from faelvm.errors import ContractError
from faelvm.model import FaeLVM, ModelConfig
from faelvm.ensembles import (
    assign_hard,
    chance_level,
    cov_pca_baseline,
    ensemble_weights,
    greedy_assign,
    kmeans,
    lloyd,
    kmeans_pp_init,
    matched_accuracy,
    mi_supervised_baseline,
    mutual_information,
    pca,
    pca_decompose,
    raw_pca_baseline,
)


def two_space(N=6, logits=None):
    m = FaeLVM.init(ModelConfig(spaces=["S1", "S1"], nonlinearity="exp", learn_coeff=True), N, seed=0)
    if logits is not None:
        m.params["dec.logits"] = np.asarray(logits, dtype=float)
    return m


# -- weights and assignment ----------------------------------------------------------


def test_weights_uniform_and_saturated():
    np.testing.assert_allclose(ensemble_weights(two_space(3, np.zeros((3, 2)))), 0.5)
    w = ensemble_weights(two_space(2, [[30.0, 0.0], [0.0, 30.0]]))
    np.testing.assert_allclose(w, np.eye(2), atol=1e-12)
    with pytest.raises(ContractError):
        ensemble_weights(FaeLVM.init(ModelConfig(), 3))


def test_assign_hard(rng):
    assert assign_hard(np.full((1, 3), 1 / 3))[0] == 0
    assert assign_hard(np.eye(3)[[2, 0, 1]]).tolist() == [2, 0, 1]
    w = rng.dirichlet(np.ones(3), 50)
    assert assign_hard(w).tolist() == [max(range(3), key=lambda j: row[j]) for row in w]


def test_greedy_agrees_with_one_hot_weights(rng):
    hot = rng.integers(0, 2, 8)
    m = two_space(8, np.eye(2)[hot] * 30.0)
    z = rng.uniform(0, 2 * np.pi, (500, 2))
    y = rng.poisson(m.decode_rates(z)).astype(float)
    assert greedy_assign(m, y, z).tolist() == assign_hard(ensemble_weights(m)).tolist() == hot.tolist()


def test_greedy_finds_driving_latent():
    spikes, gt = generate_multi_ensemble(SynthConfig(n_neurons=20, n_bins=1000, n_ensembles=2, seed=3))
    dec, _ = gt.decoder_model()
    dec.params["dec.logits"] = np.zeros((20, 2))
    assert greedy_assign(dec, spikes, gt.latents).tolist() == gt.labels.tolist()


def test_greedy_tie_picks_first(rng):
    m = two_space(4)
    m.params["dec.1.centers"] = m.params["dec.0.centers"].copy()
    z1 = rng.uniform(0, 2 * np.pi, (50, 1))
    y = rng.poisson(0.5, (4, 50)).astype(float)
    assert greedy_assign(m, y, np.hstack([z1, z1])).tolist() == [0, 0, 0, 0]


# -- scoring -------------------------------------------------------------------------


def test_matched_accuracy_examples():
    t = np.array([0, 0, 1, 1, 2])
    assert matched_accuracy(t, t) == 1.0
    assert matched_accuracy(np.array([2, 2, 0, 0, 1]), t) == 1.0
    assert matched_accuracy([0, 1, 0, 1], [0, 0, 1, 1]) == 0.5
    with pytest.raises(ContractError):
        matched_accuracy(np.arange(7), np.arange(7))


def test_matched_accuracy_rename_invariant(rng):
    pred, truth = rng.integers(0, 3, 40), rng.integers(0, 3, 40)
    for perm in itertools.permutations(range(3)):
        assert matched_accuracy(np.array(perm)[pred], truth) == matched_accuracy(pred, truth)


def test_chance_level_against_binomial_oracle():
    # k=2: accuracy is max(B, N-B)/N with B ~ Bin(N, 1/2)
    N = 60
    b = np.arange(N + 1)
    exact = float((binom.pmf(b, N, 0.5) * np.maximum(b, N - b) / N).sum())
    truth = np.repeat([0, 1], 30)
    est = chance_level(truth, 2, 100_000, seed=0)
    assert est == pytest.approx(exact, abs=0.01)
    assert est == pytest.approx(0.551, abs=0.01)
    assert chance_level(truth, 2, 1000, seed=4) == chance_level(truth, 2, 1000, seed=4)


def test_chance_level_decreases_with_n():
    levels = [chance_level(np.repeat([0, 1], n // 2), 2, 20_000, seed=1) for n in (10, 40, 160, 640)]
    assert all(a > b for a, b in zip(levels, levels[1:]))
    assert levels[-1] == pytest.approx(0.5, abs=0.03)


# -- PCA -----------------------------------------------------------------------------


def test_pca_single_direction(rng):
    d = np.array([3.0, 4.0, 0.0]) / 5
    X = rng.normal(size=(40, 1)) * d
    res = pca_decompose(X, 3)
    np.testing.assert_allclose(np.abs(res.components[:, 0]), np.abs(d), atol=1e-12)
    assert np.all(res.eigenvalues[1:] < 1e-20)


def test_pca_full_reconstruction(rng):
    X = rng.normal(size=(12, 5))
    res = pca_decompose(X, 5)
    np.testing.assert_allclose(res.projection @ res.components.T + res.mean, X, atol=1e-9)


def test_pca_matches_svd(rng):
    X = rng.normal(size=(10, 4))
    Xc = X - X.mean(axis=0)
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    proj = pca(X, 4)
    ref = U * s
    np.testing.assert_allclose(np.abs(proj), np.abs(ref), atol=1e-9)
    # wide matrices go through the Gram route
    W = rng.normal(size=(6, 20))
    Wc = W - W.mean(axis=0)
    U, s, _ = np.linalg.svd(Wc, full_matrices=False)
    np.testing.assert_allclose(np.abs(pca(W, 4)), np.abs(U[:, :4] * s[:4]), atol=1e-9)
    with pytest.raises(ContractError):
        pca(X, 5)


# -- k-means -------------------------------------------------------------------------


def test_kmeans_blobs(rng):
    X = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(5, 0.1, (20, 2))])
    labels, _ = kmeans(X, 2, n_init=5, seed=0)
    assert matched_accuracy(labels, np.repeat([0, 1], 20)) == 1.0


def test_lloyd_inertia_monotone(rng):
    X = rng.normal(size=(200, 3))
    _, _, hist = lloyd(X, kmeans_pp_init(X, 5, rng))
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_kmeans_matches_exhaustive_partitions(rng):
    for _ in range(10):
        X = rng.normal(size=(6, 2))
        best = np.inf
        for mask in range(1, 2**5):
            lab = np.array([0] + [(mask >> i) & 1 for i in range(5)])
            if lab.min() == lab.max():
                continue
            inertia = sum(((X[lab == j] - X[lab == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
            best = min(best, inertia)
        _, got = kmeans(X, 2, n_init=100, seed=0)
        assert got == pytest.approx(best, rel=1e-12)


def test_kmeans_best_of_inits(rng):
    X = rng.normal(size=(60, 2))
    _, inertia = kmeans(X, 4, n_init=20, seed=3)
    r = np.random.default_rng(3)
    order = np.lexsort(X.T[::-1])
    for _ in range(20):
        _, _, hist = lloyd(X[order], kmeans_pp_init(X[order], 4, r))
        assert inertia <= hist[-1] + 1e-12


def test_kmeans_degenerate():
    with pytest.raises(ContractError):
        kmeans(np.ones((5, 2)), 2)


# -- baselines -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def two_rings():
    return generate_multi_ensemble(SynthConfig(n_neurons=60, n_bins=2000, n_ensembles=2, seed=5))


def test_baseline_ordering(two_rings):
    spikes, gt = two_rings
    chance = chance_level(gt.labels, 2, 20_000, seed=0)
    sup = matched_accuracy(mi_supervised_baseline(spikes, gt.latents, 2), gt.labels)
    raw = matched_accuracy(raw_pca_baseline(spikes, 2), gt.labels)
    assert sup >= raw >= chance - 0.02
    assert sup == 1.0


def test_single_ensemble_forced_split_at_least_chance():
    spikes, gt = generate_ring_ensemble(SynthConfig(n_neurons=20, n_bins=500, seed=1))
    truth = np.zeros(20, dtype=int)
    for pred in (raw_pca_baseline(spikes, 2), cov_pca_baseline(spikes, 2)):
        assert matched_accuracy(pred, truth) >= 0.5
    assert chance_level(truth, 2, 5000, seed=0) >= 0.5


@pytest.mark.parametrize("method", ["raw", "cov", "mi"])
def test_baselines_equivariant_to_neuron_order(method, two_rings, rng):
    spikes, gt = two_rings
    spikes = spikes[:, :500]
    perm = rng.permutation(60)
    run = {
        "raw": lambda y: raw_pca_baseline(y, 2, n_init=10),
        "cov": lambda y: cov_pca_baseline(y, 2, n_init=10),
        "mi": lambda y: mi_supervised_baseline(y, gt.latents[:500], 2, n_init=10),
    }[method]
    a, b = run(spikes), run(spikes[perm])
    assert matched_accuracy(b, a[perm]) == 1.0


def test_mutual_information_sanity(rng):
    z = rng.uniform(0, 2 * np.pi, 20_000)
    assert abs(mutual_information(rng.poisson(1.0, z.size).astype(float), z)) < 0.01
    x = np.floor(z * 2)
    assert mutual_information(x, z) > 1.0


def test_mi_baseline_needs_truth(two_rings):
    with pytest.raises(ContractError):
        mi_supervised_baseline(two_rings[0], None, 2)


# -- trained models on two rings (shared with the acceptance run) --------------------


def test_best_of_five_has_confident_weights(ensemble_runs):
    reps = ensemble_runs[1000]
    row_max = [max(r.fits, key=lambda f: f["train_llh"])["row_max"] for r in reps]
    assert np.mean(row_max) > 0.9


def test_best_llh_beats_median_seed(ensemble_runs):
    wins = 0
    for r in ensemble_runs[1000]:
        best = max(r.fits, key=lambda f: f["train_llh"])["accuracy"]
        wins += best >= np.median([f["accuracy"] for f in r.fits])
    assert wins >= 7


@pytest.mark.slow
@pytest.mark.parametrize("T", [500, 1000, 2000])
def test_best_of_five_not_below_raw_pca(T, ensemble_runs):
    reps = ensemble_runs[T]
    assert len(reps) == 10
    b5 = np.mean([r.accuracy["faeLVM-b5"] for r in reps])
    raw = np.mean([r.accuracy["raw_pca"] for r in reps])
    assert b5 >= raw
