import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from faelvm.datagen import bump_rates, sample_gp_latent
from faelvm.errors import ConfigError, ShapeError
from faelvm.evalkit import (
    geodesic_error,
    hypersearch,
    mean_rank,
    rate_map,
    sample_config,
    save_svg,
    spatial_information,
    spearman,
    validate_space,
)
from faelvm.manifold import TWO_PI, LatentTopology, wrap

S1 = LatentTopology.circle()


# -- geodesic error ------------------------------------------------------------------


def test_ge_rotation_and_reflection(rng):
    z = rng.uniform(0, TWO_PI, (500, 1))
    assert geodesic_error(z, wrap(z + 1.234, S1)) <= TWO_PI / 720
    assert geodesic_error(z, wrap(-z + 0.5, S1)) <= TWO_PI / 720


def test_ge_gaussian_noise_matches_folded_normal():
    rng = np.random.default_rng(0)
    z = sample_gp_latent(20_000, seed=1)
    noisy = wrap(z + rng.normal(0, 0.1, z.shape), S1)
    assert geodesic_error(z, noisy) == pytest.approx(0.1 * np.sqrt(2 / np.pi), rel=0.10)


def test_ge_independent_uniform_near_half_pi():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, TWO_PI, (20_000, 1)), rng.uniform(0, TWO_PI, (20_000, 1))
    assert geodesic_error(a, b) == pytest.approx(np.pi / 2, abs=0.05)


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(0, TWO_PI), flip=st.booleans())
def test_ge_isometry_invariant(shift, flip):
    rng = np.random.default_rng(2)
    z = rng.uniform(0, TWO_PI, (200, 1))
    est = wrap(z + rng.normal(0, 0.3, z.shape), S1)
    moved = wrap((-est if flip else est) + shift, S1)
    assert geodesic_error(z, moved) == pytest.approx(geodesic_error(z, est), abs=2 * TWO_PI / 720)


def test_ge_length_mismatch():
    with pytest.raises(ShapeError):
        geodesic_error(np.zeros((5, 1)), np.zeros((4, 1)))


# -- mean rank -----------------------------------------------------------------------


def test_mean_rank_examples(rng):
    assert mean_rank([[1.0, 2.0, 3.0], [5.0, 6.0, 7.0]]).tolist() == [1.0, 2.0]
    assert mean_rank([[1.0, 1.0], [1.0, 1.0]]).tolist() == [1.5, 1.5]
    s = rng.normal(size=(3, 20))
    oracle = np.mean([[sorted(col).index(v) + 1 for v in col] for col in s.T], axis=0)
    np.testing.assert_allclose(mean_rank(s), oracle)


# -- rate maps and spatial information -----------------------------------------------


def test_flat_rate_map(rng):
    xy = rng.uniform(0, 10, (200_000, 2))
    m = rate_map(np.full(len(xy), 0.3), xy, n_bins=20)
    assert m.visited.all()
    np.testing.assert_allclose(m.rates, 0.3, rtol=1e-12)


def test_single_bin_without_smoothing():
    xy = np.tile([[0.5, 0.5]], (10, 1))
    m = rate_map(np.ones(10), xy, n_bins=5, smooth_sd=0, circular=(True, True))
    assert m.visited.sum() == 1
    assert m.rates.sum() == 1.0
    assert np.all(m.rates[~m.visited] == 0)


def test_circular_smoothing_conserves_mass(rng):
    xy = rng.uniform(0, TWO_PI, (50_000, 2))
    act = rng.poisson(1 + np.sin(xy[:, 0]) ** 2)
    raw = rate_map(act, xy, smooth_sd=0, circular=(True, True)).rates
    smooth = rate_map(act, xy, smooth_sd=2.75, circular=(True, True)).rates
    assert smooth.sum() == pytest.approx(raw.sum(), rel=0.01)


def test_rate_map_localizes_bump_center():
    z = np.stack([sample_gp_latent(20_000, seed=s)[:, 0] for s in (3, 4)], axis=1)
    center = np.array([2.0, 4.5])
    d2 = sum(((z[:, a] - center[a] + np.pi) % TWO_PI - np.pi) ** 2 for a in range(2))
    rate = 0.5 * np.exp(-d2 / 1.2**2)
    m = rate_map(np.random.default_rng(0).poisson(rate), z, circular=(True, True))
    peak = np.unravel_index(np.argmax(m.rates), m.rates.shape)
    expected = (center / TWO_PI * 50).astype(int)
    assert np.all(np.abs(np.array(peak) - expected) <= 1)
    assert spatial_information(m.rates, m.occupancy) > 0.1


def test_spatial_information_closed_forms(rng):
    occ = np.ones((4, 4))
    assert spatial_information(np.full((4, 4), 2.0), occ) == 0.0
    one = np.zeros((4, 4))
    one[1, 2] = 3.0
    assert spatial_information(one, occ) == pytest.approx(np.log2(16))
    lam = rng.uniform(0, 2, (6, 6))
    occ = rng.integers(1, 10, (6, 6)).astype(float)
    assert spatial_information(lam * 7.5, occ) == pytest.approx(spatial_information(lam, occ))
    assert spatial_information(lam, occ) >= 0


# -- spearman ------------------------------------------------------------------------


def test_spearman_examples():
    x = np.arange(10.0)
    assert spearman(x, x)[0] == pytest.approx(1.0)
    assert spearman(x, -x)[0] == pytest.approx(-1.0)
    # ranks of y: 1, 2, 3.5, 5, 3.5
    rho, p = spearman(np.array([1.0, 2, 3, 4, 5]), np.array([5.0, 6, 7, 8, 7]))
    assert rho == pytest.approx(8 / np.sqrt(95), abs=1e-12)
    t = rho * np.sqrt(3 / (1 - rho**2))
    assert p == pytest.approx(2 * stats.t.sf(t, 3), rel=1e-9)


# -- hypersearch ---------------------------------------------------------------------


def test_fixed_space_gives_identical_rows():
    res = hypersearch(lambda c, s: c["a"] * 2.0, space={"a": 3, "b": "x"}, n_samples=4, n_seeds=2)
    assert len(res.rows) == 8
    assert {r["test_llh"] for r in res.rows} == {6.0}
    assert res.correlations == []


def test_loguniform_draws():
    rng = np.random.default_rng(0)
    draws = np.array([sample_config({"lr": {"loguniform": [1e-4, 1e-1]}}, rng)["lr"] for _ in range(10_000)])
    assert draws.min() >= 1e-4 and draws.max() <= 1e-1
    u = (np.log(draws) - np.log(1e-4)) / (np.log(1e-1) - np.log(1e-4))
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_noise_factor_is_uncorrelated():
    space = {"signal": {"uniform": [0, 1]}, "noise": {"uniform": [0, 1]}}
    res = hypersearch(lambda c, s: c["signal"] * 10 + 0.01 * s, space=space, n_samples=60, n_seeds=1, seed=3)
    by = {c["factor"]: c for c in res.correlations}
    assert by["signal"]["rho"] == pytest.approx(1.0)
    assert by["noise"]["p"] > 0.05


def test_failing_configuration_scores_nan():
    def evaluate(c, s):
        if c["k"] == 2:
            raise ValueError("boom")
        return 1.0

    res = hypersearch(evaluate, space={"k": {"choice": [1, 2]}}, n_samples=10, n_seeds=1)
    assert any(np.isnan(r["test_llh"]) for r in res.rows if r["k"] == 2)


@pytest.mark.parametrize(
    "space",
    [
        {"a": {"uniform": [1, 0]}},
        {"a": {"loguniform": [0, 1]}},
        {"a": {"choice": []}},
        {"a": {"gauss": [0, 1]}},
        {"a": {"uniform": [0, 1], "choice": [1]}},
    ],
)
def test_invalid_space(space):
    with pytest.raises(ConfigError):
        validate_space(space)


def test_svg_output(tmp_path):
    save_svg(tmp_path / "a.svg", "line", [0, 1, 2], [1, 0, 1], title="t")
    save_svg(tmp_path / "b.svg", "image", np.eye(3))
    first = (tmp_path / "a.svg").read_bytes()
    save_svg(tmp_path / "a.svg", "line", [0, 1, 2], [1, 0, 1], title="t")
    assert (tmp_path / "a.svg").read_bytes() == first
    with pytest.raises(ConfigError):
        save_svg(tmp_path / "c.svg", "pie", [1])
