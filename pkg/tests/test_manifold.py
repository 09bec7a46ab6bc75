import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faelvm.errors import DegenerateDirectionError, InvalidValueError, ShapeError
from faelvm.manifold import (
    TWO_PI,
    LatentTopology,
    align_trajectories,
    angle_from_vector,
    geodesic_distance,
    load_trajectory_csv,
    save_trajectory_csv,
    wrap,
)

S1 = LatentTopology.circle()
R1 = LatentTopology.euclidean(1)
T2 = LatentTopology.torus(2)


def test_wrap_examples():
    assert wrap([TWO_PI + 0.3], S1)[0] == pytest.approx(0.3, abs=1e-12)
    assert wrap([-0.1], S1)[0] == pytest.approx(TWO_PI - 0.1, abs=1e-12)
    assert wrap([5.2], R1)[0] == 5.2


def test_wrap_rejects_non_finite():
    with pytest.raises(InvalidValueError):
        wrap([np.nan], S1)


def test_wrap_range_and_idempotence(rng):
    x = rng.normal(0, 50, (1000, 2))
    w = wrap(x, T2)
    assert np.all((w >= 0) & (w < TWO_PI))
    np.testing.assert_array_equal(wrap(w, T2), w)


def test_wrap_tiny_negative_stays_below_period():
    w = wrap([-1e-18], S1)[0]
    assert 0 <= w < TWO_PI


def test_geodesic_examples():
    assert geodesic_distance([0.0], [np.pi], S1) == pytest.approx(np.pi)
    assert geodesic_distance([0.1], [TWO_PI - 0.1], S1) == pytest.approx(0.2)
    assert geodesic_distance([0.0, 0.0], [np.pi, np.pi], T2) == pytest.approx(np.pi * np.sqrt(2))


def test_geodesic_topology_mismatch():
    with pytest.raises(ShapeError):
        geodesic_distance([0.0, 1.0], [0.0, 1.0], S1)


def test_mixed_topology_distance():
    topo = LatentTopology.parse("S1xR1")
    assert geodesic_distance([0.1, 3.0], [TWO_PI - 0.1, 0.0], topo) == pytest.approx(np.hypot(0.2, 3.0))


def test_geodesic_metric_axioms_on_random_triples(rng):
    topo = LatentTopology.parse("T2xR1")
    a, b, c = (rng.uniform(-10, 10, (10_000, 3)) for _ in range(3))
    dab, dba = geodesic_distance(a, b, topo), geodesic_distance(b, a, topo)
    assert np.all(dab >= 0)
    np.testing.assert_allclose(dab, dba, atol=1e-12)
    assert np.all(geodesic_distance(a, wrap(a, topo), topo) < 1e-9)
    assert np.all(dab <= geodesic_distance(a, c, topo) + geodesic_distance(c, b, topo) + 1e-9)


@given(st.floats(-100, 100), st.floats(-100, 100))
def test_circle_distance_bounded(a, b):
    d = geodesic_distance([a], [b], S1)
    assert 0 <= d <= np.pi + 1e-9


def test_angle_examples():
    assert angle_from_vector([1.0, 0.0]) == 0.0
    assert angle_from_vector([0.0, 1.0]) == pytest.approx(np.pi / 2)
    assert angle_from_vector([0.0, -1.0]) == pytest.approx(1.5 * np.pi)
    with pytest.raises(DegenerateDirectionError):
        angle_from_vector([0.0, 0.0])


def test_angle_is_scale_invariant(rng):
    v = rng.normal(size=(100, 2))
    np.testing.assert_allclose(angle_from_vector(v), angle_from_vector(7.5 * v), atol=1e-12)


def test_align_rotation_and_reflection(rng):
    ref = rng.uniform(0, TWO_PI, (500, 1))
    for cand in (wrap(ref + 1.3, S1), wrap(-ref, S1), wrap(-ref + 4.0, S1)):
        aligned, transform = align_trajectories(ref, cand, S1)
        assert geodesic_distance(aligned, ref, S1).mean() <= TWO_PI / 720
        assert transform["factors"]


def test_align_euclidean_sign_and_shift(rng):
    ref = rng.normal(size=(300, 1))
    aligned, _ = align_trajectories(ref, -ref + 2.5, R1)
    np.testing.assert_allclose(aligned, ref, atol=1e-12)


def test_align_independent_uniform_gives_quarter_period(rng):
    ref = rng.uniform(0, TWO_PI, (10_000, 1))
    cand = rng.uniform(0, TWO_PI, (10_000, 1))
    aligned, _ = align_trajectories(ref, cand, S1)
    assert abs(geodesic_distance(aligned, ref, S1).mean() - np.pi / 2) < 0.05


def test_align_permutes_identical_spaces(rng):
    ref = rng.uniform(0, TWO_PI, (400, 2))
    cand = wrap(np.stack([-ref[:, 1] + 0.7, ref[:, 0] + 2.0], axis=1), T2)
    aligned, transform = align_trajectories(ref, cand, T2, spaces=[S1, S1])
    assert transform["permutation"] == [1, 0]
    assert geodesic_distance(aligned, ref, T2).mean() <= TWO_PI / 720 * np.sqrt(2)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, TWO_PI), st.sampled_from([1, -1]), st.integers(0, 2**31))
def test_align_recovers_any_isometry(offset, sign, seed):
    ref = np.random.default_rng(seed).uniform(0, TWO_PI, (200, 1))
    aligned, _ = align_trajectories(ref, wrap(sign * ref + offset, S1), S1)
    assert geodesic_distance(aligned, ref, S1).mean() <= TWO_PI / 720


def test_align_length_mismatch():
    with pytest.raises(ShapeError):
        align_trajectories(np.zeros((5, 1)), np.zeros((6, 1)), S1)


def test_topology_roundtrip_and_parse():
    for spec, dim in (("S1", 1), ("T2", 2), ("R3", 3), ("S1xR2", 3)):
        topo = LatentTopology.parse(spec)
        assert topo.total_dim == dim
        assert LatentTopology.from_dict(topo.to_dict()) == topo
        assert LatentTopology.parse(str(topo)) == topo


def test_trajectory_csv_roundtrip(tmp_path, rng):
    traj = rng.uniform(0, TWO_PI, (20, 2))
    path = tmp_path / "z.csv"
    save_trajectory_csv(path, traj)
    assert path.read_text().splitlines()[0] == "dim_0,dim_1"
    np.testing.assert_array_equal(load_trajectory_csv(path), traj)
