import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from floodstgcn import autodiff as ad
from floodstgcn.exceptions import DataError, DimensionError, NumericError
from floodstgcn.graph import (
    ChebFilter,
    RoadGraph,
    RoadSegment,
    SpectralCache,
    build_graph,
    cheb_apply,
    first_adjacency,
    normalized_laplacian,
    partition_by_cluster,
    power_iteration,
    read_segments,
    second_adjacency,
    third_adjacency,
    write_segments,
)
from oracles import line_segments, random_segments, spectral_filter

seeds = st.integers(0, 2**31 - 1)


# -- adjacency constructions -------------------------------------------------------------------

def test_first_adjacency_examples():
    w = first_adjacency(line_segments([0.0, 5.0, 16.0])).weights
    assert w[0, 0] == 0.0
    assert w[0, 1] == pytest.approx(math.exp(-0.25))
    assert w[0, 1] == pytest.approx(0.7788, abs=5e-5)
    assert w[1, 2] == 0.0  # 11 km apart: exp(-1.21) = 0.298 falls under the cut


def test_first_adjacency_needs_two_finite_segments():
    with pytest.raises(DataError):
        first_adjacency(line_segments([0.0]))
    with pytest.raises(DataError):
        first_adjacency(line_segments([0.0, math.nan]))


def test_second_adjacency_examples():
    w = second_adjacency(line_segments([0.0, 1.0, 2.0], elevations=[10.0, 0.0, 12.0])).weights
    assert w[0, 0] == 0.0
    assert w[0, 1] == pytest.approx(math.exp(-1.0))  # e = 10
    assert w[1, 0] == 1.0  # e = -10
    assert w[0, 2] == 1.0  # e = -2 gets the cap


def test_second_adjacency_equal_elevation_is_one():
    w = second_adjacency(line_segments([0.0, 1.0], elevations=[3.0, 3.0])).weights
    assert w[0, 1] == w[1, 0] == 1.0


def test_second_adjacency_cap_is_configurable():
    w = second_adjacency(line_segments([0.0, 1.0], elevations=[0.0, 5.0]), w_max=0.5).weights
    assert w[0, 1] == 0.5


def test_second_adjacency_rejects_nan_elevation():
    with pytest.raises(DataError):
        second_adjacency(line_segments([0.0, 1.0], elevations=[0.0, math.nan]))


def test_third_adjacency_example():
    w = third_adjacency(line_segments([0.0, 5.0, 30.0], elevations=[10.0, 0.0, 0.0])).weights
    assert w[0, 1] == pytest.approx(0.7788 * 0.3679, abs=1e-4)
    assert w[0, 1] == pytest.approx(0.2865, abs=1e-4)
    assert w[0, 2] == 0.0 and np.all(np.diag(w) == 0)


def test_build_graph_unknown_kind():
    with pytest.raises(DataError):
        build_graph(line_segments([0.0, 1.0]), "hops")


def test_road_graph_validation():
    segs = line_segments([0.0, 1.0])
    with pytest.raises(DimensionError):
        RoadGraph(tuple(segs), np.zeros((3, 3)), "distance")
    with pytest.raises(DataError):
        RoadGraph(tuple(segs), np.array([[0.0, -1.0], [1.0, 0.0]]), "distance")
    with pytest.raises(DataError):
        RoadGraph(tuple(segs), np.eye(2), "distance")


def test_segment_invariants():
    with pytest.raises(DataError):
        RoadSegment("a", 0, 0, 0, 10.0, 1, 0.0)
    with pytest.raises(DataError):
        RoadSegment("a", 0, 0, 0, 0.0, 1, 50.0)


@given(m=st.integers(2, 20), seed=seeds)
def test_adjacency_properties(m, seed):
    segs = random_segments(np.random.default_rng(seed), m)
    first = first_adjacency(segs).weights
    second = second_adjacency(segs).weights
    third = third_adjacency(segs).weights
    assert np.array_equal(first, first.T)
    assert np.all((first == 0) | ((first > 0.3) & (first <= 1.0)))
    assert np.all(np.diag(second) == 0) and np.all((second >= 0) & (second <= 1.0))
    assert np.all(third <= first)
    elev = np.array([s.elevation_m for s in segs])
    for i in range(m):
        for j in range(m):
            if i != j and elev[i] < elev[j]:
                e = elev[i] - elev[j]
                # i lies below j: i -> j carries the cap, j -> i the Gaussian of the drop
                assert second[i, j] == 1.0
                assert second[j, i] == pytest.approx(math.exp(-e * e / 100.0), rel=1e-15)
                assert second[j, i] < 1.0 or abs(e) < 1e-7


# -- Laplacian ----------------------------------------------------------------------------------

def _graph(w):
    segs = line_segments(list(range(len(w))))
    return RoadGraph(tuple(segs), np.asarray(w, dtype=float), "distance")


def test_laplacian_two_node_example():
    cache = normalized_laplacian(_graph([[0, 1], [1, 0]]))
    np.testing.assert_allclose(cache.laplacian, [[1, -1], [-1, 1]], atol=1e-15)
    assert cache.lambda_max == pytest.approx(2.0, abs=1e-8)
    np.testing.assert_allclose(cache.scaled, [[0, -1], [-1, 0]], atol=1e-8)


def test_laplacian_all_isolated():
    cache = normalized_laplacian(_graph(np.zeros((3, 3))))
    np.testing.assert_array_equal(cache.laplacian, np.eye(3))
    assert cache.lambda_max == 2.0
    np.testing.assert_array_equal(cache.scaled, np.zeros((3, 3)))


def test_laplacian_isolated_node_passes_through():
    cache = normalized_laplacian(_graph([[0, 1, 0], [1, 0, 0], [0, 0, 0]]))
    assert cache.laplacian[2].tolist() == [0.0, 0.0, 1.0]
    assert cache.laplacian[:, 2].tolist() == [0.0, 0.0, 1.0]


@given(m=st.integers(2, 20), seed=seeds)
def test_symmetric_laplacian_spectrum(m, seed):
    cache = normalized_laplacian(first_adjacency(random_segments(np.random.default_rng(seed), m)))
    np.testing.assert_allclose(cache.laplacian, cache.laplacian.T, atol=1e-10)
    eig = np.linalg.eigvalsh(cache.laplacian)
    assert eig.min() >= -1e-9 and eig.max() <= 2 + 1e-9
    assert cache.lambda_max <= 2 + 1e-9
    if np.any(cache.laplacian != np.eye(m)):
        assert cache.lambda_max == pytest.approx(np.abs(eig).max(), rel=1e-6)
    else:  # every segment isolated
        assert cache.lambda_max == 2.0
    np.testing.assert_allclose(cache.scaled, 2 * cache.laplacian / cache.lambda_max - np.eye(m), atol=1e-14)


@pytest.mark.parametrize("kind", ["elevation", "product"])
def test_asymmetric_lambda_matches_dense_eigenvalues(kind):
    rng = np.random.default_rng(42)
    for _ in range(10):
        cache = normalized_laplacian(build_graph(random_segments(rng, 12), kind))
        eig = np.linalg.eigvals(cache.laplacian)
        assert cache.lambda_max == pytest.approx(np.abs(eig).max(), rel=1e-5)


def test_power_iteration_reports_iterations():
    # a scaled 3-cycle: three eigenvalues of equal magnitude, so no iterate settles
    cycle = np.roll(np.eye(3), 1, axis=0) @ np.diag([1.0, 0.5, 2.0])
    with pytest.raises(NumericError) as info:
        power_iteration(cycle, tol=1e-15, max_iter=7)
    assert info.value.iterations == 7


def test_power_iteration_complex_dominant_pair():
    rotation = 1.5 * np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
    assert power_iteration(rotation) == pytest.approx(1.5, rel=1e-9)


def test_spectral_cache_from_scaled_round_trip():
    cache = normalized_laplacian(first_adjacency(random_segments(np.random.default_rng(3), 8)))
    again = SpectralCache.from_scaled(cache.scaled, cache.lambda_max, cache.kind)
    np.testing.assert_allclose(again.laplacian, cache.laplacian, atol=1e-14)
    assert np.array_equal(again.scaled, cache.scaled)


# -- Chebyshev filtering --------------------------------------------------------------------------

def _cache(scaled):
    return SpectralCache.from_scaled(np.asarray(scaled, dtype=float), 2.0, "distance")


def test_cheb_identity_filter():
    x = np.array([[1.0], [-2.0]])
    np.testing.assert_array_equal(cheb_apply(_cache([[0, -1], [-1, 0]]), ChebFilter([1.0, 0.0, 0.0]), x), x)


def test_cheb_first_order_term():
    out = cheb_apply(_cache([[0, -1], [-1, 0]]), ChebFilter([0.0, 1.0, 0.0]), np.array([[1.0], [0.0]]))
    assert out.ravel().tolist() == [0.0, -1.0]


def test_cheb_extent_mismatch():
    with pytest.raises(DimensionError):
        cheb_apply(_cache(np.zeros((2, 2))), ChebFilter(np.zeros((2, 1, 1))), np.zeros((3, 1)))
    with pytest.raises(DimensionError):
        cheb_apply(_cache(np.zeros((2, 2))), ChebFilter(np.zeros((2, 2, 1))), np.zeros((2, 1)))


def test_cheb_filter_order_validation():
    assert ChebFilter([1.0, 2.0]).order == 2
    with pytest.raises(DimensionError):
        ChebFilter(np.zeros((0, 1, 1)))


@given(m=st.integers(2, 20), k=st.integers(1, 5), kind=st.sampled_from(["distance", "elevation", "product"]),
       seed=seeds)
def test_cheb_matches_spectral_oracle(m, k, kind, seed):
    rng = np.random.default_rng(seed)
    cache = normalized_laplacian(build_graph(random_segments(rng, m), kind))
    theta, x = rng.normal(size=(k, 2, 3)), rng.normal(size=(m, 2))
    got = cheb_apply(cache, ChebFilter(theta), x)
    want = spectral_filter(cache.scaled, theta, x)
    assert np.linalg.norm(got - want) <= 1e-8 * max(np.linalg.norm(want), 1e-12)


@given(m=st.integers(2, 12), seed=seeds, alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_cheb_is_linear(m, seed, alpha, beta):
    rng = np.random.default_rng(seed)
    cache = normalized_laplacian(build_graph(random_segments(rng, m), "elevation"))
    f = ChebFilter(rng.normal(size=(3, 2, 2)))
    x, y = rng.normal(size=(m, 2)), rng.normal(size=(m, 2))
    lhs = cheb_apply(cache, f, alpha * x + beta * y)
    rhs = alpha * cheb_apply(cache, f, x) + beta * cheb_apply(cache, f, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_cheb_keeps_tensor_on_tape():
    rng = np.random.default_rng(5)
    cache = normalized_laplacian(first_adjacency(random_segments(rng, 5)))
    theta = ad.Tensor(rng.normal(size=(2, 1, 1)), requires_grad=True)
    out = cheb_apply(cache, theta, ad.Tensor(rng.normal(size=(5, 1))))
    assert isinstance(out, ad.Tensor) and out.requires_grad


# -- clusters and CSV -------------------------------------------------------------------------------

def test_partition_single_label():
    segs = line_segments([0.0, 1.0, 2.0])
    assert [(lab, len(g)) for lab, g in partition_by_cluster(segs)] == [(1, 3)]


def test_partition_sizes_and_order():
    segs = line_segments([0.0, 1.0, 2.0], clusters=[2, 1, 2])
    parts = partition_by_cluster(segs)
    assert [lab for lab, _ in parts] == [1, 2]
    assert [s.id for s in parts[1][1]] == ["s0", "s2"]


@given(seed=seeds)
def test_partition_conserves_segments(seed):
    segs = random_segments(np.random.default_rng(seed), 200, clusters=5)
    parts = partition_by_cluster(segs)
    assert len(parts) == 5 and sum(len(g) for _, g in parts) == 200


def test_partition_requires_labels():
    segs = [RoadSegment("a", 0, 0, 0, 1.0, None, 50.0)]
    with pytest.raises(DataError):
        partition_by_cluster(segs)


def test_segment_csv_round_trip(tmp_path):
    segs = random_segments(np.random.default_rng(7), 6, clusters=2)
    write_segments(tmp_path / "s.csv", segs)
    assert read_segments(tmp_path / "s.csv") == segs


def test_segment_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,mid_x_km\n", encoding="utf-8")
    with pytest.raises(DataError, match="missing columns"):
        read_segments(p)
    p.write_text("id,mid_x_km,mid_y_km,elevation_m,length_m,cluster,historical_speed_kmh\n"
                 "a,1,2,3,4,1,50\na,1,2,3,4,1,50\n", encoding="utf-8")
    with pytest.raises(DataError, match="duplicate"):
        read_segments(p)
