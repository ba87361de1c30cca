import numpy as np
import pytest

from errors import DomainError
from metric_core import (MetricSpaceSample, ahlfors_scan, read_distance_matrix, snowflake_transform,
                         write_distance_matrix)
from space_generators import GeneratorSpec, generate


def line(m=64):
    u = (np.arange(m) + 0.5) / m
    return MetricSpaceSample(np.full(m, 1 / m), 1, coords=u[:, None], name="line")


def test_rejects_nonpositive_weights():
    with pytest.raises(DomainError):
        MetricSpaceSample([1.0, -1.0], 1, coords=[[0.0], [1.0]])
    with pytest.raises(DomainError):
        MetricSpaceSample([1.0, 0.0], 1, coords=[[0.0], [1.0]])


def test_needs_exactly_one_metric_source():
    with pytest.raises(DomainError):
        MetricSpaceSample([1.0, 1.0], 1)
    with pytest.raises(DomainError):
        MetricSpaceSample([1.0, 1.0], 1, coords=[[0.0], [1.0]], matrix=[[0, 1], [1, 0]])


def test_rejects_asymmetric_matrix():
    with pytest.raises(DomainError):
        MetricSpaceSample([1.0, 1.0], 0, matrix=[[0, 1], [2, 0]])


def test_segment_ball_mass(segment):
    h = 1 / 1024
    x = 512
    for r in (0.01, 0.1, 0.3):
        assert abs(segment.ball_mass(x, r) - 2 * r) <= 2 * h


def test_ball_is_closed():
    space = MetricSpaceSample([1.0, 1.0, 1.0], 1, coords=[[0.0], [1.0], [2.0]])
    assert space.ball_mass(0, 1.0) == 2.0
    assert space.ball_mass(0, 0.999) == 1.0


def test_ball_profile_matches_ball_mass(segment):
    radii = np.array([0.0, 0.003, 0.05, 0.2])
    profile = segment.ball_profile(300, radii)
    expected = [segment.ball_mass(300, r) for r in radii]
    np.testing.assert_allclose(profile, expected, rtol=0, atol=1e-12)


def test_snowflake_distances():
    space = line()
    flake = space.snowflake(0.5)
    assert flake.coords is None
    assert not flake.has_coords
    assert flake.metric_tag == "snowflake(0.5)"
    assert flake.distance(0, 9) == pytest.approx(np.sqrt(9 / 64))
    assert flake.min_spacing() == pytest.approx(np.sqrt(1 / 64))
    members = flake.ball_indices(32, 0.25)
    d = np.abs(space.coords[members, 0] - space.coords[32, 0])
    assert np.all(d <= 0.0625 + 1e-12)


def test_snowflake_exponent_bounds():
    with pytest.raises(DomainError):
        line().snowflake(0.0)
    with pytest.raises(DomainError):
        line().snowflake(1.5)


@pytest.mark.parametrize("s", [0.25, 0.5, 1.0])
def test_snowflake_transform_keeps_points_and_mass(s):
    space = line()
    flake = snowflake_transform(space, s)
    assert flake.n_points == space.n_points
    np.testing.assert_array_equal(flake.weights, space.weights)
    assert flake.weights.sum() == space.weights.sum()
    idx = np.arange(0, space.n_points, 7)
    np.testing.assert_allclose(flake.pairwise(idx), space.pairwise(idx) ** s, rtol=1e-12, atol=0)


def test_snowflake_transform_composes():
    space = line()
    twice = snowflake_transform(snowflake_transform(space, 0.5), 0.5)
    assert twice.distance(3, 40) == pytest.approx(space.distance(3, 40) ** 0.25)
    with pytest.raises(DomainError):
        snowflake_transform(space, 0.0)


def test_metric_axioms_on_valid_matrix(rng):
    pts = rng.uniform(size=(20, 3))
    D = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    space = MetricSpaceSample(np.ones(20), 0, matrix=D)
    assert space.check_metric_axioms() == 0


def test_metric_axioms_catch_triangle_violation():
    D = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
    space = MetricSpaceSample(np.ones(3), 0, matrix=D)
    assert space.check_metric_axioms() >= 2


def test_diameter_and_spacing(segment):
    h = 1 / 1024
    assert segment.diameter() == pytest.approx(1 - h)
    assert segment.min_spacing() == pytest.approx(h)


def test_json_roundtrip_coords(tmp_path, segment):
    segment.to_json(tmp_path / "space.json")
    back = MetricSpaceSample.from_json(tmp_path / "space.json")
    np.testing.assert_array_equal(back.coords, segment.coords)
    np.testing.assert_array_equal(back.weights, segment.weights)
    assert back.dim_n == 1
    assert back.metric_tag == "ambient"


def test_json_roundtrip_matrix_and_snowflake(tmp_path, rng):
    pts = rng.uniform(size=(12, 2))
    D = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    space = MetricSpaceSample(rng.uniform(0.5, 1.0, 12), 2, matrix=D).snowflake(0.5)
    space.to_json(tmp_path / "m.json")
    assert (tmp_path / "m.dist").exists()
    back = MetricSpaceSample.from_json(tmp_path / "m.json")
    assert back.metric_tag == "snowflake(0.5)"
    np.testing.assert_allclose(back.distance_matrix(), space.distance_matrix(), rtol=0, atol=1e-15)


def test_distance_matrix_file(tmp_path, rng):
    M = rng.uniform(size=(5, 5))
    write_distance_matrix(tmp_path / "d.bin", M)
    assert (tmp_path / "d.bin").stat().st_size == 8 + 25 * 8
    np.testing.assert_array_equal(read_distance_matrix(tmp_path / "d.bin"), M)


def test_truncated_distance_matrix_file(tmp_path):
    write_distance_matrix(tmp_path / "d.bin", np.zeros((3, 3)))
    data = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "d.bin").write_bytes(data[:-8])
    with pytest.raises(DomainError):
        read_distance_matrix(tmp_path / "d.bin")


def test_ahlfors_scan_segment(segment):
    centers = np.flatnonzero(segment.boundary_distance >= 0.4)
    report = ahlfors_scan(segment, 1, centers[::20], [0.05, 0.1, 0.2])
    assert report.c_lower == pytest.approx(2.0, abs=0.05)
    assert report.c_upper == pytest.approx(2.0, abs=0.05)
    assert report.doubling_estimate == pytest.approx(2.0, abs=0.1)
    assert not report.flagged_scales
    assert not report.degenerate


def test_ahlfors_scan_flags_degenerate_scales(segment):
    report = ahlfors_scan(segment, 1, [100, 500], [1e-5, 0.1])
    assert report.degenerate
    assert report.per_scale[0].degenerate


def test_ahlfors_scan_needs_scales(segment):
    with pytest.raises(DomainError):
        ahlfors_scan(segment, 1, [0], [])
    with pytest.raises(DomainError):
        ahlfors_scan(segment, 1, [], [0.1])


@pytest.mark.slow
def test_snowflake_mass_and_regularity():
    space = generate(GeneratorSpec(kind="snowflake"))
    assert space.n_points == 10_000
    assert space.dim_n == 2
    rng = np.random.default_rng(7)
    hits = 0
    while hits < 500:
        x = int(rng.integers(space.n_points))
        r = float(rng.uniform(0.2, 0.35))
        if space.boundary_distance[x] < 2 * r:
            continue
        hits += 1
        assert abs(space.ball_mass(x, r) / (2 * r ** 2) - 1) <= 0.02
