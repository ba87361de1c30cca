import json

import numpy as np
import pytest

from carleson_audit import (carleson_constant, eps_sweep, field_values, jns_audit, packing_sum, profile_verdict,
                            resolved_band, rtilde_check, small_ball_audit, strong_carleson_sum)
from conftest import binary_tree
from cube_lattice import build_christ_david, build_net_hierarchy, default_levels
from errors import CoverageError, DomainError
from flatness_coefficients import compute_field
from pipeline_config import coefficient_config
from space_generators import GeneratorSpec, generate


def constant_field(tree, value):
    return {q.id: value for q in tree.cubes}


@pytest.mark.parametrize("depth", [3, 6])
def test_packing_of_all_bad_field(depth):
    tree = binary_tree(depth)
    field = constant_field(tree, 1.0)
    assert packing_sum(tree, field, 0.5, 0) == pytest.approx(depth + 1)
    assert strong_carleson_sum(tree, field, 0) == pytest.approx(depth + 1)


def test_packing_of_zero_field():
    tree = binary_tree(5)
    field = constant_field(tree, 0.0)
    assert packing_sum(tree, field, 0.1, 0) == 0.0
    assert strong_carleson_sum(tree, field, 0) == 0.0


def test_packing_respects_depth_cut():
    tree = binary_tree(5)
    field = constant_field(tree, 1.0)
    assert packing_sum(tree, field, 0.5, 0, k_hi=2) == pytest.approx(3)


def test_packing_counts_only_cubes_above_threshold():
    tree = binary_tree(4)
    field = constant_field(tree, 0.0)
    for cid in tree.by_level[2]:
        field[cid] = 0.3
    assert packing_sum(tree, field, 0.2, 0) == pytest.approx(1.0)
    assert packing_sum(tree, field, 0.3, 0) == 0.0


def test_holes_raise_coverage_error():
    tree = binary_tree(4)
    field = constant_field(tree, 0.0)
    field[tree.by_level[3][1]] = None
    with pytest.raises(CoverageError) as err:
        packing_sum(tree, field, 0.1, 0)
    assert err.value.holes == [tree.by_level[3][1]]


def test_carleson_constant_growing_and_flat():
    tree = binary_tree(8)
    growing = carleson_constant(tree, constant_field(tree, 1.0), 0.1, kind="ones")
    flat = carleson_constant(tree, constant_field(tree, 0.0), 0.1, kind="zeros")
    assert growing.verdict == "growing"
    assert growing.sup == pytest.approx(9)
    assert growing.band == (0, 8)
    assert flat.verdict == "flat"
    assert flat.sup == 0.0


def test_carleson_constant_skips_roots_with_holes():
    tree = binary_tree(6)
    field = constant_field(tree, 0.0)
    field[tree.by_level[6][0]] = None
    report = carleson_constant(tree, field, 0.1, min_depth=2)
    assert report.skipped_roots > 0
    assert 0 not in {r.root for r in report.rows}
    assert report.rows


def test_carleson_constant_without_roots_is_inconclusive():
    tree = binary_tree(3)
    report = carleson_constant(tree, constant_field(tree, 0.0), 0.1, min_depth=5)
    assert report.rows == []
    assert report.verdict == "inconclusive"


def test_eps_sweep_is_monotone(rng):
    tree = binary_tree(7)
    field = {q.id: float(v) for q, v in zip(tree.cubes, rng.uniform(0, 0.4, size=len(tree)))}
    reports = eps_sweep(tree, field, [0.3, 0.05, 0.1])
    assert [r.eps for r in reports] == [0.05, 0.1, 0.3]
    for lo, hi in zip(reports, reports[1:]):
        for a, b in zip(lo.rows, hi.rows):
            assert b.ratio <= a.ratio


def test_small_ball_audit():
    tree = binary_tree(6)
    out = small_ball_audit(tree, constant_field(tree, 0.0), constant_field(tree, 0.0), 0.1)
    assert out["same_verdict"]


def test_profile_verdict():
    assert profile_verdict({1: 2.0, 2: 3.0, 3: 4.0})[0] == "growing"
    assert profile_verdict({1: 1.0, 2: 1.0, 3: 1.0})[0] == "flat"
    assert profile_verdict({1: 1.0, 2: 1.0})[0] == "inconclusive"


def test_resolved_band_requires_values():
    tree = binary_tree(2)
    with pytest.raises(CoverageError):
        resolved_band(tree, constant_field(tree, None))


def test_report_outputs(tmp_path):
    tree = binary_tree(5)
    report = carleson_constant(tree, constant_field(tree, 1.0), 0.1, kind="ones")
    report.to_csv(tmp_path / "packing.csv")
    report.to_json(tmp_path / "packing.json")
    lines = (tmp_path / "packing.csv").read_text().splitlines()
    assert lines[0] == "root,depth,eps,ratio"
    assert len(lines) == len(report.rows) + 1
    doc = json.loads((tmp_path / "packing.json").read_text())
    assert doc["verdict"] == report.verdict
    assert doc["kind"] == "ones"


def test_field_values_accepts_coefficient_field(segment_tree):
    field = compute_field(segment_tree, coefficient_config("osc"))
    values = field_values(field)
    assert len(values) == len(segment_tree)
    assert any(v is None for v in values.values())


@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
def test_rtilde_random_instances(rng, eps):
    tree = binary_tree(8)
    m = tree.space.n_points
    for _ in range(100):
        F = np.ones(m, dtype=bool)
        k = int(rng.integers(0, int(eps * m) + 1))
        F[rng.choice(m, size=k, replace=False)] = False
        result = rtilde_check(tree, 0, F, eps)
        assert result.passed
        assert result.mass >= 0.5 * result.root_mass * (1 - 1e-9)
        assert F[result.members].all()


def test_rtilde_preconditions():
    tree = binary_tree(4)
    F = np.ones(tree.space.n_points, dtype=bool)
    with pytest.raises(DomainError):
        rtilde_check(tree, 0, F, 0.7)
    F[:4] = False
    with pytest.raises(DomainError):
        rtilde_check(tree, 0, F, 0.1)


def test_jns_without_bad_cubes():
    tree = binary_tree(5)
    report = jns_audit(tree, constant_field(tree, 0.0), 0.1, 0, N=2)
    assert report.eta == 1.0
    assert report.integral == 0.0
    assert report.holds


def test_jns_random_fields(rng):
    tree = binary_tree(6)
    for _ in range(20):
        field = {q.id: float(v) for q, v in zip(tree.cubes, rng.uniform(size=len(tree)))}
        report = jns_audit(tree, field, 0.8, 0, N=2)
        assert report.holds in (True, None)
        assert report.packing == pytest.approx(packing_sum(tree, field, 0.8, 0))


@pytest.mark.slow
def test_bilipschitz_curve_is_flat():
    space = generate(GeneratorSpec(kind="bilip_curve", spacing=1 / 131072))
    middle = space.n_points // 2
    k_min, _ = default_levels(space, 0.25)
    tree = build_christ_david(build_net_hierarchy(space, 0.25, k_min, 6, start=middle), 1 / 32)
    root = tree.cube_of(middle, 1).id
    config = coefficient_config("osc", {"search": {"ball_factor": 1 / 8, "scale_floor": 16}})
    field = compute_field(tree, config, cube_ids=tree.descendants(root))
    for eps in (0.1, 0.2):
        report = carleson_constant(tree, field, eps, min_depth=1, bands=5)
        assert report.band == (1, 6)
        assert sorted(report.profile) == [1, 2, 3, 4, 5]
        assert report.verdict == "flat"


@pytest.mark.slow
def test_cantor_set_packing_grows():
    space = generate(GeneratorSpec(kind="four_corner_cantor", depth=7))
    k_min, _ = default_levels(space, 0.25)
    tree = build_christ_david(build_net_hierarchy(space, 0.25, k_min, 6), 1 / 32)
    root = tree.by_level[1][0]
    config = coefficient_config("alpha", {"search": {"scale_floor": 2, "plane_steps": 0, "c_maxiter": 6,
                                                     "max_support": 40}})
    field = compute_field(tree, config, cube_ids=tree.descendants(root))
    report = carleson_constant(tree, field, 0.01, min_depth=1, bands=5)
    assert report.band == (1, 6)
    assert sorted(report.profile) == [1, 2, 3, 4, 5]
    assert report.verdict == "growing"
    assert report.slope >= 0.5


def test_packing_ratio_within_chebyshev_bound(rng):
    tree = binary_tree(6)
    field = {q.id: float(v) for q, v in zip(tree.cubes, rng.uniform(0, 0.4, size=len(tree)))}
    for eps in (0.05, 0.1, 0.3):
        report = carleson_constant(tree, field, eps, min_depth=1)
        assert report.rows
        for row in report.rows:
            assert row.ratio <= row.strong / eps ** 2 + 1e-9
