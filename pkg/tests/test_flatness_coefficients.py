import numpy as np
import pytest

from conftest import build_tree
from cube_lattice import LatticeCube, find_l_good_cube
from errors import DomainError, NotFoundError, UnsupportedSpaceError
from flatness_coefficients import (CoefficientField, GluedSpace, NormModel, alpha_coefficient, alpha_cube_adapted,
                                   alpha_monotone, alpha_transfer, bilip_alpha_bound, c_q_sanity, chart_lattice,
                                   check_support, compute_field, fit_norm, jacobian_of_seminorm, lemma_comparison,
                                   md_coefficient, metric_jacobian_field, minimax_constant, osc_coefficient,
                                   osc_from_samples, osc_grid, osc_transfer, restrict_grid, xi_coefficient)
from metric_core import MetricSpaceSample
from pipeline_config import SearchConfig, coefficient_config
from space_generators import Chart, GeneratorSpec, generate, remove_mass


def unit_cube(n=1, side=1.0, corner=None):
    corner = (0.0,) * n if corner is None else tuple(corner)
    return LatticeCube(0, (0,) * n, (0,) * n, corner, side)


# ----- minimax ---------------------------------------------------------------

def test_minimax_two_samples():
    c, value = minimax_constant([(1.0, 1.0), (3.0, 1.0)], 1)
    assert c == pytest.approx(2.0)
    assert value == pytest.approx(1.0)


def test_minimax_single_sample():
    c, value = minimax_constant([(0.6, 0.5)], 2)
    assert c == pytest.approx(0.6 / 0.25)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_minimax_against_grid(rng):
    for _ in range(10):
        m = rng.uniform(0, 1, size=30)
        t = rng.uniform(0.5, 1, size=30)
        c, value = minimax_constant(np.column_stack([m, t]), 1)
        grid = np.linspace(0, (m / t).max(), 20001)
        brute = np.max(np.abs(m[None, :] - grid[:, None] * t[None, :]), axis=1).min()
        assert value <= brute + 1e-12
        assert brute - value <= t.max() * (grid[1] - grid[0])
        assert np.max(np.abs(m - c * t)) == pytest.approx(value, abs=1e-12)


def test_minimax_rejects_bad_scales():
    with pytest.raises(DomainError):
        minimax_constant([(1.0, 0.0)], 1)
    with pytest.raises(DomainError):
        minimax_constant(np.zeros((0, 2)), 1)


# ----- norms and jacobians ----------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3])
def test_euclidean_jacobian_is_one(n):
    assert jacobian_of_seminorm(NormModel(n), n) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_linear_image_jacobian(rng, n):
    A = np.eye(n) + 0.3 * rng.normal(size=(n, n))
    model = NormModel(n, A)
    det = abs(np.linalg.det(A))
    assert jacobian_of_seminorm(model, n) == pytest.approx(det, rel=1e-3)
    assert model.jacobian() == pytest.approx(det, rel=1e-12)


def test_l1_jacobian_closed_form_and_quadrature():
    model = NormModel(2, p=1.0)
    assert model.jacobian() == pytest.approx(np.pi / 2)
    assert jacobian_of_seminorm(model, 2) == pytest.approx(np.pi / 2, rel=1e-6)


def test_jacobian_is_homogeneous():
    s = NormModel(2, p=np.inf)
    assert jacobian_of_seminorm(s.scaled(3.0), 2) == pytest.approx(9 * jacobian_of_seminorm(s, 2), rel=1e-6)


def test_degenerate_seminorm_has_zero_jacobian():
    assert jacobian_of_seminorm(lambda x: np.abs(np.asarray(x)[:, 0]), 2) == 0.0


def test_jacobian_dimension_limits():
    with pytest.raises(DomainError):
        jacobian_of_seminorm(NormModel(4), 4)
    with pytest.raises(DomainError):
        jacobian_of_seminorm(NormModel(1), 0)


def test_singular_norm_matrix():
    with pytest.raises(DomainError):
        NormModel(2, [[1.0, 2.0], [2.0, 4.0]])


def test_fit_norm_recovers_linear_map(rng):
    A = np.array([[2.0, 0.5], [0.0, 1.0]])
    U = rng.uniform(size=(30, 2))
    D = np.linalg.norm((U[:, None, :] - U[None, :, :]) @ A.T, axis=2)
    model, err = fit_norm(U, D)
    assert err <= 1e-8
    assert model.tag == "A*l2"
    assert model.jacobian() == pytest.approx(2.0, rel=1e-6)


def test_fit_norm_prefers_matching_lp(rng):
    U = rng.uniform(size=(20, 2))
    D = np.abs(U[:, None, :] - U[None, :, :]).sum(axis=2)
    model, err = fit_norm(U, D)
    assert err <= 1e-10
    assert model.p == 1.0


# ----- md -----------------------------------------------------------------------

def test_md_of_isometric_chart(segment):
    cube = LatticeCube(2, (0,), (1,), (0.25,), 0.25)
    result = md_coefficient(segment.chart, cube)
    assert result.value <= 1e-12
    assert result.samples == 8


def test_md_of_snowflake_chart_grows_at_small_scales():
    space = generate(GeneratorSpec(kind="snowflake", spacing=1e-3))
    coarse = md_coefficient(space.chart, unit_cube(side=0.25))
    fine = md_coefficient(space.chart, unit_cube(side=1 / 16))
    assert coarse.value > 0.1
    assert fine.value > coarse.value


def test_md_needs_two_samples(segment):
    with pytest.raises(DomainError):
        md_coefficient(segment.chart, unit_cube(), idx=[3])


# ----- metric jacobian field --------------------------------------------------------

def test_jacobian_field_of_identity(segment):
    field = metric_jacobian_field(segment.chart, unit_cube(), 3, weights=segment.weights)
    np.testing.assert_allclose(field.grid.values, 1.0, atol=1e-9)
    assert field.relative_error <= 1e-9


def test_jacobian_field_of_dilation():
    axis = (np.arange(8) + 0.5) / 8
    params = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    chart = Chart("dilation", 2, 2.0, lambda u: 2 * u, params, [0, 0], [1, 1])
    field = metric_jacobian_field(chart, unit_cube(2), 2)
    np.testing.assert_allclose(field.grid.values, 4.0, rtol=1e-6)
    assert field.integrated_mass == pytest.approx(4.0, rel=1e-6)


def test_jacobian_field_of_graph_matches_arc_length():
    space = generate(GeneratorSpec(kind="lipschitz_graph"))
    field = metric_jacobian_field(space.chart, unit_cube(), 6, weights=space.weights)
    cell = 1 / 64
    for k, value in enumerate(field.grid.values):
        u = k * cell + (np.arange(101) + 0.5) / 101 * cell
        speed = np.mean(np.sqrt(1 + (0.6 * np.pi * np.cos(2 * np.pi * u)) ** 2))
        assert value == pytest.approx(speed, rel=0.02)
    assert field.relative_error <= 0.02


def test_jacobian_field_rejects_collapsing_chart():
    params = ((np.arange(16) + 0.5) / 16)[:, None]
    chart = Chart("flat", 1, None, lambda u: np.zeros((len(u), 2)), params, [0], [1])
    with pytest.raises(DomainError):
        metric_jacobian_field(chart, unit_cube(), 1)


# ----- Osc ------------------------------------------------------------------------

def test_osc_on_segment_cubes(segment, segment_tree):
    field = compute_field(segment_tree, coefficient_config("osc"))
    h = 1 / 1024
    valued = [v for v in field.values if v.value is not None]
    assert valued
    for v in valued:
        assert v.value <= 10 * h / v.side
        assert v.c == pytest.approx(2.0, rel=0.05)


def test_osc_of_empty_subset_is_zero(segment):
    mask = np.zeros(segment.n_points, dtype=bool)
    assert osc_coefficient(segment, 512, 0.1, mask=mask).value == 0.0


def test_osc_below_resolution(segment):
    with pytest.raises(DomainError):
        osc_grid(segment, 512, 1 / 1024)


def test_osc_restricted_grid_bound(segment):
    grid = osc_grid(segment, 512, 0.2)
    full, _ = osc_from_samples(grid.masses, grid.scales, 1, 0.2)
    for y, t in [(512, 0.1), (540, 0.05), (480, 0.12)]:
        sub = restrict_grid(grid, segment, y, t)
        inner, _ = osc_from_samples(sub.masses, sub.scales, 1, t)
        assert inner <= (0.2 / t) * full + 1e-9


def test_osc_transfer(segment, rng):
    for _ in range(100):
        fraction = float(rng.uniform(0.01, 0.2))
        mask = remove_mass(segment, fraction, seed=int(rng.integers(1 << 30)))
        x = int(rng.integers(segment.n_points))
        r = float(rng.uniform(0.02, 0.2))
        report = osc_transfer(segment, x, r, mask)
        assert report["holds"]


# ----- alpha ------------------------------------------------------------------------

def test_alpha_on_flat_segment(fine_segment):
    h = 1 / 2048
    r = 160 * h
    result = alpha_coefficient(fine_segment, 1024, r)
    assert result.value <= 10 * h / r
    assert 0.8 < result.c < 1.25
    assert result.plane is not None
    mass = fine_segment.ball_mass(1024, r)
    assert c_q_sanity(result, mass, r, 1) in (True, None)


def test_alpha_on_cantor_set_is_large():
    space = generate(GeneratorSpec(kind="four_corner_cantor", depth=4))
    result = alpha_coefficient(space, 0, 0.25)
    assert result.value >= 0.01


def test_alpha_of_empty_subset(fine_segment):
    mask = np.zeros(fine_segment.n_points, dtype=bool)
    assert alpha_coefficient(fine_segment, 1024, 0.05, mask=mask).value == 0.0


def test_alpha_needs_coordinates():
    space = generate(GeneratorSpec(kind="snowflake", spacing=1e-3))
    with pytest.raises(UnsupportedSpaceError):
        alpha_coefficient(space, 500, 0.2)


def test_alpha_monotone_in_balls(fine_segment):
    inner, bound = alpha_monotone(fine_segment, 1024, 0.05, 1044, 0.03)
    assert inner <= bound * (1 + 1e-6) + 1e-9
    with pytest.raises(DomainError):
        alpha_monotone(fine_segment, 1024, 0.05, 1200, 0.03)


def test_alpha_transfer(fine_segment):
    u = fine_segment.coords[:, 0]
    mask = (u < 0.49) | (u > 0.51)
    report = alpha_transfer(fine_segment, 1024, 0.05, mask)
    assert report["removed"] > 0
    assert report["holds"]


def test_c_q_sanity_vacuous_cases():
    from flatness_coefficients import CoefficientResult
    assert c_q_sanity(CoefficientResult(0.5, c=1.0), 1.0, 1.0, 1) is None
    assert c_q_sanity(CoefficientResult(0.001, c=1.0), 0.01, 1.0, 1) is None
    assert c_q_sanity(CoefficientResult(0.001, c=50.0), 1.0, 1.0, 1) is False


# ----- alpha tilde and the glued space -------------------------------------------

def test_alpha_tilde_on_identity_chart(segment):
    cube = LatticeCube(2, (0,), (1,), (0.25,), 0.25)
    result = alpha_cube_adapted(segment, cube)
    assert result.value <= 0.02
    assert result.c_pi == pytest.approx(1.0, rel=0.01)
    assert result.md.value <= 1e-9
    assert result.extras["cells"] == 64


def test_alpha_tilde_of_empty_subset(segment):
    cube = LatticeCube(2, (0,), (1,), (0.25,), 0.25)
    mask = np.zeros(segment.n_points, dtype=bool)
    assert alpha_cube_adapted(segment, cube, mask=mask).value == 0.0


def test_alpha_tilde_needs_chart():
    space = generate(GeneratorSpec(kind="cloud", n=1, count=50))
    with pytest.raises(UnsupportedSpaceError):
        alpha_cube_adapted(space, unit_cube())


def test_glued_metric_is_a_metric(bilip):
    cube = LatticeCube(3, (0,), (2,), (0.25,), 0.125)
    result = alpha_cube_adapted(bilip, cube)
    glued = result.glued
    assert isinstance(glued, GluedSpace)
    assert glued.audit_triangle(n_triples=50_000) == 0
    ny = glued.Y.size
    np.testing.assert_allclose(glued.matrix[:ny, :ny], bilip.pairwise(glued.Y))
    np.testing.assert_allclose(glued.matrix, glued.matrix.T)


def test_bilip_bound_components(bilip):
    cube = LatticeCube(1, (0,), (0,), (0.0,), 0.5)
    result = alpha_cube_adapted(bilip, cube)
    bound = bilip_alpha_bound(bilip, cube, result.md.value)
    assert bound["total"] == pytest.approx(bound["md"] + bound["wavelet"] + bound["floor"])
    assert bound["wavelet"] >= 0
    assert result.value <= 50 * bound["total"]


@pytest.mark.slow
def test_alpha_tilde_comparison_constant(bilip):
    tree = build_tree(bilip)
    lattice = chart_lattice(bilip.chart)
    search = SearchConfig()
    ratios = []
    for q in tree.cubes:
        if q.side > bilip.diameter():
            continue
        try:
            good = find_l_good_cube(bilip.chart, tree, q.id, lattice)
        except NotFoundError:
            continue
        tilde = alpha_cube_adapted(bilip, good.cube, search, anchor=q.center)
        bound = bilip_alpha_bound(bilip, good.cube, tilde.md.value)
        ratios.append(tilde.value / bound["total"])
        if len(ratios) == 100:
            break
    assert len(ratios) >= 20
    assert max(ratios) <= 50


@pytest.mark.slow
def test_lemma_comparison_ball_inside_tilde(bilip):
    tree = build_tree(bilip)
    lattice = chart_lattice(bilip.chart)
    checked = 0
    finest = tree.by_level[tree.k_max]
    middle = len(finest) // 2
    for cid in finest[middle - 4:middle + 4]:
        try:
            out = lemma_comparison(bilip, tree, cid, lattice)
        except NotFoundError:
            continue
        if out["cap"] is not None and out["radius"] <= out["cap"]:
            assert out["ball_raw"] <= out["tilde_raw"] * (1 + 1e-7) + 1e-10
            checked += 1
        assert out["alpha"] is not None
    assert checked > 0


# ----- xi -------------------------------------------------------------------------

def test_xi_of_flat_ball(segment):
    h = 1 / 1024
    result = xi_coefficient(segment, 512, 0.1)
    assert result.zeta <= 1e-9
    assert result.value <= 2 * h / 0.1


def test_xi_of_circle_grows_with_radius():
    space = generate(GeneratorSpec(kind="circle"))
    small = xi_coefficient(space, 512, 0.1)
    large = xi_coefficient(space, 512, 0.4)
    assert small.zeta < 0.01
    assert large.zeta > small.zeta


def test_xi_needs_chart_or_coordinates(rng):
    pts = rng.uniform(size=(30, 2))
    D = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    space = MetricSpaceSample(np.ones(30), 2, matrix=D)
    with pytest.raises(UnsupportedSpaceError):
        xi_coefficient(space, 0, 2.0)


# ----- fields -------------------------------------------------------------------

def test_field_flags_and_outputs(tmp_path, segment_tree):
    field = compute_field(segment_tree, coefficient_config("osc"))
    assert len(field.values) == len(segment_tree)
    flags = {v.flag for v in field.flagged()}
    assert flags <= {"out_of_range", "unreliable", "boundary"}
    assert "boundary" in flags
    for v in field.values:
        assert (v.value is None) == (v.flag is not None)
    field.to_csv(tmp_path / "osc.csv")
    field.to_json(tmp_path / "osc.json")
    back = CoefficientField.model_validate_json((tmp_path / "osc.json").read_text())
    assert back.by_cube().keys() == field.by_cube().keys()
    header = (tmp_path / "osc.csv").read_text().splitlines()[0]
    assert header.startswith("cube_id,level,side,value")


def test_md_field_on_chart(fine_segment):
    tree = build_tree(fine_segment)
    field = compute_field(tree, coefficient_config("md"), cube_ids=tree.by_level[4])
    values = [v.value for v in field.values if v.value is not None]
    assert values
    assert max(values) <= 1e-9
    assert {v.flag for v in field.values if v.value is None} <= {"no_lattice_cube", "boundary"}


def test_md_field_flags_coarse_cubes(segment_tree):
    field = compute_field(segment_tree, coefficient_config("md"), cube_ids=segment_tree.by_level[2])
    assert all(v.value is None for v in field.values)
    assert "no_lattice_cube" in {v.flag for v in field.values}


def test_check_support():
    flake = generate(GeneratorSpec(kind="snowflake", spacing=1e-3))
    cantor = generate(GeneratorSpec(kind="four_corner_cantor", depth=2))
    check_support(flake, "osc")
    check_support(flake, "md")
    with pytest.raises(UnsupportedSpaceError):
        check_support(flake, "alpha")
    with pytest.raises(UnsupportedSpaceError):
        check_support(cantor, "alpha_tilde")


@pytest.mark.slow
def test_flat_segment_coefficients_are_small(fine_segment):
    h = 1 / 2048
    tree = build_tree(fine_segment)
    osc = compute_field(tree, coefficient_config("osc"))
    for v in osc.values:
        if v.value is not None and v.side >= 100 * h:
            assert v.value <= 10 * h / v.side
    assert max(v.value for v in osc.values if v.value is not None) <= 0.1

    config = coefficient_config("alpha", {"search": {"max_support": 160}})
    ids = [q.id for q in tree.cubes if q.side >= 100 * h][::3]
    alpha = compute_field(tree, config, cube_ids=ids)
    valued = [v for v in alpha.values if v.value is not None]
    assert valued
    for v in valued:
        assert v.value <= 10 * h / v.side


@pytest.mark.slow
def test_snowflake_oscillation_is_small():
    space = generate(GeneratorSpec(kind="snowflake"))
    rng = np.random.default_rng(11)
    hits = 0
    while hits < 100:
        x = int(rng.integers(space.n_points))
        r = float(rng.uniform(0.2, 0.35))
        if space.boundary_distance[x] < 2 * r:
            continue
        hits += 1
        assert osc_coefficient(space, x, r).value <= 0.05
