import numpy as np
import pytest

from errors import DomainError
from transport import (AmbientMetric, MatrixMetric, TransportProblem, dist_ball, dump_problem, load_problem,
                       solve_dual, support_diameter, tilde_dist, w1_bruteforce_oracle)


def random_pair(rng, size, d=2):
    pts = rng.uniform(size=(size, d))
    mu = rng.uniform(size=size)
    nu = rng.uniform(size=size)
    return AmbientMetric(pts), mu / mu.sum(), nu / nu.sum()


def test_dual_matches_primal_on_small_instances(rng):
    for _ in range(200):
        size = int(rng.integers(2, 9))
        metric, mu, nu = random_pair(rng, size)
        caps = 10 * support_diameter(metric, np.arange(size)) + 1.0
        sol = solve_dual(TransportProblem(mu, nu, caps, metric), mode="dense")
        assert sol.value == pytest.approx(w1_bruteforce_oracle(mu, nu, metric), abs=1e-8)


def test_assignment_oracle_for_unit_masses(rng):
    metric = AmbientMetric(rng.uniform(size=(6, 2)))
    mu = np.array([1, 1, 1, 0, 0, 0], dtype=float)
    nu = mu[::-1].copy()
    caps = 10.0
    sol = solve_dual(TransportProblem(mu, nu, caps, metric))
    assert sol.value == pytest.approx(w1_bruteforce_oracle(mu, nu, metric), abs=1e-8)


def test_dist_ball_symmetric(rng):
    metric, mu, nu = random_pair(rng, 30)
    center = np.array([0.5, 0.5])
    a = dist_ball(mu, nu, center, 0.4, metric)
    b = dist_ball(nu, mu, center, 0.4, metric)
    assert a.value == pytest.approx(b.value, abs=1e-9)


def test_dist_ball_monotone_in_radius(rng):
    metric, mu, nu = random_pair(rng, 40)
    center = np.array([0.5, 0.5])
    values = [dist_ball(mu, nu, center, r, metric).value for r in (0.1, 0.2, 0.3, 0.5, 0.8)]
    assert all(a <= b + 1e-9 for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("lam", [0.5, 3.0])
def test_dist_ball_scale_covariance(rng, lam):
    metric, mu, nu = random_pair(rng, 25)
    center = np.array([0.4, 0.6])
    base = dist_ball(mu, nu, center, 0.5, metric).value
    scaled = dist_ball(mu, nu, lam * center, lam * 0.5, AmbientMetric(lam * metric.coords)).value
    assert scaled == pytest.approx(lam * base, rel=1e-7, abs=1e-10)


def test_dist_ball_with_index_center(rng):
    metric, mu, nu = random_pair(rng, 20)
    by_index = dist_ball(mu, nu, 3, 0.5, metric).value
    by_point = dist_ball(mu, nu, metric.coords[3], 0.5, metric).value
    assert by_index == pytest.approx(by_point, abs=1e-12)


def test_dist_ball_empty_ball(rng):
    metric, mu, nu = random_pair(rng, 10)
    sol = dist_ball(mu, nu, np.array([50.0, 50.0]), 1.0, metric)
    assert sol.value == 0.0


def test_single_point():
    metric = AmbientMetric(np.zeros((1, 2)))
    sol = solve_dual(TransportProblem([2.0], [0.5], [0.3], metric))
    assert sol.value == pytest.approx(1.5 * 0.3)


def test_potential_is_feasible(rng):
    metric, mu, nu = random_pair(rng, 60)
    sol = dist_ball(mu, nu, np.array([0.5, 0.5]), 0.6, metric, mode="sparse")
    assert sol.residuals["lipschitz"] <= 1e-8
    assert sol.residuals["cap"] <= 1e-8
    assert sol.mode == "sparse"


def test_tilde_dist_cap_is_support_diameter(rng):
    metric, mu, nu = random_pair(rng, 15)
    sol = tilde_dist(mu, nu, metric)
    assert sol.extras["cap"] == pytest.approx(support_diameter(metric, np.arange(15)))
    assert sol.value == pytest.approx(w1_bruteforce_oracle(mu, nu, metric), abs=1e-8)


def test_oracle_rejects_unequal_mass():
    metric = AmbientMetric(np.eye(2))
    with pytest.raises(DomainError):
        w1_bruteforce_oracle([1.0, 0.0], [0.0, 2.0], metric)


def test_problem_validation():
    metric = AmbientMetric(np.eye(2))
    with pytest.raises(DomainError):
        TransportProblem([1.0, -1.0], [0.0, 0.0], 1.0, metric)
    with pytest.raises(DomainError):
        TransportProblem([1.0, 1.0], [0.0, 0.0], -1.0, metric)
    with pytest.raises(DomainError):
        TransportProblem([1.0], [0.0, 0.0], 1.0, metric)


def test_unknown_mode(rng):
    metric, mu, nu = random_pair(rng, 4)
    with pytest.raises(DomainError):
        solve_dual(TransportProblem(mu, nu, 1.0, metric), mode="simplex")


def test_dump_and_load_problem(tmp_path, rng):
    metric, mu, nu = random_pair(rng, 7)
    problem = TransportProblem(mu, nu, 0.3, metric)
    dump_problem(problem, tmp_path / "p.json")
    back = load_problem(tmp_path / "p.json")
    assert isinstance(back.metric, MatrixMetric)
    assert solve_dual(back).value == pytest.approx(solve_dual(problem).value, abs=1e-10)


def test_load_problem_fills_missing_edges(tmp_path):
    (tmp_path / "p.json").write_text(
        '{"support": [{"id": 0, "mass_mu": 1, "mass_nu": 0, "cap": null},'
        ' {"id": 1, "mass_mu": 0, "mass_nu": 0, "cap": null},'
        ' {"id": 2, "mass_mu": 0, "mass_nu": 1, "cap": null}],'
        ' "edges": [{"i": 0, "j": 1, "d": 1.0}, {"i": 1, "j": 2, "d": 2.0}]}')
    problem = load_problem(tmp_path / "p.json")
    assert problem.metric.matrix[0, 2] == pytest.approx(3.0)
    assert solve_dual(problem).value == pytest.approx(3.0)


def test_load_problem_disconnected(tmp_path):
    (tmp_path / "p.json").write_text(
        '{"support": [{"id": 0, "mass_mu": 1, "mass_nu": 0, "cap": 1},'
        ' {"id": 1, "mass_mu": 0, "mass_nu": 1, "cap": 1},'
        ' {"id": 2, "mass_mu": 0, "mass_nu": 0, "cap": 1}],'
        ' "edges": [{"i": 0, "j": 1, "d": 1.0}]}')
    with pytest.raises(DomainError):
        load_problem(tmp_path / "p.json")


@pytest.mark.slow
def test_dense_and_sparse_agree(rng):
    for _ in range(50):
        size = int(rng.integers(20, 201))
        metric, mu, nu = random_pair(rng, size)
        center = rng.uniform(0.2, 0.8, size=2)
        r = float(rng.uniform(0.2, 0.8))
        dense = dist_ball(mu, nu, center, r, metric, mode="dense")
        sparse = dist_ball(mu, nu, center, r, metric, mode="sparse")
        assert sparse.value == pytest.approx(dense.value, abs=1e-8)
