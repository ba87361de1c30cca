"""
Localized Kantorovich duals between finite measures.

Every distance here is the same linear program over node potentials:

    maximize    sum_i f_i (mu_i - nu_i)
    subject to  f_i - f_j <= d(i, j)      for all pairs
                |f_i| <= cap_i

dist_ball uses the boundary-decay caps cap_i = max(0, r - d(z_i, center)),
tilde_dist a uniform cap equal to the larger support diameter. Pairwise
constraints are either all written out (dense) or generated on demand from
a k-nearest-neighbour seed graph (cutting planes) until none is violated.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse.csgraph import shortest_path
from scipy.spatial import ConvexHull
from scipy.spatial.distance import cdist

from errors import DomainError, NumericError

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
DENSE_LIMIT = 150
ROW_CHUNK = 256
HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class AmbientMetric:
    """Normed distance between rows of a coordinate array."""

    def __init__(self, coords, norm=None):
        coords = np.asarray(coords, dtype=float)
        self.coords = coords[:, None] if coords.ndim == 1 else coords
        self.norm = norm

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    def _apply(self, diff):
        if self.norm is None:
            return np.linalg.norm(diff, axis=-1)
        return self.norm(diff)

    def pairwise(self, a_idx, b_idx=None) -> np.ndarray:
        a = self.coords[np.atleast_1d(a_idx)]
        b = a if b_idx is None else self.coords[np.atleast_1d(b_idx)]
        if self.norm is None:
            return cdist(a, b)
        diff = a[:, None, :] - b[None, :, :]
        return self._apply(diff.reshape(-1, a.shape[1])).reshape(a.shape[0], b.shape[0])

    def paired(self, a_idx, b_idx) -> np.ndarray:
        return self._apply(self.coords[a_idx] - self.coords[b_idx])

    def distances_from(self, i, idx=None) -> np.ndarray:
        idx = np.arange(self.n_points) if idx is None else idx
        return self.pairwise([i], idx)[0]

    def distances_to(self, x) -> np.ndarray:
        return self._apply(self.coords - np.asarray(x, dtype=float))


class MatrixMetric:
    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    @property
    def n_points(self) -> int:
        return self.matrix.shape[0]

    def pairwise(self, a_idx, b_idx=None) -> np.ndarray:
        a_idx = np.atleast_1d(a_idx)
        b_idx = a_idx if b_idx is None else np.atleast_1d(b_idx)
        return self.matrix[np.ix_(a_idx, b_idx)]

    def paired(self, a_idx, b_idx) -> np.ndarray:
        return self.matrix[a_idx, b_idx]

    def distances_from(self, i, idx=None) -> np.ndarray:
        row = self.matrix[int(i)]
        return row if idx is None else row[idx]


@dataclass
class TransportProblem:
    """Two measures and per-point caps on a support indexed into `metric`."""

    mu: np.ndarray
    nu: np.ndarray
    caps: np.ndarray
    metric: object
    ids: np.ndarray = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.nu = np.asarray(self.nu, dtype=float)
        self.caps = np.broadcast_to(np.asarray(self.caps, dtype=float), self.mu.shape).copy()
        self.ids = np.arange(self.mu.size) if self.ids is None else np.asarray(self.ids, dtype=int)
        if not (self.mu.shape == self.nu.shape == self.ids.shape):
            raise DomainError("mu, nu and support ids must have the same length")
        if np.any(self.mu < 0) or np.any(self.nu < 0):
            raise DomainError("measures must be nonnegative")
        if np.any(self.caps < 0) or np.any(np.isnan(self.caps)):
            raise DomainError("caps must be nonnegative")

    @property
    def size(self) -> int:
        return self.mu.size

    def costs(self, a, b) -> np.ndarray:
        return self.metric.pairwise(self.ids[a], self.ids[b])

    def edge_costs(self, i, j) -> np.ndarray:
        return self.metric.paired(self.ids[i], self.ids[j])

    def restrict(self, keep) -> "TransportProblem":
        keep = np.asarray(keep)
        return TransportProblem(self.mu[keep], self.nu[keep], self.caps[keep], self.metric, self.ids[keep])


@dataclass
class DualSolution:
    potential: np.ndarray
    value: float
    residuals: dict[str, float]
    ids: np.ndarray
    constraints: int = 0
    rounds: int = 0
    mode: str = "dense"
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "residuals": self.residuals, "constraints": self.constraints,
                "rounds": self.rounds, "mode": self.mode}


# ----- the LP -------------------------------------------------------------

def _lp(weights, caps, edges_i, edges_j, edge_d):
    n = weights.size
    m = edges_i.size
    rows = np.repeat(np.arange(2 * m), 2)
    cols = np.column_stack([edges_i, edges_j, edges_j, edges_i]).reshape(-1)
    vals = np.tile([1.0, -1.0], 2 * m)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(2 * m, n)) if m else None
    b = np.repeat(edge_d, 2) if m else None
    bounds = [(-c, c) if np.isfinite(c) else (None, None) for c in caps]
    res = linprog(-weights, A_ub=A, b_ub=b, bounds=bounds, method="highs-ds", options=HIGHS_OPTIONS)
    if res.status != 0:
        raise NumericError(f"LP solver stopped with status {res.status}: {res.message}",
                           stage="transport", cause="solver", residuals={"status": float(res.status)})
    return res.x


def _residuals(problem: TransportProblem, f: np.ndarray) -> dict[str, float]:
    lip = 0.0
    for start in range(0, problem.size, ROW_CHUNK):
        rows = np.arange(start, min(start + ROW_CHUNK, problem.size))
        D = problem.costs(rows, np.arange(problem.size))
        lip = max(lip, float(np.max(f[rows, None] - f[None, :] - D)))
    cap = float(np.max(np.abs(f) - problem.caps)) if problem.size else 0.0
    return {"lipschitz": max(lip, 0.0), "cap": max(cap, 0.0)}


def _most_violated(problem: TransportProblem, f: np.ndarray, tol: float):
    """For each row the pair with the largest Lipschitz violation above tol."""
    found_i, found_j = [], []
    for start in range(0, problem.size, ROW_CHUNK):
        rows = np.arange(start, min(start + ROW_CHUNK, problem.size))
        excess = f[rows, None] - f[None, :] - problem.costs(rows, np.arange(problem.size))
        worst = excess.argmax(axis=1)
        hit = excess[np.arange(rows.size), worst] > tol
        found_i.append(rows[hit])
        found_j.append(worst[hit])
    return np.concatenate(found_i), np.concatenate(found_j)


def _knn_edges(problem: TransportProblem, k: int):
    n = problem.size
    k = min(k, n - 1)
    ii, jj = [], []
    for start in range(0, n, ROW_CHUNK):
        rows = np.arange(start, min(start + ROW_CHUNK, n))
        D = problem.costs(rows, np.arange(n))
        D[np.arange(rows.size), rows] = np.inf
        nearest = np.argpartition(D, k - 1, axis=1)[:, :k]
        ii.append(np.repeat(rows, k))
        jj.append(nearest.reshape(-1))
    return np.concatenate(ii), np.concatenate(jj)


def _canonical(i, j):
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    keep = lo != hi
    pairs = np.unique(np.column_stack([lo[keep], hi[keep]]), axis=0)
    return pairs[:, 0], pairs[:, 1]


def solve_dual(problem: TransportProblem, mode: str = "auto", k_seed: int = 8,
               tol: float = FEASIBILITY_TOL, max_rounds: int = 200) -> DualSolution:
    """
    Maximize the dual objective over capped 1-Lipschitz potentials.

    mode "dense" writes every pairwise constraint. "sparse" starts from a
    k-nearest-neighbour graph and adds, each round, the most violated pair
    of every row until the potential is feasible for all pairs.
    """
    n = problem.size
    if n == 0:
        return DualSolution(np.zeros(0), 0.0, {"lipschitz": 0.0, "cap": 0.0}, problem.ids)
    if mode == "auto":
        mode = "dense" if n <= DENSE_LIMIT else "sparse"
    if mode not in ("dense", "sparse"):
        raise DomainError(f"unknown solver mode '{mode}'")

    weights = problem.mu - problem.nu
    if n == 1:
        cap = problem.caps[0]
        if not np.isfinite(cap) and weights[0] != 0:
            raise NumericError("unbounded dual: unequal mass with an infinite cap", stage="transport")
        f = np.array([np.sign(weights[0]) * cap if np.isfinite(cap) else 0.0])
        return DualSolution(f, float(weights @ f), {"lipschitz": 0.0, "cap": 0.0}, problem.ids, mode=mode)

    if mode == "dense":
        ei, ej = np.triu_indices(n, k=1)
    else:
        ei, ej = _canonical(*_knn_edges(problem, k_seed))
    ed = problem.edge_costs(ei, ej)

    rounds = 0
    while True:
        f = _lp(weights, problem.caps, ei, ej, ed)
        if mode == "dense":
            break
        vi, vj = _most_violated(problem, f, tol)
        if vi.size == 0:
            break
        rounds += 1
        if rounds > max_rounds:
            raise NumericError(f"cutting planes did not close after {max_rounds} rounds",
                               stage="transport", cause="cutting_planes",
                               residuals=_residuals(problem, f))
        ni, nj = _canonical(np.concatenate([ei, vi]), np.concatenate([ej, vj]))
        logger.debug("cutting planes round %d: %d violated rows, %d constraints", rounds, vi.size, ni.size)
        ei, ej = ni, nj
        ed = problem.edge_costs(ei, ej)

    # vertex solutions can overshoot the bounds by the solver tolerance
    f = np.clip(f, -problem.caps, problem.caps)
    residuals = _residuals(problem, f)
    scale = 1.0 + float(np.max(np.abs(ed))) if ed.size else 1.0
    if residuals["lipschitz"] > tol * scale or residuals["cap"] > tol * scale:
        raise NumericError("dual potential violates its constraints", stage="transport",
                           cause="residual", residuals=residuals)
    return DualSolution(f, float(weights @ f), residuals, problem.ids,
                        constraints=int(ei.size), rounds=rounds, mode=mode)


# ----- distances -----------------------------------------------------------

def center_distances(metric, center) -> np.ndarray:
    if np.ndim(center) == 0:
        return np.asarray(metric.distances_from(int(center)), dtype=float)
    return np.asarray(metric.distances_to(center), dtype=float)


def dist_ball(mu, nu, center, r: float, metric, mode: str = "auto", **solver) -> DualSolution:
    """
    sup of sum f (mu - nu) over 1-Lipschitz f with |f(z)| <= max(0, r - d(z, center)).

    Points with cap 0 carry f = 0 and are dropped: the Lipschitz bound to
    them is implied by the cap of every remaining point.
    """
    if r < 0:
        raise DomainError(f"radius must be nonnegative, got {r}")
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    caps = np.maximum(0.0, r - center_distances(metric, center))
    keep = np.flatnonzero((caps > 0) & ((mu > 0) | (nu > 0)))
    problem = TransportProblem(mu[keep], nu[keep], caps[keep], metric, keep)
    return solve_dual(problem, mode=mode, **solver)


def support_diameter(metric, idx) -> float:
    idx = np.asarray(idx, dtype=int)
    if idx.size < 2:
        return 0.0
    if isinstance(metric, AmbientMetric) and metric.norm is None and idx.size > 3000:
        pts = metric.coords[idx]
        idx = idx[ConvexHull(pts).vertices]
    return max(float(metric.pairwise(idx[s:s + ROW_CHUNK], idx).max())
               for s in range(0, idx.size, ROW_CHUNK))


def tilde_dist(mu, nu, metric, mode: str = "auto", **solver) -> DualSolution:
    """Dual with uniform cap D, the larger of the two support diameters."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    supp_mu, supp_nu = np.flatnonzero(mu > 0), np.flatnonzero(nu > 0)
    D = max(support_diameter(metric, supp_mu), support_diameter(metric, supp_nu))
    keep = np.union1d(supp_mu, supp_nu)
    problem = TransportProblem(mu[keep], nu[keep], np.full(keep.size, D), metric, keep)
    out = solve_dual(problem, mode=mode, **solver)
    out.extras["cap"] = D
    return out


def w1_bruteforce_oracle(mu, nu, metric) -> float:
    """Primal minimum-cost transport between equal-mass measures."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if not np.isclose(mu.sum(), nu.sum(), rtol=1e-12, atol=1e-12):
        raise DomainError(f"unequal total masses {mu.sum():.12g} and {nu.sum():.12g}")
    a, b = np.flatnonzero(mu > 0), np.flatnonzero(nu > 0)
    if a.size == 0:
        return 0.0
    C = metric.pairwise(a, b)
    if a.size == b.size and np.allclose(mu[a], 1.0) and np.allclose(nu[b], 1.0):
        rows, cols = linear_sum_assignment(C)
        return float(C[rows, cols].sum())
    na, nb = a.size, b.size
    # plan variables pi[p, q] flattened row-major
    A_eq = sparse.vstack([
        sparse.kron(sparse.eye(na), np.ones((1, nb))),
        sparse.kron(np.ones((1, na)), sparse.eye(nb)),
    ]).tocsr()
    b_eq = np.concatenate([mu[a], nu[b]])
    res = linprog(C.reshape(-1), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs", options=HIGHS_OPTIONS)
    if res.status != 0:
        raise NumericError(f"primal transport LP failed: {res.message}", stage="transport", cause="solver")
    return float(res.fun)


# ----- problem dumps -------------------------------------------------------

def dump_problem(problem: TransportProblem, path) -> None:
    """JSON support list plus every pairwise edge, for replaying a solver case."""
    n = problem.size
    ei, ej = np.triu_indices(n, k=1)
    d = problem.edge_costs(ei, ej) if n > 1 else np.zeros(0)
    doc = {
        "support": [{"id": int(problem.ids[i]), "mass_mu": float(problem.mu[i]),
                     "mass_nu": float(problem.nu[i]),
                     "cap": float(problem.caps[i]) if np.isfinite(problem.caps[i]) else None}
                    for i in range(n)],
        "edges": [{"i": int(i), "j": int(j), "d": float(x)} for i, j, x in zip(ei, ej, d)],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_problem(path) -> TransportProblem:
    """Rebuild a problem; missing edges are filled by shortest paths."""
    doc = json.loads(Path(path).read_text())
    support = doc["support"]
    n = len(support)
    graph = np.zeros((n, n))
    for e in doc["edges"]:
        graph[e["i"], e["j"]] = graph[e["j"], e["i"]] = e["d"]
    matrix = shortest_path(sparse.csr_matrix(graph), directed=False) if n > 1 else np.zeros((n, n))
    if np.any(~np.isfinite(matrix)):
        raise DomainError(f"{path}: edge graph is disconnected")
    caps = [np.inf if s["cap"] is None else s["cap"] for s in support]
    return TransportProblem([s["mass_mu"] for s in support], [s["mass_nu"] for s in support],
                            caps, MatrixMetric(matrix))
