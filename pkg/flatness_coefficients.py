"""
Multiscale flatness coefficients on finite metric-measure samples.

Every infimum in the definitions is taken over an explicit search family,
so each value reported here is a certified upper bound for the quantity it
approximates:

1. Osc   - minimax fit of ball masses to c t^n over a net of centers and
           a geometric grid of scales.
2. alpha - localized transport distance between the sample measure and
           c times the flat measure of a candidate n-plane.
3. md    - worst pairwise gap between distances through a chart and the
           best norm in a small dictionary.
4. alpha_tilde - transport distance inside the glued space built from a
           chart, a lattice cube and its md-fitted norm.
5. xi    - two-sided isometry defect of the chart coordinates on a ball.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel
from scipy.optimize import minimize_scalar
from scipy.special import gamma, roots_legendre

from cube_lattice import CubeTree, LatticeCube, ShiftedLattice, find_l_good_cube
from errors import ConstructionError, DomainError, NotFoundError, NumericError, UnsupportedSpaceError
from haar_wavelets import GridFunction, density_raster, unit_ball_volume
from metric_core import MetricSpaceSample
from pipeline_config import CoefficientConfig, SearchConfig
from transport import AmbientMetric, DualSolution, dist_ball, tilde_dist

logger = logging.getLogger(__name__)

NORM_EXPONENTS = (2.0, 1.0, 1.5, 3.0, np.inf)


# ----- norms and their jacobians -------------------------------------------

def _p_tag(p: float) -> str:
    return "inf" if np.isinf(p) else f"{p:g}"


@dataclass
class NormModel:
    """||x|| = |A x|_p on R^n (A = identity when omitted)."""

    n: int
    A: np.ndarray | None = None
    p: float = 2.0

    def __post_init__(self):
        if not self.p >= 1:
            raise DomainError(f"l_p exponent must be >= 1, got {self.p}")
        if self.A is not None:
            self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
            if self.A.shape != (self.n, self.n):
                raise DomainError(f"norm matrix must be {self.n}x{self.n}, got {self.A.shape}")
            scale = max(1.0, float(np.abs(self.A).max()))
            if not np.all(np.isfinite(self.A)) or abs(np.linalg.det(self.A)) <= 1e-12 * scale ** self.n:
                raise DomainError("norm matrix is singular")

    @property
    def tag(self) -> str:
        base = f"l{_p_tag(self.p)}"
        return base if self.A is None else f"A*{base}"

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        y = x if self.A is None else x @ self.A.T
        return np.linalg.norm(y, ord=self.p, axis=1)

    def scaled(self, c: float) -> "NormModel":
        A = np.eye(self.n) if self.A is None else self.A
        return NormModel(self.n, c * A, self.p)

    def lipschitz_bound(self) -> float:
        """Smallest sampled L with L^-1 ||x|| <= |x| <= L ||x||."""
        vals = self(_sphere_directions(self.n))
        return float(max(vals.max(), 1.0 / vals.min()))

    def jacobian(self) -> float:
        """Closed form alpha(n) / vol{||x|| <= 1}."""
        p = self.p
        if np.isinf(p):
            unit = 2.0 ** self.n
        else:
            unit = (2 * gamma(1 + 1 / p)) ** self.n / gamma(1 + self.n / p)
        det = 1.0 if self.A is None else abs(np.linalg.det(self.A))
        return float(unit_ball_volume(self.n) * det / unit)

    def to_dict(self) -> dict:
        return {"tag": self.tag, "p": _p_tag(self.p), "A": None if self.A is None else self.A.tolist()}


def _sphere_directions(n: int, count: int = 720) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        t = np.linspace(0, 2 * np.pi, count, endpoint=False)
        return np.column_stack([np.cos(t), np.sin(t)])
    v = np.random.default_rng(0).normal(size=(count * 4, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere_integral(s, n: int, order: int):
    """Quadrature of s^-n over S^{n-1}; None when s vanishes somewhere."""
    if n == 1:
        pts, w = np.array([[1.0], [-1.0]]), np.ones(2)
    elif n == 2:
        t = 2 * np.pi * np.arange(order) / order
        pts, w = np.column_stack([np.cos(t), np.sin(t)]), np.full(order, 2 * np.pi / order)
    else:
        z, wz = roots_legendre(order)
        m = 2 * order
        theta = 2 * np.pi * np.arange(m) / m
        rad = np.sqrt(1 - z ** 2)
        pts = np.column_stack([
            np.outer(rad, np.cos(theta)).ravel(),
            np.outer(rad, np.sin(theta)).ravel(),
            np.repeat(z, m),
        ])
        w = np.repeat(wz, m) * (2 * np.pi / m)
    vals = np.asarray(s(pts), dtype=float)
    if np.any(vals <= 1e-12 * max(float(vals.max()), 0.0)) or not np.all(np.isfinite(vals)):
        return None
    return float(np.sum(w * vals ** (-n)))


def jacobian_of_seminorm(s, n: int, order: int = 32, rtol: float = 1e-8, max_order: int | None = None) -> float:
    """
    alpha(n) n / integral over S^{n-1} of s^-n, by spherical quadrature.

    The order doubles until two successive values agree to `rtol`. A
    seminorm vanishing on the sphere has jacobian 0.
    """
    if n < 1:
        raise DomainError(f"dimension must be positive, got {n}")
    if n > 3:
        raise DomainError(f"spherical quadrature is implemented for n <= 3, got {n}")
    const = unit_ball_volume(n) * n
    if n == 1:
        total = _sphere_integral(s, 1, 2)
        return 0.0 if total is None else const / total
    max_order = max_order or (1 << 17 if n == 2 else 1024)
    prev = _sphere_integral(s, n, order)
    if prev is None:
        return 0.0
    cur = prev
    while order < max_order:
        order *= 2
        cur = _sphere_integral(s, n, order)
        if cur is None:
            return 0.0
        if abs(cur - prev) <= rtol * abs(cur):
            return const / cur
        prev = cur
    raise NumericError(f"jacobian quadrature did not converge by order {max_order}",
                       stage="coefficients", cause="quadrature",
                       residuals={"relative_change": abs(cur - prev) / abs(cur)})


# ----- minimax constant ------------------------------------------------------

def _minimax(m: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Exact argmin over c >= 0 of max |m_i - c b_i| (b_i > 0); ties to the smaller c."""

    def g(c):
        return float(np.max(m - c * b))

    def h(c):
        return float(np.max(c * b - m))

    if g(0.0) <= h(0.0):
        return 0.0, max(g(0.0), h(0.0))
    lo, hi = 0.0, float(np.max(m / b))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid) > h(mid):
            lo = mid
        else:
            hi = mid
    c = 0.5 * (lo + hi)
    tol = 1e-12 * (1.0 + float(np.abs(m).max()))
    up, down = m - c * b, c * b - m
    I = np.flatnonzero(up >= up.max() - tol)[:32]
    J = np.flatnonzero(down >= down.max() - tol)[:32]
    # the optimum sits where the upper envelope of one line meets the other
    candidates = [lo, hi] + [(m[i] + m[j]) / (b[i] + b[j]) for i in I for j in J]
    scored = sorted((max(g(x), h(x)), x) for x in candidates if x >= 0)
    best_val = scored[0][0]
    best_c = min(x for v, x in scored if v <= best_val + tol)
    return float(best_c), float(max(g(best_c), h(best_c)))


def minimax_constant(samples, n: float) -> tuple[float, float]:
    """(c*, max_i |m_i - c* t_i^n|) for samples of (mass, scale) pairs."""
    samples = np.asarray(samples, dtype=float).reshape(-1, 2)
    if samples.shape[0] == 0:
        raise DomainError("minimax_constant needs at least one sample")
    m, t = samples[:, 0], samples[:, 1]
    if np.any(t <= 0):
        raise DomainError("scales must be positive")
    return _minimax(m, t ** n)


# ----- coefficient results ---------------------------------------------------

@dataclass
class CoefficientResult:
    value: float
    c: float | None = None
    norm: str | None = None
    plane: str | None = None
    residual: float | None = None
    extras: dict = field(default_factory=dict)


# ----- Osc -------------------------------------------------------------------

@dataclass
class OscGrid:
    centers: np.ndarray
    scales: np.ndarray
    masses: np.ndarray
    r: float
    n: int


def osc_centers(space: MetricSpaceSample, x: int, r: float, count: int) -> np.ndarray:
    """x followed by farthest-point picks inside B(x, r)."""
    members = space.ball_indices(x, r)
    chosen = [int(x)]
    d = space.distances_from(x, members)
    while len(chosen) < min(count, members.size):
        far = int(np.argmax(d))
        if d[far] <= 0:
            break
        chosen.append(int(members[far]))
        d = np.minimum(d, space.distances_from(members[far], members))
    return np.asarray(chosen, dtype=int)


def osc_scales(space: MetricSpaceSample, r: float, search: SearchConfig) -> np.ndarray:
    lo = max(r * search.min_scale_ratio, 2 * space.min_spacing())
    if lo >= r:
        return np.array([r])
    return np.geomspace(lo, r, search.n_scales)


def osc_grid(space: MetricSpaceSample, x: int, r: float, search: SearchConfig | None = None,
             mask=None) -> OscGrid:
    search = search or SearchConfig()
    if r <= 0 or r < 2 * space.min_spacing():
        raise DomainError(f"radius {r:.4g} is below the resolvable scale {2 * space.min_spacing():.4g}")
    centers = osc_centers(space, x, r, search.n_centers)
    scales = osc_scales(space, r, search)
    masses = np.array([space.ball_profile(y, scales, mask=mask) for y in centers])
    return OscGrid(centers, scales, masses, r, space.dim_n)


def osc_from_samples(masses, scales, n: int, r: float) -> tuple[float, float]:
    """(Osc value, chosen c) from a centers x scales mass table."""
    masses = np.asarray(masses, dtype=float)
    t = np.broadcast_to(np.asarray(scales, dtype=float), masses.shape).ravel()
    m = masses.ravel()
    if m.size == 0:
        raise DomainError("empty sample grid")
    c, value = _minimax(m, t ** n)
    return value / r ** n, c


def restrict_grid(grid: OscGrid, space: MetricSpaceSample, y: int, t: float) -> OscGrid:
    """Pairs of `grid` with center in B(y, t) and scale <= t."""
    d = space.distances_from(y, grid.centers)
    rows = d <= t
    cols = grid.scales <= t * (1 + 1e-12)
    if not rows.any() or not cols.any():
        raise DomainError(f"no grid pair lies inside B({y}, {t:.4g})")
    return OscGrid(grid.centers[rows], grid.scales[cols], grid.masses[np.ix_(rows, cols)], t, grid.n)


def osc_coefficient(space: MetricSpaceSample, x: int, r: float, search: SearchConfig | None = None,
                    mask=None) -> CoefficientResult:
    grid = osc_grid(space, x, r, search, mask)
    value, c = osc_from_samples(grid.masses, grid.scales, grid.n, r)
    return CoefficientResult(value, c=c, extras={"pairs": int(grid.masses.size)})


def osc_transfer(space: MetricSpaceSample, x: int, r: float, mask, search: SearchConfig | None = None) -> dict:
    """Osc(x,r) against mass(B(x,2r) minus E)/r^n + Osc_E(x,r) on one shared grid."""
    mask = np.asarray(mask, dtype=bool)
    full = osc_grid(space, x, r, search)
    sub = osc_grid(space, x, r, search, mask=mask)
    osc_x, _ = osc_from_samples(full.masses, full.scales, full.n, r)
    osc_e, _ = osc_from_samples(sub.masses, sub.scales, sub.n, r)
    removed = space.ball_mass(x, 2 * r, mask=~mask) / r ** space.dim_n
    bound = removed + osc_e
    return {"osc": osc_x, "osc_E": osc_e, "removed": removed, "bound": bound,
            "holds": bool(osc_x <= bound + 1e-12)}


# ----- alpha -----------------------------------------------------------------

@dataclass
class Plane:
    anchor: np.ndarray
    basis: np.ndarray
    label: str = "pca"


def pca_plane(coords: np.ndarray, weights: np.ndarray, n: int) -> Plane:
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        w = np.ones_like(w)
    mean = (coords * w[:, None]).sum(axis=0) / w.sum()
    centered = coords - mean
    cov = (centered * w[:, None]).T @ centered / w.sum()
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return Plane(mean, vecs[:, order[:n]], "pca")


def plane_family(base: Plane, step: float, steps: int) -> list[Plane]:
    """The base plane and its rotations by +-k*step toward each normal direction."""
    d, n = base.basis.shape
    if d == n or steps == 0:
        return [base]
    full, _ = np.linalg.qr(np.column_stack([base.basis, np.eye(d)]))
    normals = full[:, n:d]
    out = [base]
    for a, b in itertools.product(range(n), range(d - n)):
        for k in [j for s in range(1, steps + 1) for j in (-s, s)]:
            theta = k * step
            basis = base.basis.copy()
            basis[:, a] = np.cos(theta) * base.basis[:, a] + np.sin(theta) * normals[:, b]
            out.append(Plane(base.anchor, basis, f"rot{a}.{b}:{k:+d}"))
    return out


def _ambient_norm(space: MetricSpaceSample):
    if space.ambient_norm == "linf":
        return lambda diff: np.abs(diff).max(axis=-1)
    return None


def plane_jacobian(basis: np.ndarray, ambient_norm: str) -> float:
    """Jacobian of the norm the ambient space induces on the plane."""
    if ambient_norm == "l2":
        return 1.0
    n = basis.shape[1]
    return jacobian_of_seminorm(lambda u: np.abs(np.asarray(u) @ basis.T).max(axis=1), n, rtol=1e-6)


@dataclass
class AlphaSupport:
    """Sample representatives followed by plane grid points, in one ambient metric."""

    metric: AmbientMetric
    mu: np.ndarray
    nu_unit: np.ndarray
    plane: Plane
    spacing: float
    samples: int


def _quantize(space: MetricSpaceSample, members: np.ndarray, weights: np.ndarray, center, r: float,
              max_support: int):
    """Voxel representatives (smallest member index per voxel) and their masses."""
    coords = space.coords[members]
    if members.size <= max_support:
        return coords, weights
    eta = 2 * r / max_support ** (1.0 / max(space.dim_n, 1))
    keys = np.floor((coords - center) / eta).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    masses = np.bincount(inverse.ravel(), weights=weights, minlength=first.size)
    return coords[first], masses


def alpha_support(space: MetricSpaceSample, x: int, r: float, plane: Plane, search: SearchConfig,
                  mask=None, members=None) -> AlphaSupport:
    n = space.dim_n
    center = space.coords[x]
    members = space.ball_indices(x, r) if members is None else members
    w = space.weights[members].copy()
    if mask is not None:
        w *= np.asarray(mask, dtype=bool)[members]
    reps, mu = _quantize(space, members, w, center, r, search.max_support)

    eta = max(space.min_spacing(), 2 * r / search.max_support ** (1.0 / n))
    u_x = plane.basis.T @ (center - plane.anchor)
    axes = [np.arange(np.floor((u - r) / eta), np.ceil((u + r) / eta) + 1) * eta for u in u_x]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    pts = plane.anchor + mesh @ plane.basis.T
    norm = _ambient_norm(space)
    dist = np.linalg.norm(pts - center, axis=1) if norm is None else norm(pts - center)
    pts = pts[dist < r]
    unit = plane_jacobian(plane.basis, space.ambient_norm) * eta ** n

    metric = AmbientMetric(np.vstack([reps, pts]), norm=norm)
    k = reps.shape[0]
    mu_all = np.concatenate([mu, np.zeros(pts.shape[0])])
    nu_all = np.concatenate([np.zeros(k), np.full(pts.shape[0], unit)])
    return AlphaSupport(metric, mu_all, nu_all, plane, eta, k)


def alpha_value(support: AlphaSupport, c: float, center, radius: float, mode: str = "auto") -> DualSolution:
    """dist_B(mu, c * plane measure) on the support, ball B(center, radius)."""
    return dist_ball(support.mu, c * support.nu_unit, np.asarray(center, dtype=float), radius,
                     support.metric, mode=mode)


@dataclass
class AlphaResult(CoefficientResult):
    support: AlphaSupport | None = None
    raw: float = 0.0


def alpha_coefficient(space: MetricSpaceSample, x: int, r: float, search: SearchConfig | None = None,
                      mask=None, extra=None) -> AlphaResult:
    """
    alpha(x, r) over the plane family and a bracket of constants.

    Planes are the weighted PCA plane of the ball and its rotations; c is
    first set to the density estimate mass(ball)/plane mass(ball), the best
    plane is kept, then c is refined by a bounded scalar search. `extra`
    adds (plane, c) candidates evaluated as they are.
    """
    search = search or SearchConfig()
    if not space.has_coords:
        raise UnsupportedSpaceError(f"alpha needs ambient coordinates; {space.name} is {space.metric_tag}")
    n = space.dim_n
    center = space.coords[x]
    members = space.ball_indices(x, r)
    w = space.weights[members] * (1.0 if mask is None else np.asarray(mask, dtype=bool)[members])
    if w.sum() <= 0:
        return AlphaResult(0.0, c=0.0, norm="ambient", plane=None, residual=0.0)

    base = pca_plane(space.coords[members], w, n)
    scored = []
    for plane in plane_family(base, search.plane_step, search.plane_steps):
        support = alpha_support(space, x, r, plane, search, mask=mask, members=members)
        plane_mass = support.nu_unit.sum()
        if plane_mass <= 0:
            continue
        c_hat = support.mu.sum() / plane_mass
        sol = alpha_value(support, c_hat, center, r, search.solver_mode)
        scored.append((sol.value, plane.label, c_hat, support, sol))
    for plane, c in extra or ():
        support = alpha_support(space, x, r, plane, search, mask=mask, members=members)
        sol = alpha_value(support, c, center, r, search.solver_mode)
        scored.append((sol.value, plane.label, c, support, sol))
    if not scored:
        raise NumericError(f"no candidate plane meets B({x}, {r:.4g})", stage="coefficients", cause="planes")
    value, label, c_hat, support, sol = min(scored, key=lambda s: s[0])

    cache = {c_hat: sol}

    def objective(c):
        if c not in cache:
            cache[c] = alpha_value(support, c, center, r, search.solver_mode)
        return cache[c].value

    lo, hi = search.c_bracket
    if c_hat > 0:
        minimize_scalar(objective, bounds=(lo * c_hat, hi * c_hat), method="bounded",
                        options={"xatol": 1e-3 * c_hat, "maxiter": search.c_maxiter})
    c_best = min(cache, key=lambda k: (cache[k].value, k))
    best = cache[c_best]
    residual = max(best.residuals.values()) if best.residuals else 0.0
    return AlphaResult(best.value / r ** (n + 1), c=float(c_best), norm="ambient", plane=label,
                       residual=residual, support=support, raw=best.value,
                       extras={"evaluations": len(cache) + len(scored)})


def alpha_monotone(space: MetricSpaceSample, x: int, r: float, y: int, t: float,
                   search: SearchConfig | None = None, mask=None) -> tuple[float, float]:
    """(alpha(y,t), (r/t)^{n+1} alpha(x,r)) on the support and constant chosen for (x,r)."""
    if space.distance(x, y) + t > r * (1 + 1e-12):
        raise DomainError("B(y,t) must lie inside B(x,r)")
    search = search or SearchConfig()
    n = space.dim_n
    outer = alpha_coefficient(space, x, r, search, mask)
    if outer.support is None:
        return 0.0, 0.0
    inner = alpha_value(outer.support, outer.c, space.coords[y], t, search.solver_mode)
    return inner.value / t ** (n + 1), (r / t) ** (n + 1) * outer.value


def alpha_transfer(space: MetricSpaceSample, x: int, r: float, mask, search: SearchConfig | None = None) -> dict:
    """alpha_X(x,r) against mass(B(x,r) minus E)/r^n + alpha_E(x,r)."""
    search = search or SearchConfig()
    mask = np.asarray(mask, dtype=bool)
    sub = alpha_coefficient(space, x, r, search, mask=mask)
    extra = [(sub.support.plane, sub.c)] if sub.support is not None else []
    full = alpha_coefficient(space, x, r, search, extra=extra)
    removed = space.ball_mass(x, r, mask=~mask) / r ** space.dim_n
    bound = removed + sub.value
    return {"alpha": full.value, "alpha_E": sub.value, "removed": removed, "bound": bound,
            "holds": bool(full.value <= bound + 1e-6 * (1 + bound))}


def c_q_sanity(result: CoefficientResult, mass: float, side: float, n: int,
               alpha_max: float = 0.01, density_min: float = 0.1) -> bool | None:
    """0.1 <= c_Q <= 10 when alpha is small and the ball carries mass; None when vacuous."""
    if result.c is None or result.value > alpha_max or mass < density_min * side ** n:
        return None
    return bool(0.1 <= result.c <= 10)


# ----- md --------------------------------------------------------------------

def _pairs(U: np.ndarray, D: np.ndarray):
    i, j = np.triu_indices(U.shape[0], k=1)
    return U[i] - U[j], D[i, j]


def _scalar_fit(delta, dvals, p):
    base = np.linalg.norm(delta, ord=p, axis=1)
    keep = base > 0
    c, err = _minimax(dvals[keep], base[keep])
    return c, err


def _matrix_fit(delta, dvals, n):
    # d^2 ~ delta^T M delta with M symmetric, then A = sqrt(M)
    cols, idx = [], []
    for a in range(n):
        for b in range(a, n):
            cols.append(delta[:, a] * delta[:, b] * (1.0 if a == b else 2.0))
            idx.append((a, b))
    coef, *_ = np.linalg.lstsq(np.column_stack(cols), dvals ** 2, rcond=None)
    M = np.zeros((n, n))
    for (a, b), v in zip(idx, coef):
        M[a, b] = M[b, a] = v
    vals, vecs = np.linalg.eigh(M)
    vals = np.clip(vals, 1e-12 * max(vals.max(), 1e-300), None)
    return vecs @ np.diag(np.sqrt(vals)) @ vecs.T


def _refine(A, delta, dvals, sweeps: int = 60):
    """Coordinate descent on the entries of A for the worst-pair error."""
    n = A.shape[0]

    def err(B):
        return float(np.max(np.abs(dvals - np.linalg.norm(delta @ B.T, axis=1))))

    best = err(A)
    step = 0.1 * float(np.abs(A).max())
    floor = 1e-9 * float(np.abs(A).max())
    for _ in range(sweeps):
        improved = False
        for a, b in itertools.product(range(n), range(n)):
            for sign in (1.0, -1.0):
                B = A.copy()
                B[a, b] += sign * step
                if abs(np.linalg.det(B)) <= 1e-12:
                    continue
                e = err(B)
                if e < best:
                    A, best, improved = B, e, True
        if not improved:
            step /= 2
            if step < floor:
                break
    return A


def fit_norm(U, D, exponents=NORM_EXPONENTS, refine: bool = True) -> tuple[NormModel, float]:
    """Best dictionary norm for distances D between parameter samples U, and its worst error."""
    U = np.asarray(U, dtype=float)
    U = U[:, None] if U.ndim == 1 else U
    n = U.shape[1]
    if U.shape[0] < 2:
        raise DomainError("a norm fit needs at least two samples")
    delta, dvals = _pairs(U, np.asarray(D, dtype=float))
    keep = np.linalg.norm(delta, axis=1) > 0
    delta, dvals = delta[keep], dvals[keep]
    if delta.shape[0] == 0:
        raise DomainError("all samples coincide")

    candidates = []
    for p in exponents:
        c, _ = _scalar_fit(delta, dvals, p)
        if c > 0:
            candidates.append(NormModel(n, c * np.eye(n), p) if n > 1 else NormModel(n, [[c]], p))
        if p == 2.0 and n > 1:
            A = _matrix_fit(delta, dvals, n)
            if refine:
                A = _refine(A, delta, dvals)
            base = np.linalg.norm(delta @ A.T, axis=1)
            c2, _ = _minimax(dvals, base)
            if c2 > 0:
                candidates.append(NormModel(n, c2 * A, 2.0))
    if not candidates:
        raise DomainError("distances through the map are all zero")

    def err(model):
        return float(np.max(np.abs(dvals - model(delta))))

    scored = [(err(m), k, m) for k, m in enumerate(candidates)]
    e, _, model = min(scored, key=lambda s: (s[0], s[1]))
    return model, e


@dataclass
class MdResult:
    value: float
    norm: NormModel
    error: float
    side: float
    samples: int
    params: np.ndarray = None


def cube_grid(cube: LatticeCube, per_axis: int) -> np.ndarray:
    n = len(cube.corner)
    axis = (np.arange(per_axis) + 0.5) / per_axis * cube.side
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    return mesh + np.asarray(cube.corner)


def params_in_cube(chart, cube: LatticeCube) -> np.ndarray:
    lo = np.asarray(cube.corner)
    inside = np.all((chart.params >= lo) & (chart.params < lo + cube.side), axis=1)
    return np.flatnonzero(inside)


def md_coefficient(chart, cube: LatticeCube, grid: int = 8, idx=None,
                   exponents=NORM_EXPONENTS) -> MdResult:
    """
    (1/l(Q)) min over the dictionary of max over sample pairs of
    |d(g(x), g(y)) - ||x - y|||, with the minimizing norm.
    """
    U = cube_grid(cube, grid) if idx is None else chart.params[np.asarray(idx, dtype=int)]
    if U.shape[0] < 2:
        raise DomainError(f"md needs at least two samples in the cube, got {U.shape[0]}")
    D = chart.distances(U)
    model, err = fit_norm(U, D, exponents)
    return MdResult(err / cube.side, model, err, cube.side, U.shape[0], U)


# ----- metric jacobian field ---------------------------------------------------

@dataclass
class JacobianField:
    grid: GridFunction
    integrated_mass: float
    measured_mass: float | None

    @property
    def relative_error(self) -> float | None:
        if self.measured_mass is None or self.measured_mass == 0:
            return None
        return abs(self.integrated_mass - self.measured_mass) / self.measured_mass


def metric_jacobian_field(chart, cube: LatticeCube, level: int, weights=None, per_axis: int = 4,
                          order: int = 32) -> JacobianField:
    """
    Per-cell jacobian of the md-fitted Euclidean-type norm of the chart.

    Each level-`level` cell of `cube` is sampled on a small grid; the fitted
    norm |A x| gives jacobian |det A| through the spherical quadrature. With
    `weights` (one per chart sample) the integral of the field over the cube
    is compared against the sample mass of the image.
    """
    n = len(cube.corner)
    m = 2 ** level
    cell = cube.side / m
    values = np.zeros((m,) * n)
    for index in itertools.product(range(m), repeat=n):
        corner = np.asarray(cube.corner) + cell * np.asarray(index)
        U = cube_grid(LatticeCube(level, cube.shift, tuple(index), tuple(corner), cell), per_axis)
        D = chart.distances(U)
        off = D[~np.eye(U.shape[0], dtype=bool)]
        if np.any(off <= 0):
            raise DomainError(f"chart is not injective on cell {index}")
        model, _ = fit_norm(U, D, exponents=(2.0,))
        values[index] = jacobian_of_seminorm(model, n, order=order)
    field_ = GridFunction(values, cube.corner, cube.side)
    integrated = float(values.sum() * cell ** n)
    measured = None
    if weights is not None:
        idx = params_in_cube(chart, cube)
        measured = float(np.asarray(weights)[idx].sum())
    out = JacobianField(field_, integrated, measured)
    if out.relative_error is not None and out.relative_error > 0.02:
        logger.warning(f"jacobian field integrates to {integrated:.6g}, sample mass {measured:.6g}")
    return out


# ----- glued space and cube-adapted alpha --------------------------------------

class GluedSpace:
    """
    Sample points Y of X (indices into `space`) and grid points G of R^n in
    one finite metric: d on Y, the norm on G, and across

        zeta(u, y) = min over v in V of ||u - v|| + penalty + d(g(v), y)

    with V the chart samples in the cube and penalty = 2 md l(I).
    """

    def __init__(self, space: MetricSpaceSample, Y, G, V, norm: NormModel, md: float, side: float):
        self.space = space
        self.Y = np.asarray(Y, dtype=int)
        self.G = np.asarray(G, dtype=float).reshape(-1, norm.n)
        self.V = np.asarray(V, dtype=int)
        self.norm = norm
        self.penalty = 2 * md * side
        if self.V.size == 0:
            raise ConstructionError("glued space needs chart samples in the cube", stage="glue")
        self.matrix = self._build()

    @property
    def n_points(self) -> int:
        return self.matrix.shape[0]

    def _build(self) -> np.ndarray:
        ny, ng = self.Y.size, self.G.shape[0]
        M = np.zeros((ny + ng, ny + ng))
        if ny:
            M[:ny, :ny] = self.space.pairwise(self.Y)
        if ng:
            diff = self.G[:, None, :] - self.G[None, :, :]
            M[ny:, ny:] = self.norm(diff.reshape(-1, self.norm.n)).reshape(ng, ng)
        if ny and ng:
            Vp = self.space.chart.params[self.V]
            to_v = self.norm((self.G[:, None, :] - Vp[None, :, :]).reshape(-1, self.norm.n)).reshape(ng, -1)
            gv_y = self.space.pairwise(self.V, self.Y)
            cross = np.empty((ng, ny))
            rows = max(1, 4_000_000 // (self.V.size * ny))
            for s in range(0, ng, rows):
                cross[s:s + rows] = np.min(to_v[s:s + rows, :, None] + gv_y[None, :, :], axis=1)
            M[ny:, :ny] = cross + self.penalty
            M[:ny, ny:] = M[ny:, :ny].T
        return M

    def pairwise(self, a_idx, b_idx=None) -> np.ndarray:
        a_idx = np.atleast_1d(a_idx)
        b_idx = a_idx if b_idx is None else np.atleast_1d(b_idx)
        return self.matrix[np.ix_(a_idx, b_idx)]

    def paired(self, a_idx, b_idx) -> np.ndarray:
        return self.matrix[a_idx, b_idx]

    def distances_from(self, i, idx=None) -> np.ndarray:
        row = self.matrix[int(i)]
        return row if idx is None else row[idx]

    def audit_triangle(self, n_triples: int = 20000, seed: int = 0, tol: float = 1e-9) -> int:
        """Violated triangle inequalities over exhaustive (small) or sampled triples."""
        M = self.matrix
        size = M.shape[0]
        scale = tol * (1.0 + float(M.max()))
        if size <= 120:
            excess = M[:, None, :] - M[:, :, None] - M[None, :, :]
            return int(np.sum(excess > scale))
        rng = np.random.default_rng(seed)
        i, j, k = rng.integers(0, size, size=(3, n_triples))
        return int(np.sum(M[i, k] > M[i, j] + M[j, k] + scale))


@dataclass
class AlphaTildeResult(CoefficientResult):
    md: MdResult | None = None
    c_pi: float = 0.0
    glued: GluedSpace | None = None
    raw: float = 0.0
    mu: np.ndarray | None = None
    nu: np.ndarray | None = None


def _cells_per_axis(side: float, spacing: float, n: int, max_cells: int) -> int:
    per_axis_cap = max(2, int(round(max_cells ** (1.0 / n))))
    want = max(2, int(2 ** np.ceil(np.log2(max(side / max(spacing, 1e-300), 2)))))
    return min(want, per_axis_cap)


def _param_voxels(params: np.ndarray, idx: np.ndarray, cube: LatticeCube, count: int, anchor=None):
    """Representatives of `idx` (smallest index per parameter voxel) and each member's voxel."""
    if idx.size <= count:
        return idx, np.arange(idx.size)
    n = params.shape[1]
    per_axis = max(1, int(np.floor(count ** (1.0 / n))))
    keys = np.floor((params[idx] - np.asarray(cube.corner)) / cube.side * per_axis)
    keys = keys.astype(np.int64).clip(0, per_axis - 1)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    reps = idx[first]
    if anchor is not None:
        hit = np.flatnonzero(idx == anchor)
        if hit.size:
            reps[inverse[hit[0]]] = anchor
    return reps, inverse


def _chart_spacing(chart, cube: LatticeCube, fallback: int) -> float:
    if chart.n == 1 and chart.params.shape[0] > 1:
        gaps = np.diff(np.unique(chart.params[:, 0]))
        return float(gaps.min())
    return cube.side / fallback


def alpha_cube_adapted(space: MetricSpaceSample, cube: LatticeCube, search: SearchConfig | None = None,
                       mask=None, audit: bool = True, anchor: int | None = None) -> AlphaTildeResult:
    """
    (1/l(I)^{n+1}) tilde-dist between the sample measure on g(I) cap E and
    c_{P,I} times the norm's Hausdorff measure on I, in the glued space.

    The reference measure on I is uniform with total mass(g(I) cap E). When
    the cube holds more than max_support samples their mass is gathered on
    one representative per parameter voxel; `anchor` is kept as the
    representative of its voxel.
    """
    search = search or SearchConfig()
    chart = space.chart
    if chart is None:
        raise UnsupportedSpaceError(f"alpha_tilde needs a chart; {space.name} has none")
    n = chart.n
    V = params_in_cube(chart, cube)
    if V.size < 2:
        raise DomainError(f"lattice cube at level {cube.level} holds {V.size} chart samples")
    inE = np.ones(space.n_points, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    Y, voxel = _param_voxels(chart.params, V, cube, search.max_support, anchor)
    if Y.size < 2:
        Y, voxel = V, np.arange(V.size)
    md = md_coefficient(chart, cube, idx=Y)
    y_mass = np.bincount(voxel, weights=space.weights[V] * inE[V], minlength=Y.size)
    mass = float(y_mass.sum())
    if mass <= 0:
        return AlphaTildeResult(0.0, c=0.0, norm=md.norm.tag, md=md)

    m = _cells_per_axis(cube.side, _chart_spacing(chart, cube, search.md_grid), n, search.max_cells)
    G = cube_grid(cube, m)
    density = mass / cube.side ** n
    cell_mass = mass / G.shape[0]
    glued = GluedSpace(space, Y, G, Y, md.norm, md.value, cube.side)
    if audit:
        bad = glued.audit_triangle()
        if bad:
            raise ConstructionError(f"glued metric violates {bad} triangle inequalities", stage="glue",
                                    cause="triangle", offending=[cube.level])
    mu = np.concatenate([y_mass, np.zeros(G.shape[0])])
    nu = np.concatenate([np.zeros(Y.size), np.full(G.shape[0], cell_mass)])
    sol = tilde_dist(mu, nu, glued, mode=search.solver_mode)
    c_pi = density / md.norm.jacobian()
    residual = max(sol.residuals.values()) if sol.residuals else 0.0
    return AlphaTildeResult(sol.value / cube.side ** (n + 1), c=c_pi, norm=md.norm.tag, residual=residual,
                            md=md, c_pi=c_pi, glued=glued, raw=sol.value, mu=mu, nu=nu,
                            extras={"cap": sol.extras.get("cap"), "cells": int(G.shape[0])})


def bilip_alpha_bound(space: MetricSpaceSample, cube: LatticeCube, md_value: float, mask=None,
                      level: int | None = None) -> dict:
    """
    md_g(I) + sum over I' in I of l(I')^{1+n/2} / l(I)^{1+n} ||Delta_I' rho||_2,
    rho the pushforward density of E's sample weights, plus the raster floor.
    """
    chart = space.chart
    n = chart.n
    if level is None:
        level = max(1, int(np.floor(np.log2(cube.side / _chart_spacing(chart, cube, 16)))))
    weights = space.weights if mask is None else space.weights * np.asarray(mask, dtype=bool)
    rho = density_raster(chart.params, weights, cube.corner, cube.side, level)
    wavelet = 0.0
    for j in range(level):
        side_j = cube.side * 2.0 ** (-j)
        wavelet += side_j ** (1 + n / 2) * float(np.sqrt(rho.delta_norms_sq(j)).sum())
    wavelet /= cube.side ** (1 + n)
    floor = 2.0 ** (-level)
    return {"md": md_value, "wavelet": wavelet, "floor": floor, "total": md_value + wavelet + floor,
            "level": level}


def lemma_comparison(space: MetricSpaceSample, tree: CubeTree, cube_id: int, lattice: ShiftedLattice,
                     search: SearchConfig | None = None, mask=None) -> dict:
    """
    alpha_{E,X} on 5B_Q against alpha_tilde on the lattice cube I_Q.

    `ball_raw` is the glued-space dist over 5B_Q with the measures of the
    tilde problem; it is bounded by `tilde_raw` whenever 5 l(Q) <= cap.
    """
    search = search or SearchConfig()
    q = tree.cubes[cube_id]
    good = find_l_good_cube(space.chart, tree, cube_id, lattice)
    tilde = alpha_cube_adapted(space, good.cube, search, mask, anchor=q.center)
    r5 = 5 * q.side
    out = {"cube": cube_id, "lattice_level": good.cube.level, "ratio": good.ratio, "radius": r5,
           "alpha_tilde": tilde.value, "tilde_raw": tilde.raw, "cap": tilde.extras.get("cap"),
           "ball_raw": 0.0, "alpha": None, "measured_C": None}
    if tilde.glued is None:
        return out
    where = np.flatnonzero(tilde.glued.Y == q.center)
    if where.size:
        ball = dist_ball(tilde.mu, tilde.nu, int(where[0]), r5, tilde.glued, mode=search.solver_mode)
        out["ball_raw"] = ball.value
    if space.has_coords:
        alpha = alpha_coefficient(space, q.center, r5, search, mask)
        out["alpha"] = alpha.value
        out["measured_C"] = alpha.value / tilde.value if tilde.value > 0 else None
    return out


# ----- xi ----------------------------------------------------------------------

@dataclass
class XiResult(CoefficientResult):
    zeta: float = 0.0
    eta: float = 0.0


def _chart_coordinates(space: MetricSpaceSample, members: np.ndarray, x: int) -> np.ndarray:
    if space.chart is not None:
        return space.chart.params[members]
    if space.has_coords:
        pts = space.coords[members]
        plane = pca_plane(pts, space.weights[members], space.dim_n)
        return (pts - space.coords[x]) @ plane.basis
    raise UnsupportedSpaceError(f"xi needs a chart or ambient coordinates; {space.name} has neither")


def xi_coefficient(space: MetricSpaceSample, x: int, r: float, search: SearchConfig | None = None) -> XiResult:
    """
    zeta + eta for the chart map phi, clipped radially into the model ball:
    zeta = max over sampled pairs |d(y,z) - ||phi(y) - phi(z)|||/r,
    eta  = max over a grid of the model ball of the distance to phi(B)/r.
    """
    search = search or SearchConfig()
    members = space.ball_indices(x, r)
    if members.size < 2:
        raise DomainError(f"ball B({x}, {r:.4g}) holds fewer than two points")
    phi = _chart_coordinates(space, members, x)
    n = phi.shape[1]
    phi_x = phi[np.flatnonzero(members == x)[0]]

    pick = np.unique(np.linspace(0, members.size - 1, min(search.xi_pairs, members.size)).round().astype(int))
    D = space.pairwise(members[pick])
    norm, _ = fit_norm(phi[pick], D)

    offsets = phi - phi_x
    size = norm(offsets)
    scale = np.where(size > r, r / np.where(size > 0, size, 1.0), 1.0)
    clipped = phi_x + offsets * scale[:, None]

    i, j = np.triu_indices(pick.size, k=1)
    gap = np.abs(D[i, j] - norm(clipped[pick][i] - clipped[pick][j]))
    zeta = float(gap.max()) / r if gap.size else 0.0

    reach = r * norm.lipschitz_bound()
    axis = np.linspace(-reach, reach, search.xi_grid)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    mesh = mesh[norm(mesh) <= r] + phi_x
    worst = 0.0
    for s in range(0, mesh.shape[0], 256):
        block = mesh[s:s + 256]
        d = norm((block[:, None, :] - clipped[None, :, :]).reshape(-1, n)).reshape(block.shape[0], -1)
        worst = max(worst, float(d.min(axis=1).max()))
    eta = worst / r
    return XiResult(zeta + eta, norm=norm.tag, zeta=zeta, eta=eta)


# ----- coefficient fields ------------------------------------------------------

class CoefficientValue(BaseModel):
    cube_id: int
    level: int
    side: float
    radius: float
    value: float | None = None
    flag: str | None = None
    c: float | None = None
    norm: str | None = None
    plane: str | None = None
    residual: float | None = None


class CoefficientField(BaseModel):
    kind: str
    ball_factor: float
    values: list[CoefficientValue]

    def by_cube(self) -> dict[int, CoefficientValue]:
        return {v.cube_id: v for v in self.values}

    def value(self, cube_id: int) -> float | None:
        entry = self.by_cube().get(cube_id)
        return None if entry is None else entry.value

    def flagged(self) -> list[CoefficientValue]:
        return [v for v in self.values if v.flag is not None]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cube_id", "level", "side", "value", "c", "norm", "plane", "residual", "flag"])
            for v in self.values:
                writer.writerow([v.cube_id, v.level, f"{v.side:.12g}",
                                 "" if v.value is None else f"{v.value:.12g}",
                                 "" if v.c is None else f"{v.c:.12g}",
                                 v.norm or "", v.plane or "",
                                 "" if v.residual is None else f"{v.residual:.3g}", v.flag or ""])

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.model_dump(), sort_keys=True, indent=1))


def chart_lattice(chart, max_level: int = 12) -> ShiftedLattice:
    side = float(np.max(chart.hi - chart.lo))
    return ShiftedLattice(chart.lo, side, max_level)


def _scale_flag(space: MetricSpaceSample, center: int, r: float, search: SearchConfig,
                reach: float = 1.0) -> str | None:
    if r > space.diameter():
        return "out_of_range"
    if r < search.scale_floor * space.min_spacing():
        return "unreliable"
    # Osc samples balls of radius up to r around centers up to r away
    if space.boundary_distance[center] < reach * r:
        return "boundary"
    return None


def _eval_osc(space, tree, q, r, config, mask, lattice):
    res = osc_coefficient(space, q.center, r, config.search, mask)
    return {"value": res.value, "c": res.c}


def _eval_alpha(space, tree, q, r, config, mask, lattice):
    res = alpha_coefficient(space, q.center, r, config.search, mask)
    return {"value": res.value, "c": res.c, "norm": res.norm, "plane": res.plane, "residual": res.residual}


def _eval_md(space, tree, q, r, config, mask, lattice):
    good = find_l_good_cube(space.chart, tree, q.id, lattice)
    res = md_coefficient(space.chart, good.cube, grid=config.search.md_grid)
    return {"value": res.value, "norm": res.norm.tag}


def _eval_alpha_tilde(space, tree, q, r, config, mask, lattice):
    good = find_l_good_cube(space.chart, tree, q.id, lattice)
    res = alpha_cube_adapted(space, good.cube, config.search, mask)
    return {"value": res.value, "c": res.c, "norm": res.norm, "residual": res.residual}


def _eval_xi(space, tree, q, r, config, mask, lattice):
    res = xi_coefficient(space, q.center, r, config.search)
    return {"value": res.value, "norm": res.norm}


COEFFICIENT_EVALUATORS = {
    "osc": _eval_osc,
    "osc_E": _eval_osc,
    "alpha": _eval_alpha,
    "alpha_E": _eval_alpha,
    "md": _eval_md,
    "alpha_tilde": _eval_alpha_tilde,
    "xi": _eval_xi,
}


def check_support(space: MetricSpaceSample, kind: str) -> None:
    if kind.startswith("alpha") and kind != "alpha_tilde" and not space.has_coords:
        raise UnsupportedSpaceError(f"{kind} needs ambient coordinates; {space.name} is {space.metric_tag}")
    if kind in ("md", "alpha_tilde") and space.chart is None:
        raise UnsupportedSpaceError(f"{kind} needs a chart; {space.name} has none")
    if kind == "xi" and space.chart is None and not space.has_coords:
        raise UnsupportedSpaceError(f"xi needs a chart or coordinates; {space.name} has neither")


def compute_field(tree: CubeTree, config: CoefficientConfig, mask=None, lattice: ShiftedLattice | None = None,
                  cube_ids=None) -> CoefficientField:
    """
    One coefficient on the ball ball_factor * B_Q of every cube. Cubes outside
    the resolved band carry a flag instead of a value.
    """
    space = tree.space
    check_support(space, config.kind)
    evaluate = COEFFICIENT_EVALUATORS[config.kind]
    if config.kind in ("md", "alpha_tilde") and lattice is None:
        lattice = chart_lattice(space.chart)
    if not config.uses_subset:
        mask = None
    search = config.search
    reach = 2.0 if config.kind.startswith("osc") else 1.0
    ids = range(len(tree)) if cube_ids is None else cube_ids
    values = []
    for cid in ids:
        q = tree.cubes[cid]
        r = search.ball_factor * q.side
        entry = CoefficientValue(cube_id=q.id, level=q.level, side=q.side, radius=r)
        flag = _scale_flag(space, q.center, r, search, reach)
        if flag is not None:
            entry.flag = flag
        else:
            try:
                for key, val in evaluate(space, tree, q, r, config, mask, lattice).items():
                    setattr(entry, key, val)
            except NotFoundError:
                entry.flag = "no_lattice_cube"
        values.append(entry)
    flagged = sum(v.flag is not None for v in values)
    logger.info(f"{config.kind} field on {space.name}: {len(values) - flagged} values, {flagged} flagged")
    return CoefficientField(kind=config.kind, ball_factor=search.ball_factor, values=values)
