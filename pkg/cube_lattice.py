"""
Net hierarchies, Christ-David cube trees and shifted dyadic lattices.

Cube construction:
  1) Build nested maximal rho^k-nets by farthest-point insertion.
  2) Parent of a level-(k+1) net point = nearest level-k net point
     (ties: smallest index).
  3) Attach every point to its nearest finest-level net point and follow
     the parent chain upward; the level-k cube of x_Q is every point whose
     chain passes through x_Q.

With side 5 rho^k every member lies within rho^k/(1-rho) of its center,
and the ball of radius 5 c0 rho^k about a center stays inside its cube as
long as 5 c0 + rho/(1-rho) < 1/2.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from errors import ConstructionError, DomainError, NotFoundError
from metric_core import MetricSpaceSample, doubling_estimate

logger = logging.getLogger(__name__)

DEFAULT_RHO = 0.25
DEFAULT_C0 = 1 / 32


def max_admissible_c0(rho: float) -> float:
    """Largest c0 for which the sandwich argument closes at this rho."""
    return max(0.0, (0.5 - rho / (1 - rho)) / 5)


# ----- nets -----------------------------------------------------------------

@dataclass
class NetHierarchy:
    space: MetricSpaceSample
    rho: float
    k_min: int
    k_max: int
    unit: float
    levels: dict[int, np.ndarray]
    nearest: dict[int, np.ndarray]

    def net(self, k: int) -> np.ndarray:
        return self.levels[k]

    def radius(self, k: int) -> float:
        return self.rho ** k * self.unit

    def verify(self) -> list[str]:
        """Separation, maximality and nesting violations, as messages."""
        issues = []
        for k in range(self.k_min, self.k_max + 1):
            net = self.levels[k]
            r = self.radius(k)
            if net.size > 1:
                D = self.space.pairwise(net)
                np.fill_diagonal(D, np.inf)
                if D.min() <= r:
                    issues.append(f"level {k}: net points {D.min():.3g} apart, need > {r:.3g}")
            gap = np.array([self.space.distances_from(c) for c in net]).min(axis=0)
            if gap.max() > r:
                issues.append(f"level {k}: point {int(gap.argmax())} at {gap.max():.3g} from the net")
            if k > self.k_min and not np.all(np.isin(self.levels[k - 1], net)):
                issues.append(f"level {k}: coarser net not contained")
        return issues


def default_levels(space: MetricSpaceSample, rho: float, c0: float | None = None) -> tuple[int, int]:
    """
    Coarsest level: a single net point (rho^k >= diam), or c0 rho^k >= diam
    when c0 is given. Finest level: last k with rho^k >= 2 x min spacing.
    """
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0,1), got {rho}")
    diam = space.diameter()
    if diam <= 0:
        return 0, 0
    top = diam / c0 if c0 else diam
    k_min = math.floor(math.log(top) / math.log(rho) + 1e-12)
    k_max = math.floor(math.log(2 * space.min_spacing()) / math.log(rho) + 1e-12)
    return k_min, max(k_min, k_max)


def build_net_hierarchy(space: MetricSpaceSample, rho: float, k_min: int, k_max: int,
                        seed: int | None = None, unit: float = 1.0,
                        priority: dict[int, list[int]] | None = None,
                        start: int | None = None) -> NetHierarchy:
    """
    Nested maximal nets. Level k keeps the level k-1 net, then inserts
    `priority[k]` candidates that are still rho^k-separated, then completes
    by farthest-point insertion, ties going to the smallest index.

    The first net point is `start` when given, else the first priority
    candidate of level k_min, else index 0 for seed None and a uniformly
    drawn index for an integer seed. Only the first point depends on the
    seed; everything after it is deterministic.
    """
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0,1), got {rho}")
    if k_min > k_max:
        raise DomainError(f"k_min={k_min} exceeds k_max={k_max}")
    N = space.n_points
    priority = priority or {}
    if start is None:
        if priority.get(k_min):
            start = int(priority[k_min][0])
        else:
            start = 0 if seed is None else int(np.random.default_rng(seed).integers(N))
    elif not 0 <= start < N:
        raise DomainError(f"start index {start} outside 0..{N - 1}")

    dist = np.full(N, np.inf)
    nearest = np.full(N, N, dtype=np.int64)
    net: list[int] = []

    def insert(c: int):
        row = space.distances_from(c)
        better = (row < dist) | ((row == dist) & (c < nearest))
        dist[better] = row[better]
        nearest[better] = c
        net.append(c)

    levels, nearest_at = {}, {}
    for k in range(k_min, k_max + 1):
        radius = rho ** k * unit
        if not net:
            insert(start)
        for c in priority.get(k, ()):
            if dist[c] > radius:
                insert(int(c))
        while True:
            far = int(np.argmax(dist))
            if dist[far] <= radius:
                break
            insert(far)
        levels[k] = np.array(sorted(net), dtype=np.int64)
        nearest_at[k] = nearest.copy()

    logger.debug("net hierarchy on %s: sizes %s", space.name, [levels[k].size for k in levels])
    return NetHierarchy(space, rho, k_min, k_max, unit, levels, nearest_at)


# ----- cube trees -----------------------------------------------------------

@dataclass
class Cube:
    id: int
    level: int
    center: int
    side: float
    members: np.ndarray
    parent: int | None = None
    children: list[int] = field(default_factory=list)


class CubeTree:
    """Christ-David hierarchy over a MetricSpaceSample."""

    def __init__(self, space: MetricSpaceSample, rho: float, c0: float, cubes: list[Cube], unit: float = 1.0):
        self.space = space
        self.rho = rho
        self.c0 = c0
        self.unit = unit
        self.cubes = cubes
        self.by_level: dict[int, list[int]] = {}
        for q in cubes:
            self.by_level.setdefault(q.level, []).append(q.id)
        self.k_min = min(self.by_level)
        self.k_max = max(self.by_level)
        self._labels = None

    def __len__(self) -> int:
        return len(self.cubes)

    def __getitem__(self, cube_id: int) -> Cube:
        return self.cubes[cube_id]

    @property
    def n(self) -> int:
        return self.space.dim_n

    def side(self, level: int) -> float:
        return 5 * self.rho ** level * self.unit

    def labels(self, level: int) -> np.ndarray:
        """Cube id of every point at `level`."""
        if self._labels is None:
            self._labels = {}
            for k, ids in self.by_level.items():
                lab = np.full(self.space.n_points, -1, dtype=np.int64)
                for cid in ids:
                    lab[self.cubes[cid].members] = cid
                self._labels[k] = lab
        return self._labels[level]

    def cube_of(self, point: int, level: int) -> Cube:
        return self.cubes[int(self.labels(level)[point])]

    def descendants(self, cube_id: int) -> list[int]:
        """`cube_id` and every cube below it, level by level."""
        out, frontier = [], [cube_id]
        while frontier:
            out.extend(frontier)
            frontier = [c for q in frontier for c in self.cubes[q].children]
        return out

    def depth_below(self, cube_id: int) -> int:
        return self.k_max - self.cubes[cube_id].level

    def mass(self, cube_id: int, mask=None) -> float:
        members = self.cubes[cube_id].members
        if mask is not None:
            members = members[np.asarray(mask, dtype=bool)[members]]
        return float(self.space.weights[members].sum())

    def invalidate(self) -> None:
        """Drop cached labels after members were edited in place."""
        self._labels = None

    def to_json(self, path) -> None:
        doc = {
            "rho": self.rho,
            "c0": self.c0,
            "unit": self.unit,
            "cubes": [
                {"id": q.id, "level": q.level, "center": q.center, "parent": q.parent,
                 "members": q.members.tolist()}
                for q in self.cubes
            ],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def from_json(cls, path, space: MetricSpaceSample) -> "CubeTree":
        doc = json.loads(Path(path).read_text())
        unit = doc.get("unit", 1.0)
        cubes = [Cube(c["id"], c["level"], c["center"], 5 * doc["rho"] ** c["level"] * unit,
                      np.asarray(c["members"], dtype=np.int64), c["parent"])
                 for c in sorted(doc["cubes"], key=lambda c: c["id"])]
        for q in cubes:
            if q.parent is not None:
                cubes[q.parent].children.append(q.id)
        return cls(space, doc["rho"], doc["c0"], cubes, unit=unit)


class CubeAxiomReport(BaseModel):
    partition: bool
    nesting: bool
    sandwich: bool
    centers: bool
    failures: dict[str, list[int]]
    small_boundary: dict[str, dict[str, float]] = {}

    @property
    def passed(self) -> bool:
        return self.partition and self.nesting and self.sandwich and self.centers


def build_christ_david(hierarchy: NetHierarchy, c0: float = DEFAULT_C0, verify: bool = True) -> CubeTree:
    if not 0 < c0 < 0.5:
        raise DomainError(f"c0 must lie in (0, 1/2), got {c0}")
    space, rho = hierarchy.space, hierarchy.rho
    if 5 * c0 + rho / (1 - rho) >= 0.5:
        logger.warning("rho=%s, c0=%s outside the range where the sandwich argument closes; "
                       "relying on the verifier", rho, c0)

    # Step A: per-point chain of centers, finest level first.
    chain = {hierarchy.k_max: hierarchy.nearest[hierarchy.k_max].copy()}
    for k in range(hierarchy.k_max - 1, hierarchy.k_min - 1, -1):
        chain[k] = hierarchy.nearest[k][chain[k + 1]]

    # Step B: group points by center, ordered by (level, center index).
    cubes: list[Cube] = []
    center_to_id: dict[tuple[int, int], int] = {}
    for k in range(hierarchy.k_min, hierarchy.k_max + 1):
        lab = chain[k]
        order = np.argsort(lab, kind="stable")
        centers, starts = np.unique(lab[order], return_index=True)
        bounds = list(starts[1:]) + [order.size]
        for center, a, b in zip(centers, starts, bounds):
            cid = len(cubes)
            parent = None
            if k > hierarchy.k_min:
                parent = center_to_id[(k - 1, int(hierarchy.nearest[k - 1][center]))]
                cubes[parent].children.append(cid)
            cubes.append(Cube(cid, k, int(center), 5 * rho ** k * hierarchy.unit,
                              np.sort(order[a:b]).astype(np.int64), parent))
            center_to_id[(k, int(center))] = cid

    tree = CubeTree(space, rho, c0, cubes, unit=hierarchy.unit)
    if verify:
        report = verify_cube_axioms(tree, boundary_etas=())
        if not report.passed:
            bad = {k: v[:10] for k, v in report.failures.items() if v}
            raise ConstructionError(f"cube axioms failed: {bad}", stage="tree", cause="axioms",
                                    offending=sorted({c for v in bad.values() for c in v}))
    logger.info("christ-david tree on %s: %d cubes, levels %d..%d", space.name, len(cubes), tree.k_min, tree.k_max)
    return tree


def verify_cube_axioms(tree: CubeTree, boundary_etas=(0.1, 0.01)) -> CubeAxiomReport:
    """Exact per-axiom check; counterexample cube ids listed per axiom."""
    space = tree.space
    N = space.n_points
    failures = {"partition": [], "nesting": [], "sandwich": [], "centers": []}

    for k, ids in tree.by_level.items():
        allm = np.concatenate([tree.cubes[c].members for c in ids])
        if allm.size != N or not np.array_equal(np.sort(allm), np.arange(N)):
            counts = np.bincount(allm, minlength=N)
            bad_pts = set(np.flatnonzero(counts != 1).tolist())
            failures["partition"].extend(c for c in ids if bad_pts & set(tree.cubes[c].members.tolist())
                                         or not tree.cubes[c].members.size)
            if not failures["partition"]:
                failures["partition"].append(ids[0])

    for q in tree.cubes:
        if q.parent is not None and not np.all(np.isin(q.members, tree.cubes[q.parent].members)):
            failures["nesting"].append(q.id)
        if q.children:
            kids = np.sort(np.concatenate([tree.cubes[c].members for c in q.children]))
            if not np.array_equal(kids, q.members):
                failures["nesting"].append(q.id)
        if q.members.size == 0:
            failures["sandwich"].append(q.id)
            continue
        outer = space.distances_from(q.center, q.members).max()
        inner = space.ball_indices(q.center, tree.c0 * q.side)
        if outer > q.side or not np.all(np.isin(inner, q.members)):
            failures["sandwich"].append(q.id)
        if q.center not in set(q.members.tolist()):
            failures["centers"].append(q.id)

    report = CubeAxiomReport(
        partition=not failures["partition"],
        nesting=not failures["nesting"],
        sandwich=not failures["sandwich"],
        centers=not failures["centers"],
        failures={k: sorted(set(v)) for k, v in failures.items()},
    )
    for eta in boundary_etas:
        report.small_boundary[f"{eta:g}"] = _small_boundary_profile(tree, eta)
    return report


def _small_boundary_profile(tree: CubeTree, eta: float) -> dict[str, float]:
    """Mass of {x in Q : d(x, X minus Q) <= eta rho^k} over l(Q)^n, max and mean over cubes."""
    space = tree.space
    ratios = []
    for k, ids in tree.by_level.items():
        if len(ids) < 2:
            continue
        lab = tree.labels(k)
        r = eta * tree.rho ** k * tree.unit
        near_edge = np.zeros(space.n_points, dtype=bool)
        for p in range(space.n_points):
            ball = space.ball_indices(p, r)
            near_edge[p] = np.any(lab[ball] != lab[p])
        for cid in ids:
            q = tree.cubes[cid]
            ratios.append(space.weights[q.members[near_edge[q.members]]].sum() / q.side ** tree.n)
    if not ratios:
        return {"max": 0.0, "mean": 0.0}
    return {"max": float(np.max(ratios)), "mean": float(np.mean(ratios))}


# ----- multiresolution systems -------------------------------------------

def multires_bound(doubling: float, c0: float) -> int:
    """Count of c0 rho^k-net points a rho^k-ball can hold under doubling constant C_d."""
    return int(math.ceil(max(doubling, 1.0) ** (math.ceil(math.log2(2 / c0)) + 1)))


def target_level(t: float, rho: float, c0: float) -> int:
    """The k with c0 rho^(k+1) <= t < c0 rho^k."""
    return math.ceil(math.log(t / c0) / math.log(rho) - 1e-12) - 1


def sample_scale_pairs(space: MetricSpaceSample, count: int, rho: float, c0: float, k_max: int,
                       seed: int = 0) -> list[tuple[int, float]]:
    """Random (x, t) with t log-uniform in the resolved band."""
    rng = np.random.default_rng(seed)
    diam = space.diameter()
    t_lo = max(2 * space.min_spacing(), c0 * rho ** (k_max + 1))
    t_hi = diam * (1 - 1e-9)
    if diam <= 0 or t_lo >= t_hi:
        return [(int(x), 0.0) for x in rng.integers(0, space.n_points, size=min(count, 1))]
    xs = rng.integers(0, space.n_points, size=count)
    ts = np.exp(rng.uniform(np.log(t_lo), np.log(t_hi), size=count))
    return [(int(x), float(t)) for x, t in zip(xs, ts)]


def covering_cube(tree: CubeTree, x: int, t: float) -> int | None:
    """A cube Q with B(x,t) inside (c0/2)B_Q and t <= l(Q) <= 5t/(rho c0), or None."""
    space = tree.space
    if t <= 0:
        return tree.by_level[tree.k_min][0] if len(tree.by_level[tree.k_min]) == 1 else None
    ball = space.ball_indices(x, t)
    for k in range(tree.k_min, tree.k_max + 1):
        side = tree.side(k)
        if not t <= side <= 5 * t / (tree.rho * tree.c0):
            continue
        q = tree.cube_of(x, k)
        if space.distances_from(q.center, ball).max() <= tree.c0 / 2 * side:
            return q.id
    return None


def _greedy_start(space: MetricSpaceSample, pairs, pending: list[int], levels: dict[int, int],
                  k_single: int, rho: float, c0: float) -> int:
    """
    First net point of the next system. Levels up to k_single hold a single
    net point, so the pairs aimed there are covered only through it: pick the
    pending x that covers most of them. Pending pairs are their own
    candidates, so the pick always covers at least one pair.
    """
    coarse = [p for p in pending if levels[p] <= k_single]
    if not coarse:
        return pairs[pending[0]][0]
    xs = np.array([pairs[p][0] for p in coarse])
    reach = np.array([c0 / 2 * 5 * rho ** levels[p] - pairs[p][1] for p in coarse])
    covered = space.pairwise(xs) <= reach[None, :]
    return int(xs[int(np.argmax(covered.sum(axis=1)))])


def build_multires_systems(space: MetricSpaceSample, rho: float = DEFAULT_RHO, seed: int = 0,
                           c0: float = DEFAULT_C0, n_audit: int = 1000, max_systems: int = 1024,
                           pairs: list[tuple[int, float]] | None = None,
                           doubling: float | None = None) -> list[CubeTree]:
    """
    Christ-David systems until every audited (x, t) is covered.

    Each new system exhausts what the previous ones missed: it starts from
    the pending point serving most single-center levels, and the centers of
    still-uncovered pairs are inserted first at the level their scale needs.
    Every system covers at least one new pair. The system count is compared
    with multires_bound at the doubling estimate and a warning is logged
    when it exceeds it.
    """
    k_min, _ = default_levels(space, rho, c0=c0)
    k_single, k_max = default_levels(space, rho)
    k_max = max(k_min, k_max)
    if pairs is None:
        pairs = sample_scale_pairs(space, n_audit, rho, c0, k_max, seed=seed)
    if doubling is None:
        doubling = doubling_estimate(space, seed=seed)
    bound = multires_bound(doubling, c0)
    rng = np.random.default_rng(seed)
    levels = {p: min(max(target_level(t, rho, c0), k_min), k_max) if t > 0 else k_min
              for p, (_, t) in enumerate(pairs)}
    pending = list(range(len(pairs)))
    trees: list[CubeTree] = []

    while pending and len(trees) < max_systems:
        priority: dict[int, list[int]] = {}
        for p in rng.permutation(pending):
            x, t = pairs[p]
            if t > 0:
                priority.setdefault(levels[p], []).append(x)
        start = _greedy_start(space, pairs, pending, levels, k_single, rho, c0)
        hierarchy = build_net_hierarchy(space, rho, k_min, k_max, priority=priority, start=start)
        tree = build_christ_david(hierarchy, c0, verify=False)
        still = [p for p in pending if covering_cube(tree, *pairs[p]) is None]
        if len(still) == len(pending):
            break
        trees.append(tree)
        pending = still

    if pending:
        raise ConstructionError(f"{len(pending)} of {len(pairs)} audited pairs uncovered after {len(trees)} systems",
                                stage="tree", cause="multires", offending=pending[:20])
    logger.info("multiresolution: %d systems cover %d pairs on %s (doubling %.3g, bound %d)",
                len(trees), len(pairs), space.name, doubling, bound)
    if len(trees) > bound:
        logger.warning("multiresolution on %s: %d systems exceed the doubling bound %d",
                       space.name, len(trees), bound)
    return trees


# ----- shifted lattices ----------------------------------------------------

@dataclass(frozen=True)
class LatticeCube:
    level: int
    shift: tuple[int, ...]
    index: tuple[int, ...]
    corner: tuple[float, ...]
    side: float

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.corner) + self.side / 2

    def contains(self, x, scale: float = 1.0, tol: float = 1e-12) -> np.ndarray:
        """Closed containment in the concentric cube of side scale * side."""
        x = np.atleast_2d(x)
        half = scale * self.side / 2 + tol * self.side
        return np.all(np.abs(x - self.center) <= half, axis=1)


class ShiftedLattice:
    """Dyadic cubes of a root cube Q0 and their translates by side/3 * e, e in {0,1}^n."""

    def __init__(self, corner, side: float, max_level: int):
        self.corner = np.atleast_1d(np.asarray(corner, dtype=float))
        self.n = self.corner.size
        if side <= 0:
            raise DomainError("lattice side must be positive")
        self.side = float(side)
        self.max_level = int(max_level)
        self.shifts = list(itertools.product((0, 1), repeat=self.n))

    def side_at(self, j: int) -> float:
        return self.side * 2.0 ** (-j)

    def in_root(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.corner) and np.all(x <= self.corner + self.side))

    def cube(self, j: int, shift, index) -> LatticeCube:
        s = self.side_at(j)
        corner = self.corner + s * np.asarray(shift) / 3 + s * np.asarray(index)
        return LatticeCube(j, tuple(int(v) for v in shift), tuple(int(v) for v in index),
                           tuple(float(v) for v in corner), s)

    def cube_at(self, x, j: int, shift) -> LatticeCube:
        s = self.side_at(j)
        idx = np.floor((np.asarray(x, dtype=float) - self.corner - s * np.asarray(shift) / 3) / s)
        return self.cube(j, shift, idx.astype(int))

    def cubes(self, j: int, shift=None) -> list[LatticeCube]:
        """Level-j cubes of the given shift (all shifts when None) that meet Q0."""
        shifts = self.shifts if shift is None else [tuple(shift)]
        m = 2 ** j
        out = []
        for e in shifts:
            lo = -1 if any(e) else 0
            for index in itertools.product(range(lo, m), repeat=self.n):
                out.append(self.cube(j, e, index))
        return out


def locate_shifted(lattice: ShiftedLattice, x, j: int) -> LatticeCube:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not lattice.in_root(x):
        raise DomainError(f"point {x.tolist()} outside the lattice root")
    for e in lattice.shifts:
        q = lattice.cube_at(x, j, e)
        if q.contains(x, scale=2 / 3)[0]:
            return q
    raise ConstructionError(f"no level-{j} cube holds {x.tolist()} in its central two-thirds",
                            stage="lattice", cause="two-thirds")


@dataclass
class LGoodCube:
    cube: LatticeCube
    ratio: float
    bound: float


def find_l_good_cube(chart, tree: CubeTree, cube_id: int, lattice: ShiftedLattice,
                     comparability: float | None = None, dilation: float = 10.0) -> LGoodCube:
    """
    Smallest shifted-lattice cube whose chart image covers the sample points
    of dilation * B_Q, subject to l(I) <= C(L) l(Q).

    The dilated ball must lie inside the image of the lattice root: an
    L-bi-Lipschitz chart maps the parameter ball of radius dilation l(Q) / L
    into it, so that ball has to fit in the chart domain. Root-scale cubes
    never do.
    """
    q = tree.cubes[cube_id]
    members = tree.space.ball_indices(q.center, dilation * q.side)
    if members.size == 0:
        raise DomainError(f"cube {cube_id} does not meet the chart image")
    u0 = chart.params[q.center]
    lo_edge = np.maximum(np.asarray(chart.lo, dtype=float), lattice.corner)
    hi_edge = np.minimum(np.asarray(chart.hi, dtype=float), lattice.corner + lattice.side)
    room = float(np.min(np.minimum(u0 - lo_edge, hi_edge - u0)))
    reach = dilation * q.side / (chart.L or 1.0)
    if reach > room:
        raise NotFoundError(f"cube {cube_id}: its {dilation:g}x ball reaches {reach:.3g} past a chart edge "
                            f"{room:.3g} away", stage="lattice", cause="root-scale", holes=[cube_id])
    if comparability is None:
        # a set of diameter D sits inside a shifted cube of side < 6D
        comparability = 6 * 2 * dilation * chart.L if chart.L else np.inf
    u = chart.params[members]
    lo, hi = u.min(axis=0), u.max(axis=0)
    for j in range(lattice.max_level, -1, -1):
        s = lattice.side_at(j)
        if np.any(hi - lo >= s):
            continue
        for e in lattice.shifts:
            offset = lattice.corner + s * np.asarray(e) / 3
            a = np.floor((lo - offset) / s)
            b = np.floor((hi - offset) / s)
            if np.array_equal(a, b):
                ratio = s / q.side
                if ratio > comparability:
                    raise NotFoundError(f"cube {cube_id}: smallest cover has ratio {ratio:.3g} > {comparability:.3g}",
                                        stage="lattice", cause="comparability", holes=[cube_id])
                return LGoodCube(lattice.cube(j, e, a.astype(int)), ratio, comparability)
    raise NotFoundError(f"cube {cube_id}: no lattice cube covers its {dilation:g}x ball",
                        stage="lattice", cause="root-scale", holes=[cube_id])
