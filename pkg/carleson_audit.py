"""
Packing-sum audits of coefficient fields over cube trees.

A field passes a weak Carleson audit when, for every audited root R,

    sum over Q in R with beta(Q) > eps of l(Q)^n  <=  C l(R)^n

with C not growing as roots get deeper. The audits only sample roots and
thresholds; reports name the bands they cover.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from cube_lattice import CubeTree
from errors import CoverageError, DomainError, NumericError
from flatness_coefficients import CoefficientField

logger = logging.getLogger(__name__)

VERDICTS = ("flat", "growing", "inconclusive")


def field_values(field) -> dict[int, float | None]:
    """cube id -> value (None when flagged) from a CoefficientField or a plain mapping."""
    if isinstance(field, CoefficientField):
        return {v.cube_id: v.value for v in field.values}
    return {int(k): (None if v is None else float(v)) for k, v in dict(field).items()}


def _subtree(tree: CubeTree, root: int, k_hi: int | None = None) -> list[int]:
    k_hi = tree.k_max if k_hi is None else k_hi
    return [c for c in tree.descendants(root) if tree.cubes[c].level <= k_hi]


def _holes(values: dict, ids) -> list[int]:
    return [c for c in ids if values.get(c) is None]


def packing_sum(tree: CubeTree, field, eps: float, root: int, k_hi: int | None = None) -> float:
    """sum over Q in R, beta(Q) > eps of l(Q)^n, over l(R)^n."""
    values = field_values(field)
    ids = _subtree(tree, root, k_hi)
    holes = _holes(values, ids)
    if holes:
        raise CoverageError(f"{len(holes)} cubes under root {root} have no value", stage="audit",
                            cause="holes", holes=holes)
    n = tree.n
    top = tree.cubes[root].side ** n
    return float(sum(tree.cubes[c].side ** n for c in ids if values[c] > eps) / top)


def strong_carleson_sum(tree: CubeTree, field, root: int, k_hi: int | None = None) -> float:
    """sum over Q in R of beta(Q)^2 l(Q)^n, over l(R)^n."""
    values = field_values(field)
    ids = _subtree(tree, root, k_hi)
    holes = _holes(values, ids)
    if holes:
        raise CoverageError(f"{len(holes)} cubes under root {root} have no value", stage="audit",
                            cause="holes", holes=holes)
    n = tree.n
    top = tree.cubes[root].side ** n
    return float(sum(values[c] ** 2 * tree.cubes[c].side ** n for c in ids) / top)


# ----- reports -------------------------------------------------------------

class PackingRow(BaseModel):
    root: int
    level: int
    depth: int
    eps: float
    ratio: float
    strong: float


class PackingReport(BaseModel):
    kind: str
    eps: float
    band: tuple[int, int]
    rows: list[PackingRow]
    sup: float
    profile: dict[int, float]
    slope: float | None
    verdict: str
    skipped_roots: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["root", "depth", "eps", "ratio"])
            for r in self.rows:
                writer.writerow([r.root, r.depth, f"{r.eps:g}", f"{r.ratio:.12g}"])

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "eps": self.eps,
            "band": list(self.band),
            "sup": self.sup,
            "profile": {str(k): v for k, v in sorted(self.profile.items())},
            "slope": self.slope,
            "verdict": self.verdict,
            "roots": len(self.rows),
            "skipped_roots": self.skipped_roots,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), sort_keys=True, indent=1))


def resolved_band(tree: CubeTree, field) -> tuple[int, int]:
    """Coarsest and finest levels holding at least one value."""
    values = field_values(field)
    levels = [tree.cubes[c].level for c, v in values.items() if v is not None]
    if not levels:
        raise CoverageError("field has no values in any level", stage="audit", cause="empty")
    return min(levels), max(levels)


def profile_verdict(profile: dict[int, float], bands: int = 3, growth_slope: float = 0.5,
                    flat_tol: float = 0.25) -> tuple[str, float | None]:
    """
    Heuristic label of a depth profile (depth -> max ratio over roots).

    "growing" when the ratio climbs at least `growth_slope` per band over
    the deepest `bands` depths, "flat" when ratio / log2(depth + 1) rises by
    at most `flat_tol` per band, "inconclusive" otherwise or with too few
    bands.
    """
    depths = sorted(profile)
    if len(depths) < bands:
        return "inconclusive", None
    tail = depths[-bands:]
    ratios = np.array([profile[d] for d in tail])
    slope = float(np.polyfit(np.asarray(tail, dtype=float), ratios, 1)[0])
    if slope >= growth_slope:
        return "growing", slope
    normalized = ratios / np.log2(np.asarray(tail, dtype=float) + 1)
    if np.all(np.diff(normalized) <= flat_tol):
        return "flat", slope
    return "inconclusive", slope


def carleson_constant(tree: CubeTree, field, eps: float, min_depth: int = 3, bands: int = 3,
                      growth_slope: float = 0.5, kind: str | None = None) -> PackingReport:
    """
    Packing ratios of every root in the resolved band with at least
    `min_depth` levels below it, their supremum and the depth profile.
    Roots whose subtree has unvalued cubes are skipped and counted.
    """
    values = field_values(field)
    k_lo, k_hi = resolved_band(tree, values)
    kind = kind or getattr(field, "kind", "field")
    rows, skipped = [], 0
    for level in range(k_lo, k_hi - min_depth + 1):
        for root in tree.by_level.get(level, []):
            if _holes(values, _subtree(tree, root, k_hi)):
                skipped += 1
                continue
            ratio = packing_sum(tree, values, eps, root, k_hi)
            strong = strong_carleson_sum(tree, values, root, k_hi)
            if eps > 0 and ratio > strong / eps ** 2 * (1 + 1e-12) + 1e-12:
                raise NumericError(f"packing ratio {ratio:.6g} exceeds the Chebyshev bound {strong / eps ** 2:.6g} "
                                   f"at root {root}", stage="audit", cause="chebyshev")
            rows.append(PackingRow(root=root, level=level, depth=k_hi - level, eps=eps, ratio=ratio, strong=strong))
    if not rows:
        logger.warning(f"{kind} at eps={eps:g}: no root with {min_depth} resolved levels below it "
                       f"in band {k_lo}..{k_hi}")
        return PackingReport(kind=kind, eps=eps, band=(k_lo, k_hi), rows=[], sup=0.0, profile={}, slope=None,
                             verdict="inconclusive", skipped_roots=skipped)
    profile: dict[int, float] = {}
    for r in rows:
        profile[r.depth] = max(profile.get(r.depth, 0.0), r.ratio)
    verdict, slope = profile_verdict(profile, bands, growth_slope)
    if skipped:
        logger.info(f"{kind} at eps={eps:g}: skipped {skipped} roots with unvalued cubes")
    logger.info(f"{kind} at eps={eps:g}: sup ratio {max(r.ratio for r in rows):.4g} over {len(rows)} roots, {verdict}")
    return PackingReport(kind=kind, eps=eps, band=(k_lo, k_hi), rows=rows, sup=max(r.ratio for r in rows),
                         profile=profile, slope=slope, verdict=verdict, skipped_roots=skipped)


def eps_sweep(tree: CubeTree, field, eps_values, **kwargs) -> list[PackingReport]:
    """One report per eps; ratios must not increase with eps."""
    reports = [carleson_constant(tree, field, eps, **kwargs) for eps in sorted(eps_values)]
    for lo, hi in zip(reports, reports[1:]):
        for a, b in zip(lo.rows, hi.rows):
            if b.ratio > a.ratio + 1e-12:
                raise NumericError(f"packing ratio of root {a.root} grows from eps={lo.eps:g} to eps={hi.eps:g}",
                                   stage="audit", cause="eps-monotone")
    return reports


def small_ball_audit(tree: CubeTree, field_ball, field_small, eps: float, **kwargs) -> dict:
    """Packing of beta(B_Q) against beta(c0 B_Q) at one threshold."""
    big = carleson_constant(tree, field_ball, eps, **kwargs)
    small = carleson_constant(tree, field_small, eps, **kwargs)
    return {"eps": eps, "ball": big.summary(), "small_ball": small.summary(),
            "same_verdict": big.verdict == small.verdict}


# ----- set lemmas ----------------------------------------------------------

@dataclass
class RTildeResult:
    members: np.ndarray
    mass: float
    root_mass: float
    eps: float
    bad_cubes: list[int]

    @property
    def passed(self) -> bool:
        return self.mass >= self.eps * self.root_mass * (1 - 1e-12)


def rtilde_check(tree: CubeTree, root: int, F, eps: float) -> RTildeResult:
    """
    Points of R all of whose cubes Q inside R keep mass(Q cap F) >= (1 - 2 eps) mass(Q).
    Requires mass(R minus F) <= eps mass(R).
    """
    F = np.asarray(F, dtype=bool)
    if not 0 <= eps <= 0.5:
        raise DomainError(f"eps must lie in [0, 1/2], got {eps}")
    total = tree.mass(root)
    missing = total - tree.mass(root, F)
    if missing > eps * total * (1 + 1e-12) + 1e-15:
        raise DomainError(f"F misses {missing / total:.4g} of the root mass, more than eps={eps:g}")
    keep = np.zeros(tree.space.n_points, dtype=bool)
    keep[tree.cubes[root].members] = True
    bad = []
    for cid in tree.descendants(root):
        mass = tree.mass(cid)
        if tree.mass(cid, F) < (1 - 2 * eps) * mass * (1 - 1e-12):
            bad.append(cid)
            keep[tree.cubes[cid].members] = False
    members = np.flatnonzero(keep)
    return RTildeResult(members, float(tree.space.weights[members].sum()), total, eps, bad)


class JNSReport(BaseModel):
    root: int
    N: int
    eta: float
    integral: float
    bound: float | None
    packing: float

    @property
    def holds(self) -> bool | None:
        if self.bound is None:
            return None
        return self.integral <= self.bound * (1 + 1e-12)


def _bad_counts(tree: CubeTree, root: int, bad: set[int], k_hi: int) -> np.ndarray:
    """N_R(x): bad cubes of R's subtree containing x, per point of R."""
    counts = np.zeros(tree.space.n_points, dtype=np.int64)
    for cid in _subtree(tree, root, k_hi):
        if cid in bad:
            counts[tree.cubes[cid].members] += 1
    return counts


def jns_audit(tree: CubeTree, field, eps: float, root: int, N: int, k_hi: int | None = None) -> JNSReport:
    """
    Indicator field a_Q = [beta(Q) > eps]. With eta the smallest fraction of
    any sub-root S whose points lie in at most N bad cubes of S,

        integral over R of N_R  <=  (N + 1) / eta * mass(R).
    """
    values = field_values(field)
    k_hi = resolved_band(tree, values)[1] if k_hi is None else k_hi
    ids = _subtree(tree, root, k_hi)
    holes = _holes(values, ids)
    if holes:
        raise CoverageError(f"{len(holes)} cubes under root {root} have no value", stage="audit",
                            cause="holes", holes=holes)
    bad = {c for c in ids if values[c] > eps}
    w = tree.space.weights
    eta = 1.0
    for sub in ids:
        members = tree.cubes[sub].members
        counts = _bad_counts(tree, sub, bad, k_hi)[members]
        frac = float(w[members][counts <= N].sum() / w[members].sum())
        eta = min(eta, frac)
    members = tree.cubes[root].members
    counts = _bad_counts(tree, root, bad, k_hi)[members]
    mass = float(w[members].sum())
    integral = float((counts * w[members]).sum() / mass)
    bound = (N + 1) / eta if eta > 0 else None
    return JNSReport(root=root, N=N, eta=eta, integral=integral, bound=bound,
                     packing=packing_sum(tree, values, eps, root, k_hi))
