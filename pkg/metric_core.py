"""
Finite metric-measure samples.

A MetricSpaceSample is a weighted point set with a distance oracle. The
weights stand in for n-dimensional Hausdorff measure, so ball masses are
sums of weights over closed balls. Three metric sources are supported:
ambient coordinates under an l2 or linf norm, an explicit distance matrix,
and a snowflake power d**s of either of those.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.distance import cdist, pdist

from errors import DomainError

logger = logging.getLogger(__name__)

# Above this many points the full distance matrix is never materialized.
MATERIALIZE_LIMIT = 20000

AMBIENT_NORMS = {"l2": ("euclidean", 2.0), "linf": ("chebyshev", np.inf)}


class MetricSpaceSample:
    """
    Weighted point set with a metric oracle.

    `coords` is only exposed for genuine ambient metrics. A snowflake of an
    ambient space keeps its generating coordinates privately (for k-d tree
    ball queries and for serialization) but is abstract to callers.
    """

    def __init__(self, weights, dim_n: int, coords=None, matrix=None,
                 ambient_norm: str = "l2", exponent: float = 1.0,
                 boundary_distance=None, name: str = "space"):
        weights = np.asarray(weights, dtype=float).ravel()
        if weights.size == 0:
            raise DomainError("a space needs at least one point")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise DomainError("weights must be finite and strictly positive")
        if dim_n < 0:
            raise DomainError(f"homogeneity exponent must be nonnegative, got {dim_n}")
        if ambient_norm not in AMBIENT_NORMS:
            raise DomainError(f"unknown ambient norm '{ambient_norm}'")
        if not 0 < exponent <= 1:
            raise DomainError(f"snowflake exponent must lie in (0,1], got {exponent}")
        if (coords is None) == (matrix is None):
            raise DomainError("provide exactly one of coords or matrix")

        self.name = name
        self.weights = weights
        self.dim_n = int(dim_n)
        self.ambient_norm = ambient_norm
        self.exponent = float(exponent)
        self._base_coords = None
        self._matrix = None
        if coords is not None:
            coords = np.asarray(coords, dtype=float)
            if coords.ndim == 1:
                coords = coords[:, None]
            if coords.shape[0] != weights.size:
                raise DomainError(f"{coords.shape[0]} coordinates for {weights.size} weights")
            self._base_coords = coords
        else:
            matrix = np.asarray(matrix, dtype=float)
            if matrix.shape != (weights.size, weights.size):
                raise DomainError(f"distance matrix shape {matrix.shape} does not match {weights.size} points")
            if np.any(matrix < 0) or np.any(np.diag(matrix) != 0):
                raise DomainError("distance matrix must be nonnegative with zero diagonal")
            if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12):
                raise DomainError("distance matrix is not symmetric")
            self._matrix = matrix

        if boundary_distance is None:
            boundary_distance = np.full(weights.size, np.inf)
        self.boundary_distance = np.asarray(boundary_distance, dtype=float)
        self.chart = None
        self.extras: dict = {}
        self._kdtree = None
        self._diameter = None
        self._spacing = None

    # ----- basic shape -------------------------------------------------

    def __len__(self) -> int:
        return self.weights.size

    @property
    def n_points(self) -> int:
        return self.weights.size

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def coords(self):
        return self._base_coords if self.exponent == 1.0 else None

    @property
    def has_coords(self) -> bool:
        return self.coords is not None

    @property
    def metric_tag(self) -> str:
        if self.exponent != 1.0:
            return f"snowflake({self.exponent:g})"
        return "ambient" if self._base_coords is not None else "matrix"

    def _check_index(self, i) -> int:
        i = int(i)
        if not 0 <= i < self.n_points:
            raise DomainError(f"point index {i} outside [0, {self.n_points})")
        return i

    # ----- distances ---------------------------------------------------

    def _base_rows(self, a_coords, b_coords):
        metric, _ = AMBIENT_NORMS[self.ambient_norm]
        return cdist(a_coords, b_coords, metric=metric)

    def pairwise(self, a_idx, b_idx=None) -> np.ndarray:
        a_idx = np.atleast_1d(np.asarray(a_idx, dtype=int))
        b_idx = a_idx if b_idx is None else np.atleast_1d(np.asarray(b_idx, dtype=int))
        if self._matrix is not None:
            out = self._matrix[np.ix_(a_idx, b_idx)]
        else:
            out = self._base_rows(self._base_coords[a_idx], self._base_coords[b_idx])
        return out ** self.exponent if self.exponent != 1.0 else out

    def paired(self, a_idx, b_idx) -> np.ndarray:
        """d(a_k, b_k) for two equal-length index arrays."""
        a_idx, b_idx = np.asarray(a_idx, dtype=int), np.asarray(b_idx, dtype=int)
        if self._matrix is not None:
            out = self._matrix[a_idx, b_idx]
        else:
            _, p = AMBIENT_NORMS[self.ambient_norm]
            out = np.linalg.norm(self._base_coords[a_idx] - self._base_coords[b_idx], ord=p, axis=1)
        return out ** self.exponent if self.exponent != 1.0 else out

    def distances_from(self, i, idx=None) -> np.ndarray:
        i = self._check_index(i)
        if idx is None:
            if self._matrix is not None:
                row = self._matrix[i]
                return row ** self.exponent if self.exponent != 1.0 else row.copy()
            idx = np.arange(self.n_points)
        return self.pairwise([i], idx)[0]

    def distance(self, i, j) -> float:
        j = self._check_index(j)
        return float(self.distances_from(i, [j])[0])

    def distance_matrix(self) -> np.ndarray:
        if self.n_points > MATERIALIZE_LIMIT:
            raise DomainError(f"refusing to materialize {self.n_points}² distances")
        if self._matrix is not None and self.exponent == 1.0:
            return self._matrix
        return self.pairwise(np.arange(self.n_points))

    # ----- balls -------------------------------------------------------

    def _tree(self):
        if self._kdtree is None and self._base_coords is not None:
            self._kdtree = cKDTree(self._base_coords)
        return self._kdtree

    def ball_indices(self, center, r: float, idx=None) -> np.ndarray:
        """Indices of points at distance <= r from `center` (closed ball)."""
        center = self._check_index(center)
        if r < 0:
            raise DomainError(f"radius must be nonnegative, got {r}")
        tree = self._tree()
        if tree is not None and idx is None:
            # k-d tree on the generating coordinates, exact filter afterwards
            base_r = r ** (1.0 / self.exponent)
            _, p = AMBIENT_NORMS[self.ambient_norm]
            cand = np.asarray(tree.query_ball_point(self._base_coords[center], base_r * (1 + 1e-9) + 1e-300, p=p),
                              dtype=int)
            cand.sort()
            d = self.distances_from(center, cand)
            return cand[d <= r]
        idx = np.arange(self.n_points) if idx is None else np.asarray(idx, dtype=int)
        d = self.distances_from(center, idx)
        return idx[d <= r]

    def ball_mass(self, center, r: float, mask=None) -> float:
        members = self.ball_indices(center, r)
        if mask is not None:
            members = members[np.asarray(mask, dtype=bool)[members]]
        return float(self.weights[members].sum())

    def ball_profile(self, center, radii, mask=None, reach: float | None = None) -> np.ndarray:
        """
        Closed-ball masses around one center for many radii at once.

        A single sorted distance row serves every radius. `reach` bounds the
        candidate set when the largest radius is known to be small.
        """
        radii = np.asarray(radii, dtype=float)
        if np.any(radii < 0):
            raise DomainError("radii must be nonnegative")
        reach = float(radii.max()) if reach is None else reach
        members = self.ball_indices(center, reach)
        if mask is not None:
            members = members[np.asarray(mask, dtype=bool)[members]]
        if members.size == 0:
            return np.zeros_like(radii)
        d = self.distances_from(center, members)
        order = np.argsort(d, kind="stable")
        cum = np.concatenate([[0.0], np.cumsum(self.weights[members][order])])
        return cum[np.searchsorted(d[order], radii, side="right")]

    # ----- global scales -----------------------------------------------

    def diameter(self) -> float:
        if self._diameter is None:
            self._diameter = self._compute_diameter()
        return self._diameter

    def _compute_diameter(self) -> float:
        if self.n_points == 1:
            return 0.0
        if self._matrix is not None:
            return float(self._matrix.max()) ** self.exponent
        pts = self._base_coords
        if self.ambient_norm == "linf":
            base = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
        elif pts.shape[1] == 1:
            base = float(pts.max() - pts.min())
        else:
            if self.n_points > 3000:
                try:
                    pts = pts[ConvexHull(pts).vertices]
                except Exception:
                    logger.debug("convex hull failed, falling back to the full point set")
            base = float(pdist(pts).max())
        return base ** self.exponent

    def min_spacing(self) -> float:
        if self._spacing is None:
            if self.n_points == 1:
                self._spacing = 0.0
            elif self._matrix is not None:
                off = self._matrix + np.diag(np.full(self.n_points, np.inf))
                self._spacing = float(off.min()) ** self.exponent
            else:
                _, p = AMBIENT_NORMS[self.ambient_norm]
                d, _ = self._tree().query(self._base_coords, k=2, p=p)
                self._spacing = float(d[:, 1].min()) ** self.exponent
        return self._spacing

    # ----- transforms and checks ---------------------------------------

    def snowflake(self, s: float) -> "MetricSpaceSample":
        if not 0 < s <= 1:
            raise DomainError(f"snowflake exponent must lie in (0,1], got {s}")
        out = MetricSpaceSample(
            self.weights.copy(), self.dim_n,
            coords=self._base_coords, matrix=self._matrix,
            ambient_norm=self.ambient_norm, exponent=self.exponent * s,
            boundary_distance=self.boundary_distance ** s, name=f"{self.name}^{s:g}",
        )
        return out

    def check_metric_axioms(self, n_triples: int = 2000, seed: int = 0, tol: float = 1e-12) -> int:
        """Number of violated metric axioms over exhaustive or sampled triples."""
        n = self.n_points
        if n ** 3 <= max(n_triples, 1_000_000) and n <= 100:
            D = self.distance_matrix()
            bad = int(np.sum(D < -tol)) + int(np.sum(np.abs(D - D.T) > tol)) + int(np.sum(np.abs(np.diag(D)) > tol))
            # D[i,k] <= D[i,j] + D[j,k] for all i, j, k
            excess = D[:, None, :] - D[:, :, None] - D[None, :, :]
            bad += int(np.sum(excess > tol * (1 + D.max())))
            return bad
        rng = np.random.default_rng(seed)
        tri = rng.integers(0, n, size=(n_triples, 3))
        bad = 0
        for i, j, k in tri:
            dij, djk, dik = self.distance(i, j), self.distance(j, k), self.distance(i, k)
            bad += int(dik > dij + djk + tol * (1 + dik))
            bad += int(abs(dij - self.distance(j, i)) > tol)
        return bad

    # ----- serialization -----------------------------------------------

    def to_json(self, path) -> None:
        path = Path(path)
        doc = {
            "name": self.name,
            "points": self.n_points,
            "n": self.dim_n,
            "metric": self.metric_tag,
            "ambient_norm": self.ambient_norm,
            "weights": self.weights.tolist(),
            "boundary_distance": [None if not np.isfinite(b) else float(b) for b in self.boundary_distance],
        }
        if self._base_coords is not None:
            doc["coords"] = self._base_coords.tolist()
        else:
            matrix_file = path.with_suffix(".dist")
            write_distance_matrix(matrix_file, self._matrix)
            doc["matrix_file"] = matrix_file.name
        if self.extras:
            doc["extras"] = self.extras
        path.write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "MetricSpaceSample":
        path = Path(path)
        doc = json.loads(path.read_text())
        metric = doc.get("metric", "ambient")
        exponent = 1.0
        if metric.startswith("snowflake("):
            exponent = float(metric[len("snowflake("):-1])
        elif metric not in ("ambient", "matrix"):
            raise DomainError(f"unknown metric tag '{metric}'")
        matrix = None
        if "coords" not in doc:
            matrix = read_distance_matrix(path.parent / doc["matrix_file"])
        bd = doc.get("boundary_distance")
        if bd is not None:
            bd = [np.inf if b is None else b for b in bd]
        space = cls(doc["weights"], doc["n"], coords=doc.get("coords"), matrix=matrix,
                    ambient_norm=doc.get("ambient_norm", "l2"), exponent=exponent,
                    boundary_distance=bd, name=doc.get("name", path.stem))
        space.extras = doc.get("extras", {})
        return space


def write_distance_matrix(path, matrix) -> None:
    """Little-endian float64 row-major with an 8-byte point-count header."""
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", matrix.shape[0]))
        fh.write(matrix.tobytes(order="C"))


def read_distance_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != count * count:
        raise DomainError(f"{os.fspath(path)}: expected {count * count} entries, found {data.size}")
    return data.reshape(count, count).astype(float)


def ball_mass(space: MetricSpaceSample, center, r: float) -> float:
    return space.ball_mass(center, r)


def snowflake_transform(space: MetricSpaceSample, s: float) -> MetricSpaceSample:
    return space.snowflake(s)


class ScaleRow(BaseModel):
    r: float
    min_ratio: float
    max_ratio: float
    flagged: bool = False
    degenerate: bool = False


class RegularityReport(BaseModel):
    """Empirical Ahlfors constants c_lower r^n <= mass(B(x,r)) <= c_upper r^n."""

    n: int
    c_lower: float
    c_upper: float
    scale_range: tuple[float, float]
    doubling_estimate: float = Field(ge=1.0)
    per_scale: list[ScaleRow]
    flagged_scales: list[float] = []
    degenerate: bool = False


def ahlfors_scan(space: MetricSpaceSample, n: int, centers, scales,
                 deviation_factor: float = 4.0) -> RegularityReport:
    scales = np.sort(np.asarray(list(scales), dtype=float))
    if scales.size == 0:
        raise DomainError("ahlfors_scan needs at least one scale")
    if np.any(scales <= 0):
        raise DomainError("scales must be positive")
    centers = np.asarray(list(centers), dtype=int)
    if centers.size == 0:
        raise DomainError("ahlfors_scan needs at least one center")

    radii = np.concatenate([scales, 2 * scales])
    masses = np.array([space.ball_profile(c, radii) for c in centers])
    single, double = masses[:, :scales.size], masses[:, scales.size:]
    ratios = single / scales ** n
    doubling = float(np.max(double / single))

    rows = []
    flagged = []
    any_degenerate = False
    for k, r in enumerate(scales):
        lo, hi = float(ratios[:, k].min()), float(ratios[:, k].max())
        # every ball is just its center: the scale is below the sample resolution
        degenerate = bool(np.all(np.isclose(single[:, k], space.weights[centers])))
        is_flagged = lo <= 0 or hi / lo > deviation_factor
        if is_flagged:
            flagged.append(float(r))
        any_degenerate |= degenerate
        rows.append(ScaleRow(r=float(r), min_ratio=lo, max_ratio=hi, flagged=is_flagged, degenerate=degenerate))
    if any_degenerate:
        logger.warning(f"ahlfors_scan on {space.name}: scales below the sample resolution")

    return RegularityReport(
        n=n,
        c_lower=float(ratios.min()),
        c_upper=float(ratios.max()),
        scale_range=(float(scales[0]), float(scales[-1])),
        doubling_estimate=max(1.0, doubling),
        per_scale=rows,
        flagged_scales=flagged,
        degenerate=any_degenerate,
    )


def doubling_estimate(space: MetricSpaceSample, n_centers: int = 64, n_scales: int = 12, seed: int = 0) -> float:
    """Largest mass(B(x,2r)) / mass(B(x,r)) over sampled centers and r in [2 spacing, diam]."""
    lo, hi = 2 * space.min_spacing(), space.diameter()
    if not 0 < lo < hi:
        return 1.0
    rng = np.random.default_rng(seed)
    centers = rng.choice(space.n_points, size=min(n_centers, space.n_points), replace=False)
    report = ahlfors_scan(space, space.dim_n, np.sort(centers), np.geomspace(lo, hi, n_scales))
    return report.doubling_estimate
