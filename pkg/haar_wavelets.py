"""
Dyadic Haar analysis of piecewise-constant functions on a root cube Q0.

A GridFunction holds h at a fixed raster level J, so every mean, every
martingale difference and every energy below is exact rather than a
quadrature. Cubes are addressed as (level, index) with index in
{0, ..., 2^level - 1}^n.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gamma

from errors import DomainError, SandwichRateError

logger = logging.getLogger(__name__)


def _coarsen(a: np.ndarray, op=np.mean) -> np.ndarray:
    """Combine 2^n sibling blocks into their parent."""
    n = a.ndim
    shape = tuple(itertools.chain.from_iterable((s // 2, 2) for s in a.shape))
    return op(a.reshape(shape), axis=tuple(range(1, 2 * n, 2)))


def _block_view(a: np.ndarray, level: int) -> np.ndarray:
    """(cubes, cells-per-cube) view of `a` grouped by the level-`level` cubes."""
    n = a.ndim
    m = a.shape[0] >> level
    shape = tuple(itertools.chain.from_iterable((2 ** level, m) for _ in range(n)))
    perm = tuple(range(0, 2 * n, 2)) + tuple(range(1, 2 * n, 2))
    return a.reshape(shape).transpose(perm).reshape(2 ** (level * n), m ** n)


def _block_sum(a: np.ndarray, factor: int) -> np.ndarray:
    n = a.ndim
    shape = tuple(itertools.chain.from_iterable((s // factor, factor) for s in a.shape))
    return a.reshape(shape).sum(axis=tuple(range(1, 2 * n, 2)))


def unit_ball_volume(n: int) -> float:
    return float(np.pi ** (n / 2) / gamma(n / 2 + 1))


class GridFunction:
    """Piecewise-constant h on the level-J dyadic cells of Q0."""

    def __init__(self, values, corner, side: float, sup_bound: float | None = None):
        values = np.asarray(values, dtype=float)
        m = values.shape[0]
        if any(s != m for s in values.shape) or m & (m - 1):
            raise DomainError(f"values must be a (2^J,)*n array, got shape {values.shape}")
        self.values = values
        self.n = values.ndim
        self.J = m.bit_length() - 1
        self.corner = np.atleast_1d(np.asarray(corner, dtype=float))
        self.side = float(side)
        self.sup_bound = float(np.abs(values).max()) if sup_bound is None else float(sup_bound)
        if np.abs(values).max() > self.sup_bound * (1 + 1e-12):
            raise DomainError("values exceed the declared sup bound")
        self._means = None
        self._deltas = None

    @property
    def cell_side(self) -> float:
        return self.side * 2.0 ** (-self.J)

    @property
    def cell_volume(self) -> float:
        return self.cell_side ** self.n

    def cube_side(self, level: int) -> float:
        return self.side * 2.0 ** (-level)

    def cell_centers(self) -> np.ndarray:
        axis = (np.arange(2 ** self.J) + 0.5) * self.cell_side
        grids = np.meshgrid(*([axis] * self.n), indexing="ij")
        return np.stack(grids, axis=-1) + self.corner

    def means(self, level: int) -> np.ndarray:
        if self._means is None:
            pyramid = [self.values]
            for _ in range(self.J):
                pyramid.append(_coarsen(pyramid[-1]))
            self._means = pyramid[::-1]
        return self._means[level]

    def delta_norms_sq(self, level: int) -> np.ndarray:
        """||Delta_Q h||^2 for every level-`level` cube Q (level < J)."""
        if not 0 <= level < self.J:
            raise DomainError(f"no martingale difference at level {level} (J={self.J})")
        if self._deltas is None:
            self._deltas = {}
        if level not in self._deltas:
            child = self.means(level + 1)
            parent = np.kron(self.means(level), np.ones((2,) * self.n))
            vol = self.cube_side(level + 1) ** self.n
            self._deltas[level] = _coarsen((child - parent) ** 2, op=np.sum) * vol
        return self._deltas[level]

    def l2_sq(self, other=None) -> float:
        other = self.values if other is None else other
        return float(np.sum(self.values * other) * self.cell_volume)

    def check_cube(self, level: int, index) -> tuple[int, ...]:
        index = tuple(int(i) for i in np.atleast_1d(index))
        if len(index) != self.n or not 0 <= level <= self.J or any(not 0 <= i < 2 ** level for i in index):
            raise DomainError(f"cube ({level}, {index}) outside Q0")
        return index

    def cube_slices(self, level: int, index) -> tuple[slice, ...]:
        m = 2 ** (self.J - level)
        return tuple(slice(i * m, (i + 1) * m) for i in index)

    def save(self, stem) -> None:
        """Flat little-endian float64 cells plus a JSON sidecar."""
        stem = Path(stem)
        self.values.astype("<f8").tofile(stem.with_suffix(".bin"))
        meta = {"n": self.n, "J": self.J, "Q0": {"corner": self.corner.tolist(), "side": self.side},
                "M": self.sup_bound}
        stem.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, stem) -> "GridFunction":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        values = np.fromfile(stem.with_suffix(".bin"), dtype="<f8").reshape((2 ** meta["J"],) * meta["n"])
        return cls(values, meta["Q0"]["corner"], meta["Q0"]["side"], sup_bound=meta["M"])


# ----- differences and energies -------------------------------------------

def haar_delta(h: GridFunction, level: int, index) -> GridFunction:
    """Delta_Q h: child mean minus the mean over Q on each child, zero off Q."""
    index = h.check_cube(level, index)
    if level >= h.J:
        raise DomainError(f"cube at the finest level {h.J} has no children")
    out = np.zeros_like(h.values)
    children = tuple(slice(2 * i, 2 * i + 2) for i in index)
    diff = h.means(level + 1)[children] - h.means(level)[index]
    m = 2 ** (h.J - level - 1)
    out[h.cube_slices(level, index)] = np.kron(diff, np.ones((m,) * h.n))
    return GridFunction(out, h.corner, h.side, sup_bound=2 * h.sup_bound)


def energy_levels(h: GridFunction, k: int) -> dict[int, np.ndarray]:
    """Delta_k^h(Q)^2 for every cube with k generations available below it."""
    if k < 0:
        raise DomainError("k must be nonnegative")
    out = {}
    for level in range(0, h.J - k):
        total = np.zeros((2 ** level,) * h.n)
        for i in range(k + 1):
            total += _block_sum(h.delta_norms_sq(level + i), 2 ** i)
        out[level] = total
    return out


def delta_k_energy(h: GridFunction, level: int, index, k: int) -> float:
    index = h.check_cube(level, index)
    if k < 0 or level + k > h.J - 1:
        raise DomainError(f"k={k} too deep for a level-{level} cube (J={h.J})")
    total = 0.0
    for i in range(k + 1):
        m = 2 ** i
        block = tuple(slice(q * m, (q + 1) * m) for q in index)
        total += float(h.delta_norms_sq(level + i)[block].sum())
    return total


def parseval_gap(h: GridFunction) -> float:
    """||h - mean||^2 minus the sum of all ||Delta_Q h||^2 (zero up to rounding)."""
    centered = h.values - h.means(0).item()
    lhs = float(np.sum(centered ** 2) * h.cell_volume)
    rhs = sum(float(h.delta_norms_sq(j).sum()) for j in range(h.J))
    return lhs - rhs


def wavelet_carleson_sums(h: GridFunction, k: int, delta: float | None = None) -> dict[str, float]:
    """Both sides of the strong wavelet Carleson bound, and of its Chebyshev weak form."""
    energies = energy_levels(h, k)
    strong = sum(float(e.sum()) for e in energies.values())
    out = {
        "strong_sum": strong,
        "strong_bound": (k + 1) * h.sup_bound ** 2 * h.side ** h.n,
    }
    if delta is not None:
        weak = sum(float(np.count_nonzero(e > delta * h.cube_side(j) ** h.n)) * h.cube_side(j) ** h.n
                   for j, e in energies.items())
        out["weak_sum"] = weak
        out["weak_bound"] = strong / delta
    return out


def mean_over_set(h: GridFunction, E) -> float:
    E = np.asarray(E, dtype=bool)
    if E.shape != h.values.shape:
        raise DomainError(f"set raster shape {E.shape} does not match {h.values.shape}")
    if not E.any():
        raise DomainError("mean over an empty set")
    return float(h.values[E].mean())


# ----- families of sets ----------------------------------------------------

def unit_cell_centers(n: int, m: int) -> np.ndarray:
    axis = (np.arange(m) + 0.5) / m
    return np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)


def raster_ball(h: GridFunction, center, radius: float, norm=None) -> np.ndarray:
    """Cells of h whose centers lie in the closed ball; `norm` maps (k, n) -> (k,)."""
    norm = norm or (lambda x: np.linalg.norm(x, axis=1))
    pts = h.cell_centers().reshape(-1, h.n)
    return (norm(pts - np.asarray(center, dtype=float)) <= radius).reshape(h.values.shape)


@dataclass
class NormedBallFamily:
    """
    Balls B(c, r) of norms in the dictionary, radius >= 1/L, inside [0,1]^n.

    Members are rasterized on the cell centers of a unit cube with m cells
    per axis; transported to a cube Q they become T_Q(E).
    """

    L: float = 4.0
    radii: tuple[float, ...] = (0.25, 0.35, 0.45)
    centers_per_axis: int = 3
    norms: list = field(default_factory=lambda: [lambda x: np.linalg.norm(x, axis=1)])

    def volume_floor(self, n: int) -> float:
        return 0.5 * unit_ball_volume(n) * self.L ** (-2 * n)

    def members(self, n: int, m: int) -> tuple[list[np.ndarray], int]:
        pts = unit_cell_centers(n, m)
        dirs = _unit_directions(n)
        masks, rejected = [], 0
        for norm in self.norms:
            reach = 1.0 / norm(dirs).min()
            for r in self.radii:
                if r < 1 / self.L:
                    continue
                lo, hi = r * reach, 1 - r * reach
                if lo > hi:
                    continue
                grid = np.linspace(lo, hi, self.centers_per_axis) if self.centers_per_axis > 1 else [0.5]
                for c in itertools.product(grid, repeat=n):
                    mask = norm(pts - np.asarray(c)) <= r
                    if mask.mean() < self.volume_floor(n):
                        rejected += 1
                        continue
                    masks.append(mask)
        if rejected:
            logger.warning(f"{rejected} family members below the volume floor at {m} cells per axis")
        return masks, rejected


def sheared_ball(pts: np.ndarray, center, radius: float, shear: float) -> np.ndarray:
    """Points of the image of B(center, radius) under x -> x + shear sin(pi x_0) e_1."""
    back = np.array(pts, dtype=float)
    if back.shape[1] > 1:
        back[:, 1] -= shear * np.sin(np.pi * back[:, 0])
    return np.linalg.norm(back - np.asarray(center, dtype=float), axis=1) <= radius


@dataclass
class BiLipImageFamily(NormedBallFamily):
    """Images of Euclidean balls under the shears x -> x + s sin(pi x_0) e_1."""

    shears: tuple[float, ...] = (0.0, 0.1, 0.2)

    def members(self, n: int, m: int) -> tuple[list[np.ndarray], int]:
        pts = unit_cell_centers(n, m)
        masks, rejected = [], 0
        for s in self.shears:
            for r in self.radii:
                if r < 1 / self.L:
                    continue
                lo, hi = r + s, 1 - r - s
                if lo > hi:
                    continue
                grid = np.linspace(lo, hi, self.centers_per_axis) if self.centers_per_axis > 1 else [0.5]
                for c in itertools.product(grid, repeat=n):
                    mask = sheared_ball(pts, c, r, s)
                    if mask.mean() < self.volume_floor(n):
                        rejected += 1
                        continue
                    masks.append(mask)
        return masks, rejected


def _unit_directions(n: int, count: int = 256) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        t = np.linspace(0, 2 * np.pi, count, endpoint=False)
        return np.column_stack([np.cos(t), np.sin(t)])
    rng = np.random.default_rng(0)
    v = rng.normal(size=(count * 4, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class BadCubeReport:
    side: float
    n: int
    eps: float
    bad: list[tuple[int, tuple[int, ...], float]]
    members_used: dict[int, int]
    rejected: int
    split_covers: bool
    corner: np.ndarray = None

    def packing(self, level: int = 0, index=None) -> float:
        """Sum of l(Q)^n over bad Q inside the given root, over l(root)^n."""
        index = tuple(index) if index is not None else (0,) * self.n
        total = 0.0
        for q_level, q_index, _ in self.bad:
            if q_level < level:
                continue
            shift = q_level - level
            if tuple(i >> shift for i in q_index) == index:
                total += 2.0 ** (-q_level * self.n)
        return total / 2.0 ** (-level * self.n)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", "corner", "value"])
            for level, index, value in self.bad:
                corner = self.corner + self.side * 2.0 ** (-level) * np.asarray(index)
                writer.writerow([level, " ".join(f"{c:.12g}" for c in corner), f"{value:.12g}"])


def _cube_deviations(h: np.ndarray, level: int, masks: list[np.ndarray]) -> np.ndarray:
    blocks = _block_view(h, level)
    base = blocks.mean(axis=1)
    dev = np.zeros(blocks.shape[0])
    for mask in masks:
        dev = np.maximum(dev, np.abs(blocks[:, mask].mean(axis=1) - base))
    return dev


def oscillation_bad_cubes(h: GridFunction, family: NormedBallFamily, eps: float,
                          levels=None, min_cells: int = 4) -> BadCubeReport:
    """Cubes Q where some family member E has |mean_E h - mean_Q h| > eps."""
    if levels is None:
        levels = [j for j in range(h.J + 1) if 2 ** (h.J - j) >= min_cells]
    pos, neg = np.maximum(h.values, 0), np.maximum(-h.values, 0)
    bad, used, rejected = [], {}, 0
    split_covers = True
    for j in levels:
        m = 2 ** (h.J - j)
        masks, rej = family.members(h.n, m)
        rejected += rej
        used[j] = len(masks)
        if not masks:
            continue
        flat = [mask.reshape(-1) for mask in masks]
        dev = _cube_deviations(h.values, j, flat)
        split = (_cube_deviations(pos, j, flat) > eps / 2) | (_cube_deviations(neg, j, flat) > eps / 2)
        is_bad = dev > eps
        split_covers &= bool(np.all(split[is_bad]))
        for flat_index in np.flatnonzero(is_bad):
            index = np.unravel_index(flat_index, (2 ** j,) * h.n)
            bad.append((j, tuple(int(i) for i in index), float(dev[flat_index])))
    return BadCubeReport(h.side, h.n, eps, bad, used, rejected, split_covers, corner=h.corner)


@dataclass
class EmpiricalPair:
    k: int
    delta: float
    bad_cubes: int
    cubes: int


def empirical_k_delta(h: GridFunction, family: NormedBallFamily, eps: float, k_values=(1, 2, 3),
                      min_cells: int = 4) -> list[EmpiricalPair]:
    """
    For each k, a delta such that Delta_k^h(Q)^2 <= delta l(Q)^n forces every
    member mean within eps of the cube mean, on this h and family.
    """
    out = []
    for k in k_values:
        energies = energy_levels(h, k)
        ratios, flags = [], []
        for j, e in energies.items():
            m = 2 ** (h.J - j)
            if m < min_cells:
                continue
            masks, _ = family.members(h.n, m)
            if not masks:
                continue
            dev = _cube_deviations(h.values, j, [mask.reshape(-1) for mask in masks])
            ratios.append(e.reshape(-1) / h.cube_side(j) ** h.n)
            flags.append(dev > eps)
        if not ratios:
            continue
        ratios, flags = np.concatenate(ratios), np.concatenate(flags)
        delta = 0.5 * float(ratios[flags].min()) if flags.any() else np.inf
        out.append(EmpiricalPair(k, delta, int(flags.sum()), int(flags.size)))
    return out


# ----- sandwiching ---------------------------------------------------------

@dataclass
class SandwichFamily:
    members: list[np.ndarray]
    lower: dict[float, np.ndarray]
    upper: dict[float, np.ndarray]
    start: dict[float, int]

    def verify(self) -> dict[str, bool]:
        eps_sorted = sorted(self.lower)
        monotone = all(
            np.all(self.lower[b] <= self.lower[a]) and np.all(self.upper[a] <= self.upper[b])
            for a, b in zip(eps_sorted, eps_sorted[1:])
        )
        ratio = all(
            self.upper[e].sum() == 0 or self.lower[e].sum() / self.upper[e].sum() >= 1 - e - 1e-12
            for e in eps_sorted
        )
        contain = all(
            np.all(self.lower[e] <= m) and np.all(m <= self.upper[e])
            for e in eps_sorted for m in self.members[self.start[e]:]
        )
        return {"monotone": bool(monotone), "mass_ratio": bool(ratio), "containment": bool(contain)}


def sandwich_construct(sets, eps_values=(0.05, 0.1, 0.2, 0.4)) -> SandwichFamily:
    """
    L_eps = intersection and U_eps = union of the tail E_j, j >= j0(eps),
    with j0 the first tail whose lower/upper mass ratio reaches 1 - eps.
    """
    members = [np.asarray(s, dtype=bool) for s in sets]
    if not members:
        raise DomainError("sandwich_construct needs at least one set")
    for i, a in enumerate(members):
        for j in range(i + 1, len(members)):
            d = float(np.mean(a ^ members[j]))
            if d > 2.0 ** (-i) + 1e-12:
                raise SandwichRateError(f"sets {i} and {j} differ by {d:.4g} > 2^-{i}",
                                        pair=(i, j), distance=d, bound=2.0 ** (-i))

    tails_lower, tails_upper = [None] * len(members), [None] * len(members)
    lo, up = members[-1].copy(), members[-1].copy()
    for j in range(len(members) - 1, -1, -1):
        lo &= members[j]
        up |= members[j]
        tails_lower[j], tails_upper[j] = lo.copy(), up.copy()

    lower, upper, start = {}, {}, {}
    for eps in sorted(eps_values):
        if not 0 < eps < 1:
            raise DomainError(f"eps must lie in (0,1), got {eps}")
        for j in range(len(members)):
            u = tails_upper[j].sum()
            if u == 0 or tails_lower[j].sum() / u >= 1 - eps:
                break
        lower[eps], upper[eps], start[eps] = tails_lower[j], tails_upper[j], j
    return SandwichFamily(members, lower, upper, start)


# ----- chart densities -----------------------------------------------------

def density_raster(params, weights, corner, side: float, J: int, mask=None) -> GridFunction:
    """
    Pushforward density of sample weights onto the level-J cells of the cube
    [corner, corner + side): each cell holds its weight total over its volume.
    """
    params = np.asarray(params, dtype=float)
    if params.ndim == 1:
        params = params[:, None]
    corner = np.atleast_1d(np.asarray(corner, dtype=float))
    n = corner.size
    weights = np.asarray(weights, dtype=float)
    keep = np.all((params >= corner) & (params < corner + side), axis=1)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    m = 2 ** J
    cells = np.floor((params[keep] - corner) / side * m).astype(int).clip(0, m - 1)
    values = np.zeros((m,) * n)
    np.add.at(values, tuple(cells.T), weights[keep])
    values /= (side / m) ** n
    return GridFunction(values, corner, side)
