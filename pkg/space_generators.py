"""
Deterministic test spaces with known geometry.

Every generator is a pure function of its GeneratorSpec. Chart-based kinds
also attach a Chart: the sampled parametrization g of the space by a cube of
R^n, with its nominal bi-Lipschitz constant.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, field_validator, model_validator
from scipy.spatial.distance import cdist

from errors import DomainError
from metric_core import AMBIENT_NORMS, MetricSpaceSample

logger = logging.getLogger(__name__)


# ----- charts -------------------------------------------------------------

def _pad(u, d):
    out = np.zeros((u.shape[0], d))
    out[:, :u.shape[1]] = u
    return out


def _sine_graph(u, d, amplitude):
    out = np.zeros((u.shape[0], d))
    out[:, 0] = u[:, 0]
    out[:, 1] = amplitude * np.sin(2 * np.pi * u[:, 0])
    return out


def _circle_arc(u, d, radius):
    out = np.zeros((u.shape[0], d))
    out[:, 0] = radius * np.cos(u[:, 0] / radius)
    out[:, 1] = radius * np.sin(u[:, 0] / radius)
    return out


# Closed dictionary of chart formulas. Each entry maps parameters u (k, n)
# into ambient coordinates (k, d); `exponent` is the snowflake power applied
# to the ambient distance.
CHART_REGISTRY = {
    "identity": {
        "formula": lambda u, spec: _pad(u, spec.d),
        "L": lambda spec: 1.0,
        "exponent": 1.0,
    },
    "snowflake_line": {
        "formula": lambda u, spec: u.copy(),
        "L": lambda spec: None,
        "exponent": None,
    },
    "sine_graph": {
        "formula": lambda u, spec: _sine_graph(u, spec.d, 0.3),
        "L": lambda spec: float(np.sqrt(1 + (0.6 * np.pi) ** 2)),
        "exponent": 1.0,
    },
    "bilip_wave": {
        # slope 0.66 at most, so the graph map is 1.2-bi-Lipschitz
        "formula": lambda u, spec: _sine_graph(u, spec.d, 0.66 / (2 * np.pi)),
        "L": lambda spec: 1.2,
        "exponent": 1.0,
    },
    "circle_arc": {
        "formula": lambda u, spec: _circle_arc(u, spec.d, spec.radius),
        "L": lambda spec: float(np.pi / 2),
        "exponent": 1.0,
    },
}


class Chart:
    """Sampled map g from a parameter box of R^n into the space."""

    def __init__(self, name: str, n: int, L, formula, params, lo, hi,
                 ambient_norm: str = "l2", exponent: float = 1.0):
        self.name = name
        self.n = n
        self.L = L
        self._formula = formula
        self.params = np.asarray(params, dtype=float).reshape(-1, n)
        self.lo = np.asarray(lo, dtype=float).reshape(n)
        self.hi = np.asarray(hi, dtype=float).reshape(n)
        self.ambient_norm = ambient_norm
        self.exponent = exponent

    def image(self, u) -> np.ndarray:
        return self._formula(np.asarray(u, dtype=float).reshape(-1, self.n))

    def distances(self, u, v=None) -> np.ndarray:
        """Matrix of d(g(u_i), g(v_j))."""
        a = self.image(u)
        b = a if v is None else self.image(v)
        metric, _ = AMBIENT_NORMS[self.ambient_norm]
        out = cdist(a, b, metric=metric)
        return out ** self.exponent if self.exponent != 1.0 else out

    def distances_to_points(self, u, space: MetricSpaceSample, idx) -> np.ndarray:
        """d(g(u_i), x_j) for space points x_j; the chart image lives in the space's ambient."""
        return self.distances(u, self.params[np.asarray(idx, dtype=int)])

    def verify_bilipschitz(self, n_pairs: int = 4000, seed: int = 0) -> tuple[float, float]:
        """(min, max) of d(g(u), g(v)) / |u - v| over random and consecutive sample pairs."""
        rng = np.random.default_rng(seed)
        m = self.params.shape[0]
        a = rng.integers(0, m, size=n_pairs)
        b = rng.integers(0, m, size=n_pairs)
        a = np.concatenate([a, np.arange(m - 1)])
        b = np.concatenate([b, np.arange(1, m)])
        keep = a != b
        a, b = a[keep], b[keep]
        du = np.linalg.norm(self.params[a] - self.params[b], axis=1)
        img = self.image(self.params)
        _, p = AMBIENT_NORMS[self.ambient_norm]
        dg = np.linalg.norm(img[a] - img[b], ord=p, axis=1) ** self.exponent
        ratio = dg / du
        return float(ratio.min()), float(ratio.max())

    def image_cell_volumes(self, h: float, subdivisions: int = 8) -> np.ndarray:
        """n-volume of g applied to each parameter cell (n = 1: polyline length)."""
        if self.n != 1:
            return np.full(self.params.shape[0], h ** self.n)
        offsets = np.linspace(-0.5, 0.5, subdivisions + 1) * h
        u = np.clip(self.params[:, :1] + offsets[None, :], self.lo[0], self.hi[0])
        pts = self.image(u.reshape(-1, 1)).reshape(u.shape[0], subdivisions + 1, -1)
        seg = np.diff(pts, axis=1)
        _, p = AMBIENT_NORMS[self.ambient_norm]
        return np.linalg.norm(seg, ord=p, axis=2).sum(axis=1)


# ----- spec ---------------------------------------------------------------

class GeneratorSpec(BaseModel):
    kind: str
    n: int | None = None
    d: int = 2
    spacing: float | None = None
    depth: int | None = None
    L: float | None = None
    chart: str | None = None
    seed: int = 0
    s: float = 0.5
    length: float = 1.0
    radius: float = 1.0
    count: int = 500
    ambient_norm: str = "l2"
    name: str | None = None

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v):
        if v not in GENERATORS:
            raise ValueError(f"unknown generator kind '{v}'; choose from {sorted(GENERATORS)}")
        return v

    @field_validator("chart")
    @classmethod
    def _registered_chart(cls, v):
        if v is not None and v not in CHART_REGISTRY:
            raise ValueError(f"unregistered chart '{v}'")
        return v

    @field_validator("spacing", "length", "radius")
    @classmethod
    def _positive(cls, v):
        if v is not None and v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("depth")
    @classmethod
    def _depth(cls, v):
        if v is not None and v < 0:
            raise ValueError("depth must be nonnegative")
        return v

    @model_validator(mode="after")
    def _snowflake_exponent(self):
        if not 0 < self.s <= 1:
            raise ValueError("snowflake exponent s must lie in (0,1]")
        return self

    @property
    def label(self) -> str:
        return self.name or self.kind


# ----- generators ---------------------------------------------------------

def _line_params(spec: GeneratorSpec, default_spacing: float = 1 / 512):
    h = spec.spacing or default_spacing
    m = max(1, int(round(spec.length / h)))
    h = spec.length / m
    u = (np.arange(m) + 0.5) * h
    return u, h


def _attach_chart(space, spec, chart_name, params, lo, hi, exponent=1.0):
    entry = CHART_REGISTRY[chart_name]
    n = params.shape[1]
    chart = Chart(chart_name, n, spec.L or entry["L"](spec),
                  lambda u: entry["formula"](u, spec), params, lo, hi,
                  ambient_norm=spec.ambient_norm, exponent=exponent)
    space.chart = chart
    return space


def _segment(spec: GeneratorSpec) -> MetricSpaceSample:
    u, h = _line_params(spec)
    coords = _pad(u[:, None], spec.d)
    edge = np.minimum(u, spec.length - u)
    space = MetricSpaceSample(np.full(u.size, h), 1, coords=coords, ambient_norm=spec.ambient_norm,
                              boundary_distance=edge, name=spec.label)
    return _attach_chart(space, spec, "identity", u[:, None], [0.0], [spec.length])


def _grid(spec: GeneratorSpec) -> MetricSpaceSample:
    n = spec.n or 2
    h = spec.spacing or 1 / 32
    m = max(1, int(round(spec.length / h)))
    h = spec.length / m
    axis = (np.arange(m) + 0.5) * h
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    edge = np.minimum(mesh, spec.length - mesh).min(axis=1)
    grid_spec = spec.model_copy(update={"d": n})
    space = MetricSpaceSample(np.full(mesh.shape[0], h ** n), n, coords=mesh, ambient_norm=spec.ambient_norm,
                              boundary_distance=edge, name=spec.label)
    return _attach_chart(space, grid_spec, "identity", mesh, np.zeros(n), np.full(n, spec.length))


def _cloud(spec: GeneratorSpec) -> MetricSpaceSample:
    n = spec.n or 2
    rng = np.random.default_rng(spec.seed)
    pts = rng.uniform(0.0, spec.length, size=(spec.count, n))
    edge = np.minimum(pts, spec.length - pts).min(axis=1)
    return MetricSpaceSample(np.full(spec.count, spec.length ** n / spec.count), n, coords=pts,
                             ambient_norm=spec.ambient_norm, boundary_distance=edge, name=spec.label)


def _snowflake(spec: GeneratorSpec) -> MetricSpaceSample:
    u, h = _line_params(spec, default_spacing=1e-4)
    n = spec.n or int(round(1 / spec.s))
    edge = np.minimum(u, spec.length - u)
    line = MetricSpaceSample(np.full(u.size, h), n, coords=u[:, None], boundary_distance=edge, name=spec.label)
    space = line.snowflake(spec.s)
    space.name = spec.label
    return _attach_chart(space, spec, "snowflake_line", u[:, None], [0.0], [spec.length], exponent=spec.s)


def _four_corner_cantor(spec: GeneratorSpec) -> MetricSpaceSample:
    depth = 5 if spec.depth is None else spec.depth
    centers = np.array([[0.5, 0.5]])
    side = 1.0
    for _ in range(depth):
        offsets = np.array([[-1.5, -1.5], [-1.5, 1.5], [1.5, -1.5], [1.5, 1.5]]) * (side / 4)
        centers = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
        side /= 4
    order = np.lexsort((centers[:, 1], centers[:, 0]))
    centers = centers[order] * spec.length
    return MetricSpaceSample(np.full(centers.shape[0], spec.length * 4.0 ** (-depth)), 1, coords=centers,
                             ambient_norm=spec.ambient_norm, name=spec.label)


def _graph_kind(default_chart):
    def build(spec: GeneratorSpec) -> MetricSpaceSample:
        chart_name = spec.chart or default_chart
        u, h = _line_params(spec)
        entry = CHART_REGISTRY[chart_name]
        coords = entry["formula"](u[:, None], spec)
        L = spec.L or entry["L"](spec)
        edge = np.minimum(u, spec.length - u) / L
        # weights are placeholders until the chart measures its cells
        space = MetricSpaceSample(np.full(u.size, h), 1, coords=coords, ambient_norm=spec.ambient_norm,
                                  boundary_distance=edge, name=spec.label)
        _attach_chart(space, spec, chart_name, u[:, None], [0.0], [spec.length])
        space.weights = space.chart.image_cell_volumes(h)
        return space
    return build


def _circle(spec: GeneratorSpec) -> MetricSpaceSample:
    circumference = 2 * np.pi * spec.radius
    h = spec.spacing or circumference / 1024
    m = max(3, int(round(circumference / h)))
    h = circumference / m
    u = (np.arange(m) + 0.5) * h
    coords = _circle_arc(u[:, None], spec.d, spec.radius)
    space = MetricSpaceSample(np.full(m, h), 1, coords=coords, ambient_norm=spec.ambient_norm, name=spec.label)
    return _attach_chart(space, spec, "circle_arc", u[:, None], [0.0], [circumference])


def _circle_union(spec: GeneratorSpec) -> MetricSpaceSample:
    count = spec.depth or 4
    h = spec.spacing or spec.radius / 256
    pieces, weights = [], []
    x = 0.0
    for j in range(count):
        R = spec.radius * 2.0 ** (-j)
        if j > 0:
            x += 2 * R + R
        m = max(8, int(round(2 * np.pi * R / h)))
        theta = (np.arange(m) + 0.5) * 2 * np.pi / m
        pieces.append(np.column_stack([x + R * np.cos(theta), R * np.sin(theta)]))
        weights.append(np.full(m, 2 * np.pi * R / m))
        x += R
    coords = np.vstack(pieces)
    return MetricSpaceSample(np.concatenate(weights), 1, coords=_pad(coords, max(spec.d, 2)),
                             ambient_norm=spec.ambient_norm, name=spec.label)


GENERATORS = {
    "segment": _segment,
    "grid": _grid,
    "cloud": _cloud,
    "snowflake": _snowflake,
    "four_corner_cantor": _four_corner_cantor,
    "lipschitz_graph": _graph_kind("sine_graph"),
    "bilip_curve": _graph_kind("bilip_wave"),
    "circle": _circle,
    "circle_union": _circle_union,
}


def generate(spec: GeneratorSpec | dict) -> MetricSpaceSample:
    if isinstance(spec, dict):
        spec = GeneratorSpec(**spec)
    if spec.chart is not None and spec.kind not in ("lipschitz_graph", "bilip_curve"):
        raise DomainError(f"kind '{spec.kind}' does not take a chart")
    space = GENERATORS[spec.kind](spec)
    space.extras = {"spec": spec.model_dump()}
    logger.info(f"generated {spec.label}: {space.n_points} points, metric {space.metric_tag}, n={space.dim_n}")
    return space


def load_space(path) -> MetricSpaceSample:
    """Read a space written by MetricSpaceSample.to_json, reattaching its chart."""
    space = MetricSpaceSample.from_json(Path(path))
    spec = space.extras.get("spec")
    if spec is not None:
        fresh = generate(GeneratorSpec(**spec))
        if fresh.n_points == space.n_points:
            space.chart = fresh.chart
    return space


def remove_mass(space: MetricSpaceSample, fraction: float, seed: int = 0) -> np.ndarray:
    """
    Mask of a subset E: the space minus the ball around a seeded center
    that holds `fraction` of the total mass (at most, ties excluded).
    """
    if not 0 <= fraction < 1:
        raise DomainError(f"removed fraction must lie in [0,1), got {fraction}")
    keep = np.ones(space.n_points, dtype=bool)
    if fraction == 0:
        return keep
    center = int(np.random.default_rng(seed).integers(space.n_points))
    d = space.distances_from(center)
    order = np.argsort(d, kind="stable")
    cum = np.cumsum(space.weights[order])
    cut = int(np.searchsorted(cum, fraction * space.total_mass, side="right"))
    keep[order[:cut]] = False
    return keep
