# pipeline_config.py
"""
Configuration models and default tables for the multiscale pipeline.

A run is described by one PipelineConfig: the spaces to generate, the cube
tree parameters, the coefficient fields to compute and the audit
thresholds. COEFFICIENT_DEFAULTS holds the per-coefficient search settings
a field falls back to when the config does not override them.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

from pydantic import BaseModel, Field, field_validator, model_validator

from cube_lattice import DEFAULT_C0, DEFAULT_RHO
from space_generators import GeneratorSpec


class SearchConfig(BaseModel):
    """Search budgets shared by every coefficient evaluator."""

    ball_factor: float = Field(1.0, gt=0)
    scale_floor: float = Field(20.0, ge=0)
    # Osc
    n_centers: int = Field(16, ge=1)
    n_scales: int = Field(12, ge=1)
    min_scale_ratio: float = Field(0.05, gt=0, le=1)
    # alpha
    plane_step: float = Field(0.05, gt=0)
    plane_steps: int = Field(2, ge=0)
    c_bracket: tuple[float, float] = (0.5, 2.0)
    c_maxiter: int = Field(12, ge=1)
    max_support: int = Field(160, ge=8)
    solver_mode: str = "auto"
    # md, alpha_tilde, xi
    md_grid: int = Field(8, ge=2)
    max_cells: int = Field(64, ge=2)
    xi_pairs: int = Field(400, ge=2)
    xi_grid: int = Field(64, ge=2)
    jacobian_order: int = Field(32, ge=4)

    @field_validator("solver_mode")
    @classmethod
    def _mode(cls, v):
        if v not in ("auto", "dense", "sparse"):
            raise ValueError(f"solver_mode must be auto, dense or sparse, got '{v}'")
        return v

    @model_validator(mode="after")
    def _bracket(self):
        lo, hi = self.c_bracket
        if not 0 < lo <= 1 <= hi:
            raise ValueError("c_bracket must straddle 1 with a positive lower end")
        return self


COEFFICIENT_DEFAULTS = {
    "osc": {
        "label": "Oscillation of ball masses",
        "needs": "metric",
        "search": {},
    },
    "osc_E": {
        "label": "Oscillation of ball masses restricted to a subset",
        "needs": "metric",
        "search": {},
    },
    "alpha": {
        "label": "Localized transport distance to a flat measure",
        "needs": "coords",
        "search": {"max_support": 120},
    },
    "alpha_E": {
        "label": "Localized transport distance of a subset to a flat measure",
        "needs": "coords",
        "search": {"max_support": 120},
    },
    "alpha_tilde": {
        "label": "Lattice-cube transport distance in the glued space",
        "needs": "chart",
        "search": {"max_cells": 48},
    },
    "md": {
        "label": "Coarse metric derivative of the chart",
        "needs": "chart",
        "search": {},
    },
    "xi": {
        "label": "Two-sided isometry defect against a normed ball",
        "needs": "chart_or_coords",
        "search": {"xi_pairs": 200, "xi_grid": 48},
    },
}


class CoefficientConfig(BaseModel):
    kind: str
    search: SearchConfig = Field(default_factory=SearchConfig)
    # mass fraction removed to form E for the restricted kinds
    remove_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = 0

    @field_validator("kind")
    @classmethod
    def _known(cls, v):
        if v not in COEFFICIENT_DEFAULTS:
            raise ValueError(f"unknown coefficient '{v}'; choose from {sorted(COEFFICIENT_DEFAULTS)}")
        return v

    @property
    def uses_subset(self) -> bool:
        return self.kind.endswith("_E") or self.kind == "alpha_tilde"


def coefficient_config(kind: str, overrides: dict | None = None) -> CoefficientConfig:
    """Config for `kind`, default search settings merged under `overrides`."""
    defaults = COEFFICIENT_DEFAULTS.get(kind, COEFFICIENT_DEFAULTS["osc"])
    overrides = dict(overrides or {})
    search = {**defaults["search"], **overrides.pop("search", {})}
    return CoefficientConfig(kind=kind, search=SearchConfig(**search), **overrides)


def _coefficient_entry(entry):
    # "osc" or {"kind": "osc", "search": {...}}; defaults merge under the entry
    if isinstance(entry, str):
        return coefficient_config(entry)
    if isinstance(entry, dict) and "kind" in entry:
        return coefficient_config(entry["kind"], {k: v for k, v in entry.items() if k != "kind"})
    return entry


class TreeParams(BaseModel):
    rho: float = DEFAULT_RHO
    c0: float = DEFAULT_C0
    k_min: int | None = None
    k_max: int | None = None
    seed: int = 0
    verify: bool = True
    multires_pairs: int = Field(0, ge=0)

    @field_validator("rho")
    @classmethod
    def _rho(cls, v):
        if not 0 < v < 1:
            raise ValueError(f"rho must lie in (0,1), got {v}")
        return v

    @field_validator("c0")
    @classmethod
    def _c0(cls, v):
        if not 0 < v < 0.5:
            raise ValueError(f"c0 must lie in (0,1/2), got {v}")
        return v


class AuditParams(BaseModel):
    eps: list[float] = Field(default_factory=lambda: [0.1])
    min_depth: int = Field(3, ge=1)
    bands: int = Field(3, ge=2)
    growth_slope: float = Field(0.5, gt=0)

    @field_validator("eps")
    @classmethod
    def _eps(cls, v):
        if not v:
            raise ValueError("eps list must be nonempty")
        if any(e < 0 for e in v):
            raise ValueError("eps values must be nonnegative")
        return sorted(v)


class PipelineConfig(BaseModel):
    spaces: list[GeneratorSpec]
    tree: TreeParams = Field(default_factory=TreeParams)
    coefficients: list[CoefficientConfig] = Field(default_factory=lambda: [coefficient_config("osc")])
    audit: AuditParams = Field(default_factory=AuditParams)
    out: str | None = None
    seed: int | None = None
    threads: int | None = Field(None, ge=1)
    ahlfors_scales: int = Field(8, ge=1)
    ahlfors_centers: int = Field(64, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _single_space(cls, data):
        if isinstance(data, dict) and "space" in data and "spaces" not in data:
            data = dict(data)
            data["spaces"] = [data.pop("space")]
        if isinstance(data, dict) and data.get("coefficients"):
            data = dict(data)
            data["coefficients"] = [_coefficient_entry(c) for c in data["coefficients"]]
        return data

    @field_validator("spaces")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one space is required")
        return v

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls(**json.loads(Path(path).read_text()))

    def with_seed(self, seed: int | None) -> "PipelineConfig":
        """Apply a run seed to every generator and the tree."""
        if seed is None:
            seed = self.seed
        if seed is None:
            return self
        spaces = [s.model_copy(update={"seed": seed}) for s in self.spaces]
        tree = self.tree.model_copy(update={"seed": seed})
        return self.model_copy(update={"spaces": spaces, "tree": tree, "seed": seed})


def resolve_threads(config: PipelineConfig | None = None) -> int:
    """Worker count: MULTISCALE_THREADS, then the config, then the CPU count."""
    env = os.getenv("MULTISCALE_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            value = 0
        if value >= 1:
            return value
    if config is not None and config.threads:
        return config.threads
    return max(1, os.cpu_count() or 1)
