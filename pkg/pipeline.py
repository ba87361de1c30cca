"""
Batch pipeline: generate -> build cubes -> coefficient fields -> Carleson
audits -> tables, plots and a summary.

Every stage is a barrier. Coefficient fields of one space run concurrently
on worker threads; results are written in request order so a fixed config
and seed always produce the same artifacts.
"""
from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from carleson_audit import PackingReport, eps_sweep  # noqa: E402
from cube_lattice import (CubeTree, build_christ_david, build_multires_systems, build_net_hierarchy,  # noqa: E402
                          default_levels, multires_bound, verify_cube_axioms)
from errors import MultiscaleError  # noqa: E402
from flatness_coefficients import CoefficientField, check_support, compute_field  # noqa: E402
from metric_core import MetricSpaceSample, ahlfors_scan, doubling_estimate  # noqa: E402
from pipeline_config import CoefficientConfig, PipelineConfig, resolve_threads  # noqa: E402
from space_generators import generate, remove_mass  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "multiscale"


@dataclass
class SpaceRun:
    """Everything computed for one generator spec."""

    space: MetricSpaceSample
    directory: Path
    tree: CubeTree | None = None
    fields: list[CoefficientField] = field(default_factory=list)
    reports: dict[str, list[PackingReport]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


# ----- stages --------------------------------------------------------------

def stage_generate(config: PipelineConfig, out: Path) -> list[SpaceRun]:
    """Generate every space and check each requested coefficient applies to it."""
    runs = []
    for spec in config.spaces:
        space = generate(spec)
        for coeff in config.coefficients:
            check_support(space, coeff.kind)
        directory = out if len(config.spaces) == 1 else out / spec.label
        runs.append(SpaceRun(space, directory))
    labels = [r.directory for r in runs]
    if len(set(labels)) != len(labels):
        raise MultiscaleError("two generator specs share a label; give them distinct names",
                              stage="gen", cause="labels")
    return runs


def stage_tree(run: SpaceRun, config: PipelineConfig) -> CubeTree:
    params = config.tree
    space = run.space
    k_min, k_max = default_levels(space, params.rho)
    k_min = params.k_min if params.k_min is not None else k_min
    k_max = params.k_max if params.k_max is not None else k_max
    hierarchy = build_net_hierarchy(space, params.rho, k_min, k_max, seed=params.seed)
    tree = build_christ_david(hierarchy, params.c0, verify=params.verify)
    run.summary["tree"] = {"cubes": len(tree), "levels": [tree.k_min, tree.k_max],
                           "rho": tree.rho, "c0": tree.c0}
    if params.verify:
        report = verify_cube_axioms(tree)
        run.summary["tree"]["axioms"] = {**report.model_dump(), "passed": report.passed}
    if params.multires_pairs:
        doubling = doubling_estimate(space, seed=params.seed)
        systems = build_multires_systems(space, params.rho, seed=params.seed, c0=params.c0,
                                         n_audit=params.multires_pairs, doubling=doubling)
        run.summary["tree"]["multires"] = {"systems": len(systems), "doubling": doubling,
                                           "bound": multires_bound(doubling, params.c0)}
    return tree


def _subset_mask(space: MetricSpaceSample, coeff: CoefficientConfig):
    if not coeff.uses_subset:
        return None
    return remove_mass(space, coeff.remove_fraction, seed=coeff.seed)


async def stage_coefficients(run: SpaceRun, config: PipelineConfig, threads: int) -> list[CoefficientField]:
    semaphore = asyncio.Semaphore(threads)

    async def one(coeff: CoefficientConfig) -> CoefficientField:
        async with semaphore:
            mask = _subset_mask(run.space, coeff)
            return await asyncio.to_thread(compute_field, run.tree, coeff, mask)

    return list(await asyncio.gather(*(one(c) for c in config.coefficients)))


def field_label(fld: CoefficientField) -> str:
    """File and summary key of a field: its kind, plus the ball factor when not 1."""
    if fld.ball_factor == 1:
        return fld.kind
    return f"{fld.kind}_b{_number_tag(fld.ball_factor)}"


def stage_audit(run: SpaceRun, config: PipelineConfig) -> dict[str, list[PackingReport]]:
    audit = config.audit
    reports = {}
    for fld in run.fields:
        reports[field_label(fld)] = eps_sweep(run.tree, fld, audit.eps, min_depth=audit.min_depth, bands=audit.bands,
                                      growth_slope=audit.growth_slope)
    return reports


def ahlfors_summary(space: MetricSpaceSample, config: PipelineConfig) -> dict | None:
    """Ahlfors constants over interior centers and scales in [10 spacing, diam/8]."""
    lo, hi = 10 * space.min_spacing(), space.diameter() / 8
    if not 0 < lo < hi:
        return None
    scales = np.geomspace(lo, hi, config.ahlfors_scales)
    interior = np.flatnonzero(space.boundary_distance >= 2 * hi)
    if interior.size == 0:
        return None
    pick = np.unique(np.linspace(0, interior.size - 1, min(config.ahlfors_centers, interior.size)).round().astype(int))
    report = ahlfors_scan(space, space.dim_n, interior[pick], scales)
    out = report.model_dump(exclude={"per_scale"})
    out["density"] = 0.5 * (report.c_lower + report.c_upper)
    return out


# ----- emitters ------------------------------------------------------------

def _locations(space: MetricSpaceSample, tree: CubeTree) -> np.ndarray:
    centers = np.array([q.center for q in tree.cubes])
    if space.chart is not None:
        return space.chart.params[centers, 0]
    if space.has_coords:
        return space.coords[centers, 0]
    return centers.astype(float)


def write_heatmap(path: Path, tree: CubeTree, fld: CoefficientField) -> None:
    """Value per cube on (location, level) axes; flagged cubes in grey."""
    loc = _locations(tree.space, tree)
    fig, ax = plt.subplots(figsize=(8, 4))
    valued = [v for v in fld.values if v.value is not None]
    flagged = [v for v in fld.values if v.value is None]
    if flagged:
        ax.scatter(loc[[v.cube_id for v in flagged]], [v.level for v in flagged], c="lightgrey", marker="s", s=12)
    if valued:
        sc = ax.scatter(loc[[v.cube_id for v in valued]], [v.level for v in valued],
                        c=[v.value for v in valued], cmap="viridis", marker="s", s=12)
        fig.colorbar(sc, ax=ax, label=fld.kind)
    ax.invert_yaxis()
    ax.set_xlabel("location")
    ax.set_ylabel("level")
    ax.set_title(f"{fld.kind} on {tree.space.name}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _number_tag(eps: float) -> str:
    return f"{eps:g}".replace(".", "p")


def emit(run: SpaceRun) -> None:
    d = run.directory
    d.mkdir(parents=True, exist_ok=True)
    run.space.to_json(d / "space.json")
    run.tree.to_json(d / "tree.json")
    for fld in run.fields:
        label = field_label(fld)
        fld.to_csv(d / f"{label}.csv")
        fld.to_json(d / f"{label}.json")
        write_heatmap(d / f"{label}.svg", run.tree, fld)
        for report in run.reports.get(label, []):
            stem = d / f"packing_{label}_eps{_number_tag(report.eps)}"
            report.to_csv(stem.with_suffix(".csv"))
            report.to_json(stem.with_suffix(".json"))
    (d / "summary.json").write_text(json.dumps(run.summary, sort_keys=True, indent=1))


def write_error(out: Path, error: Exception, stage: str) -> int:
    if isinstance(error, MultiscaleError):
        record = error.record()
        record["stage"] = record["stage"] or stage
    else:
        record = {"stage": stage, "cause": type(error).__name__, "error": str(error), "exit_code": 1}
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").write_text(json.dumps(record, sort_keys=True, indent=1))
    logger.error(f"{stage} failed: {record['error']}")
    return record["exit_code"]


# ----- driver --------------------------------------------------------------

async def run_pipeline(config: PipelineConfig, out=None, seed: int | None = None) -> int:
    """
    Run every stage for every space. Returns the exit status: 0 on success,
    otherwise the failing error's code, with error.json in the output root.
    Nothing but error.json is written before all stages have succeeded.
    """
    config = config.with_seed(seed)
    out = Path(out or config.out or "multiscale_out")
    threads = resolve_threads(config)
    stage = "gen"
    try:
        runs = stage_generate(config, out)
        for run in runs:
            stage = "tree"
            logger.info(f"building cubes on {run.space.name}")
            run.tree = await asyncio.to_thread(stage_tree, run, config)

            stage = "coeff"
            logger.info(f"computing {len(config.coefficients)} fields with {threads} workers")
            run.fields = await stage_coefficients(run, config, threads)
            run.summary["fields"] = {field_label(f): {"values": sum(v.value is not None for v in f.values),
                                              "flagged": len(f.flagged())} for f in run.fields}

            stage = "audit"
            run.reports = stage_audit(run, config)
            run.summary["audit"] = {kind: [r.summary() for r in reports] for kind, reports in run.reports.items()}
            run.summary["ahlfors"] = ahlfors_summary(run.space, config)
            run.summary["space"] = {"name": run.space.name, "points": run.space.n_points,
                                    "n": run.space.dim_n, "metric": run.space.metric_tag,
                                    "diameter": run.space.diameter(), "spacing": run.space.min_spacing()}

        stage = "emit"
        for run in runs:
            emit(run)
    except MultiscaleError as e:
        return write_error(out, e, stage)
    logger.info(f"artifacts written to {out}")
    return 0
