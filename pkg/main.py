"""
Main entry point for the multiscale flatness toolkit.

Verbs:
    gen    generate a test space and write it as JSON
    tree   build a Christ-David cube tree on a saved space
    coeff  compute one coefficient field on a saved space and tree
    audit  packing audit of a saved field
    run    the whole pipeline from a config file
"""
import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

# Load environment variables (MULTISCALE_THREADS)
load_dotenv()

from carleson_audit import eps_sweep  # noqa: E402
from cube_lattice import CubeTree, build_christ_david, build_net_hierarchy, default_levels  # noqa: E402
from errors import MultiscaleError  # noqa: E402
from flatness_coefficients import CoefficientField, compute_field  # noqa: E402
from pipeline import run_pipeline  # noqa: E402
from pipeline_config import (DEFAULT_C0, DEFAULT_RHO, AuditParams, PipelineConfig,  # noqa: E402
                             coefficient_config)
from space_generators import GeneratorSpec, generate, load_space, remove_mass  # noqa: E402

logger = logging.getLogger("multiscale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiscale", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    gen = sub.add_parser("gen", help="generate a test space",
                         formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    gen.add_argument("--config", help="JSON GeneratorSpec; overrides the flags below")
    gen.add_argument("--kind", default="segment")
    gen.add_argument("--n", type=int)
    gen.add_argument("--d", type=int, default=2)
    gen.add_argument("--spacing", type=float)
    gen.add_argument("--depth", type=int)
    gen.add_argument("--chart")
    gen.add_argument("--s", type=float, default=0.5, help="snowflake exponent")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default="space.json")

    tree = sub.add_parser("tree", help="build a cube tree", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    tree.add_argument("--space", required=True)
    tree.add_argument("--rho", type=float, default=DEFAULT_RHO)
    tree.add_argument("--c0", type=float, default=DEFAULT_C0)
    tree.add_argument("--seed", type=int, default=0)
    tree.add_argument("--out", default="tree.json")

    coeff = sub.add_parser("coeff", help="compute a coefficient field",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    coeff.add_argument("--space", required=True)
    coeff.add_argument("--tree", required=True)
    coeff.add_argument("--kind", default="osc")
    coeff.add_argument("--ball-factor", type=float, default=1.0)
    coeff.add_argument("--remove-fraction", type=float, default=0.1, help="mass removed for *_E kinds")
    coeff.add_argument("--out", default="field.json")

    audit = sub.add_parser("audit", help="packing audit of a field",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    audit.add_argument("--space", required=True)
    audit.add_argument("--tree", required=True)
    audit.add_argument("--field", required=True)
    audit.add_argument("--eps", type=float, nargs="+", default=[0.1])
    audit.add_argument("--min-depth", type=int, default=3)
    audit.add_argument("--out", default="audit")

    run = sub.add_parser("run", help="run the full pipeline", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seed", type=int)
    return parser


def cmd_gen(args) -> int:
    if args.config:
        spec = GeneratorSpec(**json.loads(Path(args.config).read_text()))
    else:
        spec = GeneratorSpec(kind=args.kind, n=args.n, d=args.d, spacing=args.spacing, depth=args.depth,
                             chart=args.chart, s=args.s, seed=args.seed)
    space = generate(spec)
    space.to_json(args.out)
    logger.info(f"wrote {space.n_points} points to {args.out}")
    return 0


def cmd_tree(args) -> int:
    space = load_space(args.space)
    k_min, k_max = default_levels(space, args.rho)
    tree = build_christ_david(build_net_hierarchy(space, args.rho, k_min, k_max, seed=args.seed), args.c0)
    tree.to_json(args.out)
    logger.info(f"wrote {len(tree)} cubes to {args.out}")
    return 0


def cmd_coeff(args) -> int:
    space = load_space(args.space)
    tree = CubeTree.from_json(args.tree, space)
    config = coefficient_config(args.kind, {"search": {"ball_factor": args.ball_factor},
                                            "remove_fraction": args.remove_fraction})
    mask = remove_mass(space, config.remove_fraction, config.seed) if config.uses_subset else None
    fld = compute_field(tree, config, mask)
    out = Path(args.out)
    fld.to_json(out)
    fld.to_csv(out.with_suffix(".csv"))
    logger.info(f"wrote {args.kind} field to {out}")
    return 0


def cmd_audit(args) -> int:
    space = load_space(args.space)
    tree = CubeTree.from_json(args.tree, space)
    fld = CoefficientField.model_validate_json(Path(args.field).read_text())
    params = AuditParams(eps=args.eps, min_depth=args.min_depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for report in eps_sweep(tree, fld, params.eps, min_depth=params.min_depth, bands=params.bands,
                            growth_slope=params.growth_slope):
        tag = f"{report.eps:g}".replace(".", "p")
        stem = out / f"packing_{fld.kind}_eps{tag}"
        report.to_csv(f"{stem}.csv")
        report.to_json(f"{stem}.json")
        logger.info(f"eps={report.eps:g}: sup {report.sup:.4g}, {report.verdict}")
    return 0


async def main(argv=None) -> int:
    """
    Parse the command line and dispatch. Returns the process exit status.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="[%(asctime)s] %(message)s", datefmt="%Y-%m-%d %H:%M:%S")
    try:
        if args.verb == "run":
            config = PipelineConfig.from_file(args.config)
            return await run_pipeline(config, out=args.out, seed=args.seed)
        handler = {"gen": cmd_gen, "tree": cmd_tree, "coeff": cmd_coeff, "audit": cmd_audit}[args.verb]
        return await asyncio.to_thread(handler, args)

    except ValidationError as e:
        logger.error(f"invalid configuration: {e}")
        return 2
    except MultiscaleError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted by user. Shutting down...")
        return 130
    except Exception as e:
        logger.exception(f"Error: {e}")
        return 1
    finally:
        logger.debug("session ended")


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
