"""Command-line entry point: ``sparsecbct <command> --config PATH [options]``.

Exit codes: 0 success, 2 configuration error (including provenance
mismatches), 3 missing prerequisite artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numba
import torch

from . import pipeline
from .config import DEFAULTS, ConfigError, dump_config, load_config
from .diffcore import NumericalError
from .diffusion import DomainMismatchError
from .io import ArtifactError

log = logging.getLogger("sparsecbct")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML configuration file")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--force", action="store_true", help="accept or overwrite artifacts from another config")
    common.add_argument("--workers", type=int, default=1, help="threads for numba and torch kernels")
    common.add_argument("--output", default=None, help="run directory (overrides the configured one)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparsecbct", description="Sparse-view cone-beam CT reconstruction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("default-config", help="print the default configuration as YAML")
    for name, text in (
        ("phantom", "voxelise the phantom (ground-truth volume)"),
        ("project", "sparse and dense ground-truth projections"),
        ("train-naf", "fit the neural attenuation field to the sparse views"),
        ("synthesize", "render dense projections from the trained field"),
        ("decouple", "split the dense projections into sinogram and DR stacks"),
        ("fuse", "blend the two path volumes"),
        ("evaluate", "PSNR/SSIM of every reconstructed volume"),
        ("pipeline", "run every stage, reusing recorded outputs"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    tr = sub.add_parser("train-refiner", parents=[common], help="train the sinogram or DR refiner")
    tr.add_argument("--domain", choices=("sino", "dr"), required=True)
    rf = sub.add_parser("refine", parents=[common], help="refine the sinogram and/or DR stack")
    rf.add_argument("--domain", choices=("sino", "dr", "both"), default="both")
    rc = sub.add_parser("reconstruct", parents=[common], help="FDK reconstructions")
    rc.add_argument("--path", choices=pipeline.RECON_PATHS, default="both")
    sw = sub.add_parser("sweep", parents=[common], help="omega or dense-view-count sweep to CSV")
    sw.add_argument("--parameter", choices=("omega", "views_m"), required=True)
    sw.add_argument("--values", type=_floats, default=None, help="comma-separated values")
    return p


def _run_command(args, run: pipeline.Run):
    cmd = args.command
    if cmd == "pipeline":
        pipeline.run_pipeline(run)
    elif cmd == "train-refiner":
        pipeline.stage_train_refiner(run, args.domain)
    elif cmd == "refine":
        for d in (("sino", "dr") if args.domain == "both" else (args.domain,)):
            pipeline.stage_refine(run, d)
    elif cmd == "reconstruct":
        pipeline.stage_reconstruct(run, args.path)
    elif cmd == "sweep":
        if args.parameter == "omega":
            pipeline.sweep_omega(run, args.values or pipeline.OMEGA_SWEEP)
        else:
            pipeline.sweep_views_m(run, [int(v) for v in (args.values or pipeline.VIEWS_M_SWEEP)])
    else:
        pipeline.STAGE_FUNCS[cmd](run)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "default-config":
        sys.stdout.write(dump_config(DEFAULTS))
        return EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.output is not None:
            overrides["output"] = args.output
        cfg = load_config(args.config, overrides)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        torch.set_num_threads(args.workers)
        numba.set_num_threads(min(args.workers, numba.config.NUMBA_NUM_THREADS))
        run = pipeline.Run(cfg, cfg["output"], force=args.force, workers=args.workers)
        with run.lock():
            _run_command(args, run)
    except (ConfigError, pipeline.HashMismatch, DomainMismatchError, ArtifactError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (pipeline.MissingArtifact, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
