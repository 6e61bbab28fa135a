"""Command-line front end: ``gncprior <experiment> [options]``.

Parameters live in a JSON file (``--config``); ``--seed`` and ``--out``
override it, and the few file-valued options (``--model``, ``--task``,
``--input``, ``--corpus``) are merged in.  ``GNCPRIOR_THREADS`` caps the
number of BLAS/numba threads.  Exit status: 0 on success, 1 when a module
flags a numerical failure, 2 for bad usage or configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


def _limit_threads():
    n = os.environ.get("GNCPRIOR_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    from .experiments import EXPERIMENTS

    ap = argparse.ArgumentParser(prog="gncprior", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with the experiment parameters")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--seed", type=int)
        if name in ("solve", "vn-train", "export-params"):
            p.add_argument("--model", help="model file")
        if name == "solve":
            p.add_argument("--task", help="JSON task file {kind, sigma|missing, seed, ...}")
            p.add_argument("--input", help="clean reference image (PGM)")
        if name == "train":
            p.add_argument("--corpus", help="directory of training PGMs")
        if name == "vn-train":
            p.add_argument("--images", help="directory of paired-training PGMs")
    return ap


def main(argv=None) -> int:
    _limit_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .experiments import ExperimentSpec, run
    from .gmm import NotConvexError
    from .gnc import FlowDivergence
    from .solvers import SolverDiverged
    from .training import TrainingDiverged

    try:
        params = json.loads(open(args.config).read()) if args.config else {}
        for key in ("model", "task", "input", "corpus", "images"):
            if getattr(args, key, None) is not None:
                params[key] = getattr(args, key)
        summary = run(ExperimentSpec(args.experiment, params, args.out), seed=args.seed)
    except (TrainingDiverged, SolverDiverged, FlowDivergence, NotConvexError) as exc:
        print(f"gncprior {args.experiment}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"gncprior {args.experiment}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
