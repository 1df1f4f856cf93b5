"""Command-line interface: ``gcfpca {fit,simulate,replicate,binarize}``.

Data go to files only; stdout carries a short progress log. Every output
file starts with the library version and the resolved model configuration
(``#`` comment lines in CSV files, a ``meta`` object in JSON files).
Execution settings such as the thread count and timings are kept out of
those headers and recorded in ``fit_meta.json`` under ``execution``, so
reruns produce byte-identical data files at any thread count.

Exit codes: 0 success, 2 invalid input, 3 fitting failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FitError, GcFpcaError, ValidationError
from .fpca import DEFAULT_PVE
from .ingest import DEFAULT_THRESHOLD, binarize_profiles, fmt, load_long_csv, load_multiday_csv, multiday_grid, write_long_csv
from .joint_glmm import cma_bands, fixed_effect_curves
from .pipeline import PipelineConfig, run_pipeline
from .simlab import (
    SimScenario,
    generate_dataset,
    load_scenario,
    run_replications,
    simulation_config,
    table_row,
    write_table,
)

logger = logging.getLogger("gcfpca")

EXIT_OK, EXIT_VALIDATION, EXIT_FIT, EXIT_IO = 0, 2, 3, 4
MIN_SUCCESS_FRACTION = 0.8


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("ValidationError", message, EXIT_VALIDATION, None)
        self.print_usage(sys.stderr)
        sys.exit(EXIT_VALIDATION)


def _emit_error(kind: str, message: str, code: int, out_dir) -> None:
    payload = {"error": kind, "message": message, "exit_code": code, "version": __version__}
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass


def _header(config: dict) -> list[str]:
    return [f"gcfpca {__version__}", "config " + json.dumps(config, sort_keys=True, default=_json_default)]


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _write_csv(path: Path, header_lines, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _add_fit_options(p):
    p.add_argument("--family", default="binary", help="binary, poisson or gaussian (default: binary)")
    p.add_argument("--bin-frac", type=float, default=0.05, help="bin width as a fraction of K (default 0.05; about 0.10 is also common)")
    p.add_argument(
        "--cyclic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="wrap bins and the fixed-effect basis around the domain (default: on for 1440-point minute-of-day grids)",
    )
    p.add_argument("--n-basis", type=int, default=14, help="fixed-effect spline dimension M (default 14; 20 for minute-level data)")
    p.add_argument("--n-smooth-basis", type=int, default=None, help="covariance smoother dimension (default: min(35, ceil(K/4)), at least 4)")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--pve", type=float, default=None, help=f"variance share that selects L (default {DEFAULT_PVE})")
    grp.add_argument("--fixed-L", type=int, default=None, help="number of eigenfunctions, overriding --pve")
    p.add_argument("--threads", type=int, default=1)


MINUTES_PER_DAY = 1440


def _resolve_cyclic(flag, K: int) -> bool:
    return K == MINUTES_PER_DAY if flag is None else bool(flag)


def _pipeline_config(args, K: int) -> PipelineConfig:
    if args.bin_frac is not None and not 0 < args.bin_frac < 1:
        raise ValidationError("--bin-frac must lie in (0, 1)")
    pve = None if args.fixed_L is not None else (DEFAULT_PVE if args.pve is None else args.pve)
    return PipelineConfig(
        family=args.family,
        bin_fraction=args.bin_frac,
        cyclic=_resolve_cyclic(args.cyclic, K),
        n_basis=args.n_basis,
        n_smooth_basis=args.n_smooth_basis,
        pve=pve,
        fixed_L=args.fixed_L,
        threads=max(1, args.threads),
    )


def _model_config(config: PipelineConfig) -> dict:
    d = config.to_dict()
    d.pop("threads")
    d["joint"].pop("threads")
    return d


def cmd_fit(args) -> int:
    if not 0 < args.level < 1:
        raise ValidationError("--level must lie in (0, 1)")
    if args.cma_draws < 1000:
        raise ValidationError("--cma-draws must be at least 1000")
    data = load_long_csv(args.input, family=args.family, allow_missing=args.allow_missing)
    config = _pipeline_config(args, data.K)
    logger.info("fitting I=%d K=%d p=%d", data.I, data.K, data.p)
    res = run_pipeline(data, config)
    fit, es = res.fit, res.eigensystem
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _model_config(config)
    model.update(level=args.level, cma_draws=args.cma_draws, seed=args.seed, input=Path(args.input).name)
    header = _header(model)

    grid = data.grid
    bands = fixed_effect_curves(fit, grid, args.level)
    cma = [cma_bands(fit, r, grid, args.level, args.cma_draws, args.seed + r) for r in range(len(bands))]
    cols = ["s"]
    for name in fit.covariate_names:
        cols += [f"{name}_{c}" for c in ("estimate", "se", "lower", "upper", "cma_lower", "cma_upper")]
    rows = []
    for k, s in enumerate(grid):
        row = [s]
        for b, c in zip(bands, cma):
            row += [b.estimate[k], b.se[k], b.lower[k], b.upper[k], c.lower[k], c.upper[k]]
        rows.append(row)
    _write_csv(out / "beta_curves.csv", header, cols, rows)

    L = es.L
    _write_csv(out / "eigenfunctions.csv", header, ["s"] + [f"phi{l + 1}" for l in range(L)], [[s, *es.eigenfunctions[k]] for k, s in enumerate(grid)])
    cum = np.cumsum(es.eigenvalues) / max(float(np.sum(es.all_eigenvalues)), 1e-300)
    _write_csv(
        out / "eigenvalues.csv",
        header,
        ["component", "eigenvalue", "pve_cumulative", "lambda_joint"],
        [[str(l + 1), es.eigenvalues[l], cum[l], fit.lambda_[l]] for l in range(L)],
    )
    _write_csv(out / "scores.csv", header, ["subject_id"] + [f"xi{l + 1}" for l in range(L)], [[str(sid), *fit.scores[i]] for i, sid in enumerate(data.subjects)])

    meta = {
        "meta": {"version": __version__, "config": model},
        "data": data.summary(),
        "L": L,
        "pve": es.pve,
        "n_smooth_basis": es.n_smooth_basis,
        "covariance_smoothing": es.smoothing,
        "fixed_effect_smoothing": fit.smoothing,
        "lambda": fit.lambda_,
        "dispersion": fit.dispersion,
        "log_likelihood": fit.log_likelihood,
        "converged": fit.converged,
        "outer_iterations": fit.n_outer,
        "inner_iterations": fit.n_inner,
        "dropped_components": list(fit.dropped),
        "local_fits": {
            "bins": res.plan.n_bins,
            "failed": res.n_failed_bins,
            "interpolated_bins": list(res.filled_bins),
            "converged": sum(bool(getattr(f, "converged", False)) for f in res.local_fits),
            "boundary_variance": sum(getattr(f, "sigma2", 1.0) <= 0 for f in res.local_fits),
        },
        "tolerances": {"local": asdict(config.local), "joint": asdict(config.joint)},
        "execution": {"threads": config.threads, "timings_seconds": res.timings, "output_dir": str(out)},
    }
    _write_json(out / "fit_meta.json", meta)
    logger.info("L=%d, converged=%s, %.2fs; outputs in %s", L, fit.converged, res.timings["total"], out)
    return EXIT_OK


def _scenario_from_args(args) -> SimScenario:
    if args.scenario:
        sc = load_scenario(args.scenario)
    else:
        sc = SimScenario()
    overrides = {}
    for name in ("I", "K", "family", "eigenbasis", "covariate_kind", "bin_fraction", "seed", "noise_sd"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if "family" in overrides:
        from .family import Family

        overrides["family"] = Family.from_name(overrides["family"]).kind
    return replace(sc, **overrides) if overrides else sc


def _add_scenario_options(p):
    p.add_argument("--scenario", help="scenario JSON file; the flags below override its fields")
    p.add_argument("--I", type=int, dest="I")
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--family")
    p.add_argument("--eigenbasis", choices=("fourier", "orthogonal_polynomial"))
    p.add_argument("--covariate-kind", dest="covariate_kind", choices=("bernoulli_half", "standard_normal"))
    p.add_argument("--bin-frac", dest="bin_fraction", type=float)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--seed", type=int)


def cmd_simulate(args) -> int:
    sc = _scenario_from_args(args)
    data, truth = generate_dataset(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(sc.to_dict())
    write_long_csv(data, out / "dataset.csv", header)
    grid = data.grid
    _write_csv(out / "truth_beta.csv", header, ["s", "beta0", "beta1"], [[s, truth.beta[0, k], truth.beta[1, k]] for k, s in enumerate(grid)])
    _write_csv(out / "truth_phi.csv", header, ["s", "phi1", "phi2", "phi3", "phi4"], [[s, *truth.phi[k]] for k, s in enumerate(grid)])
    _write_csv(out / "truth_scores.csv", header, ["subject_id", "xi1", "xi2", "xi3", "xi4"], [[str(sid), *truth.scores[i]] for i, sid in enumerate(data.subjects)])
    _write_csv(
        out / "truth_eta.csv",
        header,
        ["subject_id", "s", "eta"],
        [[str(sid), s, truth.eta[i, k]] for i, sid in enumerate(data.subjects) for k, s in enumerate(grid)],
    )
    _write_json(out / "scenario.json", {"meta": {"version": __version__}, "scenario": sc.to_dict()})
    logger.info("simulated I=%d K=%d %s data in %s", sc.I, sc.K, sc.family, out)
    return EXIT_OK


def cmd_replicate(args) -> int:
    sc = _scenario_from_args(args)
    if args.n_reps < 1:
        raise ValidationError("--n-reps must be at least 1")
    config = simulation_config(sc)
    tab = run_replications(sc, args.n_reps, max(1, args.threads), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header({"scenario": sc.to_dict(), "pipeline": _model_config(config), "n_reps": args.n_reps})
    name = sc.name or f"{sc.family}_I{sc.I}_K{sc.K}"
    write_table(out / "table.csv", [table_row(name, tab.medians)], header)
    keys = list(tab.medians) or ["time"]
    rows = []
    for rep, r in enumerate(tab.rows):
        rows.append([str(rep), "ok" if r else "failed"] + [r[k] if r else float("nan") for k in keys])
    rows.append(["median", f"{tab.n_ok}/{len(tab.rows)}"] + [tab.medians.get(k, float("nan")) for k in keys])
    _write_csv(out / "replicates.csv", header, ["replicate", "status"] + keys, rows)
    if tab.errors:
        _write_json(out / "failures.json", {"meta": {"version": __version__}, "failures": [{"replicate": r, "error": e} for r, e in tab.errors]})
    logger.info("%d of %d replicates succeeded", tab.n_ok, len(tab.rows))
    return EXIT_OK if tab.n_ok >= MIN_SUCCESS_FRACTION * len(tab.rows) else EXIT_FIT


def cmd_binarize(args) -> int:
    profiles = load_multiday_csv(args.input)
    grid = multiday_grid(args.input)
    data = binarize_profiles(profiles, args.threshold, grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_long_csv(data, out, _header({"threshold": args.threshold, "input": Path(args.input).name}))
    logger.info("binarized %d subjects on %d grid points into %s", data.I, data.K, out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcfpca", description="Generalized conditional functional PCA")
    parser.add_argument("--version", action="version", version=f"gcfpca {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress the progress log")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="run the four-step fit on a long-format CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_fit_options(p)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--cma-draws", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-missing", action="store_true", help="accept absent cells as missing at random")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="draw one dataset from a simulation scenario")
    _add_scenario_options(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replicate", help="run a simulation scenario many times and tabulate medians")
    _add_scenario_options(p)
    p.add_argument("--n-reps", type=int, default=100)
    p.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("binarize", help="turn multi-day raw profiles into binary median profiles")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_binarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stdout, force=True)
    out_dir = getattr(args, "out", None)
    if args.command == "binarize" and out_dir is not None:
        out_dir = str(Path(out_dir).parent)
    try:
        return args.func(args)
    except ValidationError as exc:
        _emit_error("ValidationError", str(exc), EXIT_VALIDATION, out_dir)
        return EXIT_VALIDATION
    except FitError as exc:
        _emit_error(type(exc).__name__, str(exc), EXIT_FIT, out_dir)
        return EXIT_FIT
    except OSError as exc:
        _emit_error("IOError", str(exc), EXIT_IO, None)
        return EXIT_IO
    except GcFpcaError as exc:
        _emit_error(type(exc).__name__, str(exc), EXIT_FIT, out_dir)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
