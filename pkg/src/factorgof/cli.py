"""Command-line front end and file formats.

Subcommands: ``fit`` (write a fit document), ``test`` (write a residual test
report), ``simulate`` (write a rejection table for a bundled design), and
``indices`` (write conventional fit diagnostics).  This is the only module
that touches the filesystem.

Output files are written atomically and carry a provenance header (tool
version, seed, Monte Carlo budget, grid, input digests) but no timestamps,
so a rerun with the same seed and worker count is byte-identical.  Item
indices are 1-based on the command line.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .baseline import baseline_report
from .batteries import (
    lv_density_problem,
    make_grid,
    mv_homoscedasticity_problem,
    mv_linearity_direct_problem,
    mv_linearity_problem,
)
from .errors import ConfigurationError, DataError, FactorGofError
from .estimate import DataMatrix, FitResult, OptimOptions, ParamMapping, fit_ml
from .model import ModelSpec
from .residuals import McConfig, run_residual_test
from .simstudy import Study1Config, Study2Config, run_rejection_study

_BATTERIES_WITH_ITEM = ("linearity", "variance", "linearity-direct")


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".factorgof-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ingest_csv(path: str) -> DataMatrix:
    """Read a comma-delimited file with a header row into a DataMatrix.

    Every data cell must be a finite number; failures report the offending
    line and column.
    """
    import csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [name.strip() for name in header]
        if not header or any(not name for name in header):
            raise DataError(f"{path}: line 1: malformed header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            parsed = np.empty(len(header))
            for j, cell in enumerate(row):
                cell = cell.strip()
                if not cell:
                    raise DataError(
                        f"{path}: line {lineno}, column {j + 1} ({header[j]}): empty cell"
                    )
                try:
                    val = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: line {lineno}, column {j + 1} ({header[j]}): "
                        f"non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(val):
                    raise DataError(
                        f"{path}: line {lineno}, column {j + 1} ({header[j]}): "
                        f"non-finite value {cell!r}"
                    )
                parsed[j] = val
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows after the header")
    return DataMatrix(np.vstack(rows), column_names=header)


def load_model_file(path: str) -> ModelSpec:
    """Parse a JSON model document: m, d, loading_pattern, mean_structure."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: model document must be a JSON object")
    missing = [key for key in ("m", "d", "loading_pattern") if key not in doc]
    if missing:
        raise DataError(f"{path}: missing keys {missing}")
    try:
        return ModelSpec(
            m=int(doc["m"]),
            d=int(doc["d"]),
            loading_pattern=np.asarray(doc["loading_pattern"]),
            mean_structure=bool(doc.get("mean_structure", True)),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def write_fit_document(path, fit: FitResult, data: DataMatrix, inputs: dict,
                       seed: int, info_draws: int) -> None:
    doc = {
        "tool": "factorgof",
        "version": __version__,
        "kind": "fit",
        "seed": seed,
        "info_draws": info_draws,
        "model": {
            "m": fit.spec.m,
            "d": fit.spec.d,
            "loading_pattern": fit.spec.loading_pattern.tolist(),
            "mean_structure": fit.spec.mean_structure,
        },
        "n": data.n,
        "column_names": data.column_names,
        "estimates": {
            "nu": fit.params.nu.tolist(),
            "lambda": fit.params.lam.tolist(),
            "phi": fit.params.phi.tolist(),
            "theta": fit.params.theta.tolist(),
        },
        "free_vector": fit.free_vector.tolist(),
        "free_labels": fit.mapping.labels,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "gradient_norm": fit.gradient_norm,
        "n_iter": fit.n_iter,
        "warnings": fit.warnings,
        "inv_information": None if fit.inv_information is None else fit.inv_information.tolist(),
        "inv_observed_information": (
            None if fit.inv_observed_information is None
            else fit.inv_observed_information.tolist()
        ),
        "inputs": inputs,
    }
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_fit_document(path: str) -> FitResult:
    """Reload a fit document so tests can run without refitting."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if doc.get("kind") != "fit":
        raise DataError(f"{path}: not a fit document")
    model = doc["model"]
    spec = ModelSpec(
        m=int(model["m"]),
        d=int(model["d"]),
        loading_pattern=np.asarray(model["loading_pattern"]),
        mean_structure=bool(model["mean_structure"]),
    )
    mapping = ParamMapping(spec)
    free_vector = np.asarray(doc["free_vector"], dtype=np.float64)

    def _matrix(key):
        val = doc.get(key)
        return None if val is None else np.asarray(val, dtype=np.float64)

    return FitResult(
        params=mapping.unpack(free_vector),
        spec=spec,
        mapping=mapping,
        free_vector=free_vector,
        loglik=float(doc["loglik"]),
        converged=bool(doc["converged"]),
        gradient_norm=float(doc["gradient_norm"]),
        n_iter=int(doc["n_iter"]),
        inv_information=_matrix("inv_information"),
        inv_observed_information=_matrix("inv_observed_information"),
        warnings=list(doc.get("warnings", [])),
    )


# ---------------------------------------------------------------------------
# small formatting helpers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_grid_spec(text: str):
    axes = []
    for part in text.split(","):
        pieces = part.split(":")
        if len(pieces) != 3:
            raise ConfigurationError(
                f"bad grid spec {part!r}: expected lo:hi:count"
            )
        try:
            axes.append((float(pieces[0]), float(pieces[1]), int(pieces[2])))
        except ValueError:
            raise ConfigurationError(f"bad grid spec {part!r}") from None
    return axes


def _default_grid_spec(d: int) -> str:
    if d == 1:
        return "-3:3:31"
    if d == 2:
        return "-3:3:19,-3:3:19"
    raise ConfigurationError(f"no default grid for d={d}; pass --grid")


def _provenance_lines(command: str, pairs: list) -> list:
    lines = [f"# tool=factorgof version={__version__}", f"# command={command}"]
    lines += [f"# {key}={value}" for key, value in pairs]
    return lines


def _resolve_fit(args, data: DataMatrix):
    """Fit from --model or reload from --fit; returns (fit, provenance pairs)."""
    if bool(args.model) == bool(args.fit):
        raise ConfigurationError("exactly one of --model or --fit is required")
    if args.fit:
        fit = load_fit_document(args.fit)
        source = [("fit_sha256", _sha256(args.fit))]
    else:
        spec = load_model_file(args.model)
        fit = fit_ml(data, spec, OptimOptions(info_draws=0, seed=args.seed))
        source = [("model_sha256", _sha256(args.model))]
    if data.m != fit.spec.m:
        raise ConfigurationError(f"data has m={data.m}, model has m={fit.spec.m}")
    return fit, source


def _item_index(args, m: int) -> int:
    if args.item is None:
        raise ConfigurationError(f"--item is required for battery {args.battery!r}")
    if not 1 <= args.item <= m:
        raise IndexError(f"--item {args.item} out of range 1..{m}")
    return args.item - 1


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_fit(args) -> int:
    data = ingest_csv(args.data)
    spec = load_model_file(args.model)
    fit = fit_ml(data, spec, OptimOptions(info_draws=args.M, seed=args.seed))
    inputs = {
        "data_path": os.path.basename(args.data),
        "data_sha256": _sha256(args.data),
        "model_sha256": _sha256(args.model),
    }
    write_fit_document(args.out, fit, data, inputs, seed=args.seed, info_draws=args.M)
    status = "converged" if fit.converged else "NOT CONVERGED"
    print(f"fit written to {args.out} ({status}, loglik={fit.loglik:.4f})")
    return 0 if fit.converged else 1


def _make_problem(battery: str, grid, item0: int):
    if battery == "lv-density":
        return lv_density_problem(grid)
    if battery == "linearity":
        return mv_linearity_problem(grid, item0)
    if battery == "variance":
        return mv_homoscedasticity_problem(grid, item0)
    if battery == "linearity-direct":
        return mv_linearity_direct_problem(grid, item0)
    raise ConfigurationError(f"unknown battery {battery!r}")


def _cmd_test(args) -> int:
    data = ingest_csv(args.data)
    fit, source = _resolve_fit(args, data)
    grid_spec = args.grid or _default_grid_spec(fit.spec.d)
    axes = _parse_grid_spec(grid_spec)
    if len(axes) != fit.spec.d:
        raise ConfigurationError(
            f"grid has {len(axes)} dimensions, model has d={fit.spec.d}"
        )
    # Without --summary-grid the summary statistic pools every grid point.
    summary_axes = _parse_grid_spec(args.summary_grid) if args.summary_grid else axes
    grid = make_grid(axes, summary_axes)

    item0 = None
    if args.battery in _BATTERIES_WITH_ITEM:
        item0 = _item_index(args, fit.spec.m)
    elif args.item is not None:
        raise ConfigurationError("--item applies only to item-level batteries")
    problem = _make_problem(args.battery, grid, item0)
    report = run_residual_test(problem, fit, data, McConfig(M=args.M, seed=args.seed, s=args.s))

    d = fit.spec.d
    coord_cols = [f"x{k + 1}" for k in range(d)]
    pairs = [
        ("battery", args.battery),
        ("item", args.item if args.item is not None else ""),
        ("seed", args.seed), ("M", args.M), ("s", args.s),
        ("n", data.n),
        ("grid", grid.label), ("summary_grid", grid.summary_label),
        ("data_sha256", _sha256(args.data)),
    ] + source
    lines = _provenance_lines(f"test {args.battery}", pairs)
    lines.append("\t".join(
        ["kind"] + coord_cols
        + ["eta_hat", "eta", "residual", "se", "z", "p", "unstable", "T", "s"]
    ))
    for pt in report.points:
        lines.append("\t".join(
            ["point"]
            + [_fmt(float(c)) for c in pt.coords]
            + [_fmt(pt.eta_hat), _fmt(pt.eta), _fmt(pt.residual), _fmt(pt.se),
               _fmt(pt.z), _fmt(pt.p), str(int(pt.unstable)), "", ""]
        ))
    if report.summary is not None:
        s = report.summary
        lines.append("\t".join(
            ["summary"] + [""] * d
            + ["", "", "", "", "", _fmt(s.p), "", _fmt(s.T), str(s.s)]
        ))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"test report written to {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    if args.study == "study1":
        cfg = Study1Config(n=args.n, misspecified=args.misspecified)
    else:
        cfg = Study2Config(n=args.n, misspecified=args.misspecified)
    grid = None
    if args.grid:
        axes = _parse_grid_spec(args.grid)
        summary_axes = _parse_grid_spec(args.summary_grid) if args.summary_grid else None
        grid = make_grid(axes, summary_axes)
    item0 = args.item - 1
    if args.item < 1:
        raise IndexError(f"--item {args.item} out of range")
    table = run_rejection_study(
        cfg,
        reps=args.reps,
        seed=args.seed,
        alpha=args.alpha,
        M=args.M,
        s=args.s,
        items=(item0,),
        grid=grid,
    )

    pairs = [
        ("study", table.study), ("misspecified", int(table.misspecified)),
        ("n", table.n), ("reps", table.reps),
        ("converged", table.converged_reps), ("excluded", table.excluded),
        ("alpha", table.alpha), ("M", table.M), ("s", table.s),
        ("seed", table.seed),
        ("grid", table.grid_label), ("summary_grid", table.summary_label),
        ("band_halfwidth", _fmt(table.band_halfwidth)),
    ]
    lines = _provenance_lines(f"simulate {args.study}", pairs)
    d = 1 if args.study == "study2" else 2
    coord_cols = [f"x{k + 1}" for k in range(d)]
    lines.append("\t".join(
        ["battery", "kind"] + coord_cols + ["rejections", "valid", "rate", "band_lo", "band_hi"]
    ))
    lo = max(table.alpha - table.band_halfwidth, 0.0)
    hi = table.alpha + table.band_halfwidth
    for name, acc in table.batteries.items():
        rates = acc.point_rates()
        for l in range(len(rates)):
            lines.append("\t".join(
                [name, "point"]
                + [_fmt(float(c)) for c in acc.coords[l]]
                + [str(int(acc.point_rejections[l])), str(int(acc.point_valid[l])),
                   _fmt(float(rates[l])), _fmt(lo), _fmt(hi)]
            ))
        lines.append("\t".join(
            [name, "summary"] + [""] * d
            + [str(acc.summary_rejections), str(acc.summary_valid),
               _fmt(acc.summary_rate()), _fmt(lo), _fmt(hi)]
        ))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"rejection table written to {args.out}")
    return 0


def _cmd_indices(args) -> int:
    data = ingest_csv(args.data)
    fit, source = _resolve_fit(args, data)
    report = baseline_report(fit, data)
    doc = {
        "tool": "factorgof",
        "version": __version__,
        "kind": "indices",
        "chi2": report.chi2,
        "df": report.df,
        "p": report.p,
        "cfi": report.cfi,
        "tli": report.tli,
        "srmr": report.srmr,
        "rmsea": report.rmsea,
        "n": report.n,
        "q": report.q,
        "inputs": dict([("data_sha256", _sha256(args.data))] + source),
    }
    _atomic_write(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"indices written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorgof",
        description=(
            "Generalized-residual goodness-of-fit diagnostics for linear "
            "normal common factor models. Set FACTORGOF_WORKERS to cap "
            "kernel threads and FACTORGOF_NO_NUMBA=1 to force the pure-numpy "
            "kernel lane."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model by maximum likelihood")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--model", required=True)
    p_fit.add_argument("--out", default="fit.json")
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--M", type=int, default=10_000,
                       help="Monte Carlo draws for the inverse information")
    p_fit.set_defaults(func=_cmd_fit)

    p_test = sub.add_parser("test", help="run one residual test")
    p_test.add_argument("battery",
                        choices=["lv-density", "linearity", "variance", "linearity-direct"])
    p_test.add_argument("--data", required=True)
    p_test.add_argument("--model")
    p_test.add_argument("--fit")
    p_test.add_argument("--grid", help="lo:hi:count per dimension, comma separated")
    p_test.add_argument("--summary-grid", dest="summary_grid",
                        help="subgrid for the summary statistic (default: all grid points)")
    p_test.add_argument("--item", type=int, help="1-based item index")
    p_test.add_argument("--M", type=int, default=10_000)
    p_test.add_argument("--s", type=int, default=1)
    p_test.add_argument("--seed", type=int, default=0)
    p_test.add_argument("--out", default="report.tsv")
    p_test.set_defaults(func=_cmd_test)

    p_sim = sub.add_parser("simulate", help="run a bundled rejection study")
    p_sim.add_argument("study", choices=["study1", "study2"])
    p_sim.add_argument("--reps", type=int, default=300)
    p_sim.add_argument("--n", type=int, default=500)
    p_sim.add_argument("--misspecified", action="store_true")
    p_sim.add_argument("--M", type=int, default=4000)
    p_sim.add_argument("--s", type=int, default=1)
    p_sim.add_argument("--alpha", type=float, default=0.05)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--item", type=int, default=2, help="1-based item index (study2)")
    p_sim.add_argument("--grid")
    p_sim.add_argument("--summary-grid", dest="summary_grid")
    p_sim.add_argument("--out", default="rejections.tsv")
    p_sim.set_defaults(func=_cmd_simulate)

    p_ind = sub.add_parser("indices", help="conventional fit diagnostics")
    p_ind.add_argument("--data", required=True)
    p_ind.add_argument("--model")
    p_ind.add_argument("--fit")
    p_ind.add_argument("--seed", type=int, default=0)
    p_ind.add_argument("--out", default="indices.json")
    p_ind.set_defaults(func=_cmd_indices)

    return parser


def _merge_grid_flags(argv):
    """Join grid flags with their values so specs like -3:3:31 parse."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("--grid", "--summary-grid") and i + 1 < len(argv):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    args = _build_parser().parse_args(_merge_grid_flags(list(argv)))
    try:
        return args.func(args)
    except (FactorGofError, IndexError, OSError) as exc:
        print(f"factorgof: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
