"""Command line front end: ``nestlap fit`` writes a result bundle, ``nestlap summarize`` prints it."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import hypermarg
from .explore import NonConvergence as SearchNonConvergence
from .explore import PointBudgetExceeded
from .inner import NonConvergence as InnerNonConvergence
from .marginals import QUANTILES, Marginal
from .model import SpecError, parse, validate
from .pipeline import HYPER_MARGINALS, INT_STRATEGIES, LINCOMB_MODES, FitResult, NumericalFailure, RunConfig, fit
from .sparse import NotPositiveDefinite

__all__ = ["main", "run", "summarize", "read_data", "write_bundle", "MissingBundle", "EXIT_INVALID", "EXIT_NUMERIC"]

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERIC = 3
MISSING = "NA"
SUMMARY_FILE = "summary.json"
MANIFEST_FILE = "manifest.json"


class MissingBundle(FileNotFoundError):
    pass


def _dashed(values):
    return [v.replace("_", "-") for v in values]


def read_data(path) -> dict[str, np.ndarray]:
    """Numeric CSV with a header row; the literal ``NA`` marks a missing value."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SpecError(f"{path}: empty data file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise SpecError(f"{path}: duplicate column names")
    cols: list[list[float]] = [[] for _ in header]
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SpecError(f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}")
        for k, cell in enumerate(row):
            cell = cell.strip()
            if cell == MISSING:
                cols[k].append(math.nan)
                continue
            try:
                cols[k].append(float(cell))
            except ValueError:
                raise SpecError(f"{path}: line {lineno}, column {header[k]!r}: {cell!r} is not a number") from None
    return {h: np.asarray(c, dtype=float) for h, c in zip(header, cols)}


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def _write_density(path: Path, m: Marginal) -> None:
    lines = ["abscissa,density"] + [f"{x:.17g},{d:.17g}" for x, d in zip(m.x, m.density)]
    path.write_text("\n".join(lines) + "\n")


def _row(m: Marginal) -> dict:
    out = {"mean": m.mean, "sd": m.sd}
    for p in QUANTILES:
        out[f"q{p}"] = m.quantile(p)
    return out


def write_bundle(result: FitResult, out: Path) -> None:
    """Marginal CSVs, ``summary.json`` and ``manifest.json`` under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    hdir, ldir, cdir = out / "marginals" / "hyper", out / "marginals" / "latent", out / "marginals" / "lincomb"
    summary: dict = {"hyperparameters": [], "latent": [], "lincombs": [], "lincomb_correlation": None}
    hdir.mkdir(parents=True, exist_ok=True)
    for name, m in zip(result.hyper_names, result.hyper_marginals_natural):
        _write_density(hdir / f"{_safe(name)}.csv", m)
        summary["hyperparameters"].append({"name": name, **_row(m)})
    made = set()
    for (block, pos), m in zip(result.latent_labels, result.latent_marginals):
        d = ldir / _safe(block)
        if d not in made:
            d.mkdir(parents=True, exist_ok=True)
            made.add(d)
        _write_density(d / f"{pos}.csv", m)
        summary["latent"].append({"block": block, "index": pos, **_row(m)})
    if result.lincomb_names:
        cdir.mkdir(parents=True, exist_ok=True)
        for name, m in zip(result.lincomb_names, result.lincomb_marginals):
            _write_density(cdir / f"{_safe(name)}.csv", m)
            summary["lincombs"].append({"name": name, **_row(m)})
        summary["lincomb_correlation"] = np.asarray(result.lincomb_corr).tolist()
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=1) + "\n")
    manifest = {
        "status": "ok",
        "config": result.config.to_dict(),
        "hyper_mode": result.grid.zmap.mode.tolist(),
        "counts": result.counts,
        "timings": {k: round(v, 4) for k, v in result.timings.items()},
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1) + "\n")


def _write_failure(out: Path, config: RunConfig, message: str, theta) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "status": "numerical_failure",
        "message": message,
        "theta": None if theta is None else [float(v) for v in np.atleast_1d(theta)],
        "config": config.to_dict(),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1) + "\n")


def run(model_file, data_file, config: RunConfig, out) -> int:
    """Fit the model in ``model_file`` to ``data_file`` and write the bundle; returns the exit code."""
    out = Path(out)
    try:
        text = Path(model_file).read_text()
        data = read_data(data_file) if data_file is not None else None
        spec = parse(text, data, base_dir=Path(model_file).parent)
    except (SpecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    diags = validate(spec)
    if diags:
        for d in diags:
            print(f"invalid model: {d}", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = fit(spec, config)
    except NumericalFailure as exc:
        _write_failure(out, config, str(exc), exc.theta)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InnerNonConvergence, SearchNonConvergence, NotPositiveDefinite, PointBudgetExceeded,
            hypermarg.DegenerateAxis, hypermarg.DimensionCapExceeded, hypermarg.NonFiniteEvaluation) as exc:
        _write_failure(out, config, f"{type(exc).__name__}: {exc}", None)
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_bundle(result, out)
    return EXIT_OK


def _fmt_section(title: str, label_header: str, rows: list[tuple[str, dict]]) -> list[str]:
    width = max([len(label_header)] + [len(lbl) for lbl, _ in rows])
    cols = ["mean", "sd"] + [f"q{p}" for p in QUANTILES]
    head = f"{label_header:<{width}}" + "".join(f" {c:>12}" for c in cols)
    lines = [title, head, "-" * len(head)]
    for lbl, r in rows:
        lines.append(f"{lbl:<{width}}" + "".join(f" {r[c]:>12.5g}" for c in cols))
    return lines + [""]


def summarize(bundle) -> str:
    """Deterministic fixed-width table of a result bundle."""
    path = Path(bundle) / SUMMARY_FILE
    if not path.is_file():
        raise MissingBundle(f"no result bundle at {bundle} ({SUMMARY_FILE} missing)")
    s = json.loads(path.read_text())
    lines: list[str] = []
    if s["hyperparameters"]:
        lines += _fmt_section("hyperparameters", "name", [(r["name"], r) for r in s["hyperparameters"]])
    lines += _fmt_section("latent field", "element", [(f"{r['block']}[{r['index']}]", r) for r in s["latent"]])
    if s["lincombs"]:
        lines += _fmt_section("linear combinations", "name", [(r["name"], r) for r in s["lincombs"]])
        if s.get("lincomb_correlation") is not None:
            names = [r["name"] for r in s["lincombs"]]
            width = max(len(n) for n in names)
            lines.append("correlation")
            lines.append(" " * width + "".join(f" {n:>10}" for n in names))
            for n, row in zip(names, s["lincomb_correlation"]):
                lines.append(f"{n:<{width}}" + "".join(f" {v:>10.4f}" for v in row))
            lines.append("")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestlap", description="Nested Laplace approximations for latent Gaussian models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write a result bundle")
    p.add_argument("--model", required=True, help="model description (JSON)")
    p.add_argument("--data", default=None, help="data table (CSV, 'NA' for missing)")
    p.add_argument("--strategy", default="simplified-laplace",
                   choices=["gaussian", "simplified-laplace", "laplace"])
    p.add_argument("--int-strategy", default="auto", choices=_dashed(INT_STRATEGIES))
    p.add_argument("--hyper-marginal", default="integration-free", choices=_dashed(HYPER_MARGINALS))
    p.add_argument("--lincomb-mode", default="derived-only", choices=_dashed(LINCOMB_MODES))
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("summarize", help="print the summary table of a result bundle")
    s.add_argument("bundle")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "fit":
        if args.workers < 1:
            print("error: --workers must be at least 1", file=sys.stderr)
            return EXIT_INVALID
        config = RunConfig(strategy=args.strategy, int_strategy=args.int_strategy,
                           hyper_marginal=args.hyper_marginal, lincomb_mode=args.lincomb_mode,
                           workers=args.workers)
        return run(args.model, args.data, config, args.out)
    try:
        print(summarize(args.bundle))
    except MissingBundle as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
