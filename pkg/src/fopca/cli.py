"""Command-line entry point ``fopca``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
Every successful run leaves a ``manifest.json`` in its ``--out`` directory;
a failed run removes whatever it had written. ``FOPCA_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import extra_spectrum, fit_bulk, make_probes, probe_incoherence
from .errors import (
    DegreesOfFreedomError,
    DimensionError,
    FopcaError,
    InputError,
    PoleError,
    RankError,
    RequiresSyntheticError,
    SingularVarianceError,
    UnsupportedRegimeError,
    WeakInstrumentError,
)
from .inference import RegressionData, iv_estimate, robustness_profile
from .montecarlo import (
    DgpConfig,
    ExperimentSpec,
    generate,
    run_replication,
    run_spec,
    t_dump_csv,
    table_csv,
)
from .mplaw import SpectralMeasure, check_regularity, density, solve_law
from .panel import Panel, fmt_float, full_svd, read_panel_csv, write_matrix_csv

log = logging.getLogger("fopca")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_CONFIG_ERRORS = (
    InputError,
    DimensionError,
    DegreesOfFreedomError,
    RequiresSyntheticError,
    UnsupportedRegimeError,
    PoleError,
    RankError,
)


class ConfigError(Exception):
    """Bad command-line input detected before any computation."""


class Outputs:
    """Tracks files written under ``--out`` so a failed run can remove them."""

    def __init__(self, root):
        self.root = Path(root)
        self.created_root = not self.root.exists()
        self.paths: list[Path] = []
        self.started = datetime.now(timezone.utc)

    def path(self, name) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def write_text(self, name, text):
        self.path(name).write_text(text, encoding="utf-8", newline="")

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")

    def rollback(self):
        for p in reversed(self.paths):
            if p.is_file():
                p.unlink()
        # remove directories we created, deepest first, if now empty
        dirs = sorted({p.parent for p in self.paths}, key=lambda d: -len(d.parts))
        for d in dirs:
            while d != self.root.parent and d.exists() and not any(d.iterdir()):
                if d == self.root and not self.created_root:
                    break
                d.rmdir()
                d = d.parent
        if self.created_root and self.root.exists() and not any(self.root.iterdir()):
            self.root.rmdir()

    def manifest(self, command, config_bytes: bytes, seed):
        rel = sorted(str(p.relative_to(self.root)) for p in self.paths)
        self.write_json("manifest.json", {
            "command": command,
            "config_digest": "sha256:" + hashlib.sha256(config_bytes).hexdigest(),
            "seed": seed,
            "version": __version__,
            "started": self.started.isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "outputs": rel,
        })


def _read_json(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return raw, json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from None


def _csv_text(header, rows):
    lines = [",".join(header)]
    lines += [",".join(r) for r in rows]
    return "\n".join(lines) + "\n"


def _jsonable(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else None


def _parse_int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


# ------------------------------------------------------------------- simulate


def cmd_simulate(args, out: Outputs):
    raw, obj = _read_json(args.spec)
    spec = ExperimentSpec.from_dict(obj).with_overrides(args.reps, args.seed)
    log.info("simulate: %d cell(s), %d replications, R = %s",
             len(spec.cells()), spec.dgp.replications, list(spec.R_list))
    results = run_spec(spec, threads=args.threads)
    out.write_text("table.csv", table_csv(results))
    if args.dump_t:
        out.write_text("t_stats.csv", t_dump_csv(results))
    if args.dump_data:
        for i, cfg in enumerate(spec.cells()):
            _dump_replication(out, f"data/cell{i}", cfg, spec)
    out.manifest("simulate", raw, spec.dgp.seed)


def _dump_replication(out, prefix, cfg, spec):
    """Panel and outcomes of replication 0 plus the in-memory estimates per R."""
    panel, _, data = generate(cfg, 0)
    write_matrix_csv(out.path(f"{prefix}/panel.csv"), panel.data)
    cols = [data.y, data.g] + ([data.z] if data.z is not None else [])
    names = ["y", "g"] + (["z"] if data.z is not None else [])
    rows = [[fmt_float(c[t]) for c in cols] for t in range(cfg.t)]
    out.write_text(f"{prefix}/outcomes.csv", _csv_text(names, rows))
    rep = run_replication(cfg, 0, spec.R_list, spec.mode)
    out.write_json(f"{prefix}/estimates.json", {
        "mode": spec.mode,
        "dgp": cfg.to_dict(),
        "beta_hat": {str(R): rep.beta_hats[R] for R in spec.R_list},
    })


# ------------------------------------------------------------------- estimate


def _read_outcomes(path, T):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            fieldnames = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    missing = {"y", "g"} - set(fieldnames)
    if missing:
        raise ConfigError(f"{path}: missing column(s) {sorted(missing)}")
    if len(rows) != T:
        raise ConfigError(f"{path}: {len(rows)} rows but the panel has {T} columns")

    def column(name):
        return np.array([float(r[name]) for r in rows])

    try:
        return column("y"), column("g"), (column("z") if "z" in fieldnames else None)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _result_json(res, R, warn):
    if res is None:
        return {"beta_hat": None, "se": None, "t": None, "first_stage_t": None,
                "R": R, "gamma_hat": None, "warnings": warn}
    return {
        "beta_hat": res.beta_hat,
        "se": res.se,
        "t": res.t_stat,
        "first_stage_t": _jsonable(res.first_stage_t),
        "R": R,
        "gamma_hat": res.gamma_hat,
        "warnings": list(res.warnings) + warn,
    }


def cmd_estimate(args, out: Outputs):
    if (args.R is None) == (args.grid is None):
        raise ConfigError("give exactly one of --R or --grid")
    panel = read_panel_csv(args.panel, header=args.header)
    y, g, z = _read_outcomes(args.outcomes, panel.n_cols)
    mode = "iv" if args.iv else "ols"
    if mode == "ols":
        z = None
    elif z is None:
        log.warning("no instrument column z; IV mode uses z = g")
        z = g
    data = RegressionData(y, g, panel, z)
    config = json.dumps({"mode": mode, "R": args.R, "grid": args.grid,
                         "panel": os.path.basename(args.panel),
                         "outcomes": os.path.basename(args.outcomes)}, sort_keys=True).encode()
    if args.grid is not None:
        rows = robustness_profile(data, _parse_int_list(args.grid), mode)
        table = []
        for row in rows:
            r = row.result
            table.append([
                str(row.R),
                fmt_float(r.beta_hat) if r else "",
                fmt_float(r.se) if r else "",
                fmt_float(r.t_stat) if r else "",
                fmt_float(r.first_stage_t) if r and np.isfinite(r.first_stage_t) else "",
                row.error or "",
            ])
        out.write_text("grid.csv", _csv_text(["R", "beta_hat", "se", "t", "first_stage_t", "warning"], table))
    else:
        warn = []
        try:
            res = iv_estimate(data, args.R, mode)
        except WeakInstrumentError as exc:
            res, warn = None, [f"weak instrument: {exc}"]
        except SingularVarianceError as exc:
            res, warn = None, [f"singular variance: {exc}"]
        out.write_json("result.json", _result_json(res, args.R, warn))
    out.manifest("estimate", config, None)


# ------------------------------------------------------------------- diagnose


def cmd_diagnose(args, out: Outputs):
    truth = None
    if args.spec:
        raw, obj = _read_json(args.spec)
        cfg = DgpConfig.from_dict(obj.get("dgp", obj) if isinstance(obj, dict) else obj)
        if args.seed is not None:
            cfg = DgpConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
        panel, truth, _ = generate(cfg, args.rep)
        seed = cfg.seed
    elif args.panel:
        panel = read_panel_csv(args.panel, header=args.header)
        raw, seed = Path(args.panel).read_bytes(), args.seed
    else:
        raise ConfigError("give --panel or --spec")
    R = args.R
    if not 1 <= R < min(panel.n_rows, panel.n_cols):
        raise ConfigError(f"--R must lie in [1, {min(panel.n_rows, panel.n_cols) - 1}]")
    bulk = fit_bulk(panel, R, margin=args.margin)
    svd = full_svd(panel)
    scree = [
        [str(k + 1), fmt_float(s), fmt_float(e), "1" if flag else "0"]
        for k, (s, e, flag) in enumerate(zip(svd.singular_values, bulk.eigenvalues, bulk.spike))
    ]
    out.write_text("scree.csv", _csv_text(["k", "singular_value", "eigenvalue", "spike"], scree))
    probes = make_probes(panel.n_rows, panel.n_cols, seed=args.probe_seed)
    top = svd.columns(0, R)
    report = {
        "N": panel.n_rows,
        "T": panel.n_cols,
        "R": R,
        "mp_fit": {
            "phi": bulk.law.phi,
            "edges": bulk.law.edges.tolist(),
            "n_atoms": bulk.law.measure.n_atoms,
            "margin": bulk.margin,
        },
        "n_spikes": int(bulk.spike.sum()),
        "probe_incoherence": {
            "left": probe_incoherence(top.left, probes.left),
            "right": probe_incoherence(top.right, probes.right),
        },
    }
    if truth is not None and R >= truth.rank:
        rep = extra_spectrum(panel, truth, R, probes)
        report["extra_spectrum"] = {
            "r": rep.r,
            "gaps": rep.gaps.tolist(),
            "incoherence_left": rep.incoherence_left,
            "incoherence_right": rep.incoherence_right,
            "ortho_left": rep.ortho_left,
            "ortho_right": rep.ortho_right,
            "nu_m": rep.nu_m,
        }
    out.write_json("report.json", report)
    out.manifest("diagnose", raw, seed)


# ----------------------------------------------------------------- mp-density


def cmd_mp_density(args, out: Outputs):
    raw, obj = _read_json(args.spec)
    try:
        atoms = obj["atoms"]
        phi = float(obj["phi"])
        grid = obj["grid"]
        xs = np.linspace(float(grid["min"]), float(grid["max"]), int(grid["points"]))
        eta = obj.get("eta")
        eta = None if eta is None else float(eta)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"mp-density spec: {exc!r}") from None
    if not isinstance(atoms, list) or not all(isinstance(a, list) and len(a) == 2 for a in atoms):
        raise ConfigError("atoms must be a list of [s, w] pairs")
    law = solve_law(SpectralMeasure.from_atoms(atoms), phi)
    d = density(law, xs, eta)
    out.write_text("density.csv", _csv_text(["x", "density"],
                                            [[fmt_float(x), fmt_float(v)] for x, v in zip(xs, d)]))
    report = {
        "phi": phi,
        "critical_points": law.critical_points.tolist(),
        "edges": law.edges.tolist(),
        "bulks": [list(b) for b in law.bulks],
        "degenerate": law.degenerate.tolist(),
    }
    if "delta" in obj:
        try:
            reg = check_regularity(law, float(obj["delta"]), float(obj.get("delta_prime", obj["delta"])))
            report["regularity"] = {
                "regular": reg.regular,
                "edges": [{"k": e.index, "edge": e.edge, "above_delta": e.above_delta,
                           "separated": e.separated, "away_from_poles": e.away_from_poles}
                          for e in reg.edge_verdicts],
                "bulks": [{"k": b.index, "min_density": b.min_density, "threshold": b.threshold}
                          for b in reg.bulk_verdicts],
            }
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"regularity parameters: {exc}") from None
    out.write_json("report.json", report)
    out.manifest("mp-density", raw, None)


# -------------------------------------------------------------------- selftest


def _selftest_checks():
    from . import montecarlo as mc
    from . import panel as pc
    from . import pca

    def svd_diag():
        s = pc.svd_top(np.diag([3.0, 2.0, 1.0]), 2).singular_values
        return np.allclose(s, [3, 2])

    def demean():
        return np.allclose(pc.demean_columns(np.array([[1.0], [2.0], [3.0]])).ravel(), [-1, 0, 1])

    def noiseless():
        rs = np.random.default_rng(0)
        B, F = rs.standard_normal((30, 2)), rs.standard_normal((40, 2))
        X = B @ F.T
        return np.allclose(pca.fit(X, 4).m_hat, X, atol=1e-10)

    def mp_edges():
        law = solve_law(SpectralMeasure([1.0], [1.0]), 0.5)
        return np.allclose(sorted(law.edges), [(1 - 0.5**0.5) ** 2, (1 + 0.5**0.5) ** 2], atol=1e-10)

    def f_value():
        from .mplaw import evaluate_f
        return abs(evaluate_f(SpectralMeasure([1.0], [1.0]), 0.5, -2.0)) < 1e-14

    def exact_fit():
        T = 20
        g = np.arange(T, dtype=float) ** 1.5
        data = RegressionData(2.0 * g, g, Panel(np.ones((5, T))))
        try:
            iv_estimate(data, 0, "ols")
        except SingularVarianceError as exc:
            return abs(exc.beta_hat - 2.0) < 1e-10
        return False

    def ks():
        from scipy.special import ndtri
        n = 1000
        return mc.ks_test_normal(ndtri((np.arange(1, n + 1) - 0.5) / n)) > 0.999 and \
            mc.ks_test_normal(np.zeros(n)) < 1e-10

    def summary():
        s = mc.summarize([1.0, 2.0, 3.0])
        return s.mean == 2.0 and s.sd == 1.0

    def r0():
        panel, truth, _ = mc.generate(mc.DgpConfig(n=20, t=30, r=0, replications=1), 0)
        return np.array_equal(panel.data, truth.noise)

    return [("svd_top diagonal", svd_diag), ("demean_columns", demean),
            ("noiseless recovery", noiseless), ("MP single-atom edges", mp_edges),
            ("f(-2) = 0", f_value), ("exact-fit variance flag", exact_fit),
            ("KS extremes", ks), ("summarize (1,2,3)", summary), ("r = 0 panel", r0)]


def cmd_selftest(args, out: Outputs | None):
    failures = 0
    for name, check in _selftest_checks():
        t0 = time.perf_counter()
        try:
            ok = bool(check())
        except Exception as exc:  # report and keep going
            ok = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}  [{time.perf_counter() - t0:.3f}s]")
    if failures:
        raise SelftestFailed(f"{failures} selftest check(s) failed")


class SelftestFailed(Exception):
    pass


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fopca",
        description="Fixed-order PCA estimation, diagnostics and simulation.",
        epilog="exit codes: 0 success, 2 invalid input/configuration, 3 numerical failure. "
               "Set FOPCA_LOG (DEBUG, INFO, WARNING, ERROR) for the log level.",
    )
    p.add_argument("--version", action="version", version=f"fopca {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment spec")
    s.add_argument("spec", help="JSON experiment spec {dgp, R_list, mode[, sweep]}")
    s.add_argument("--out", required=True)
    s.add_argument("--reps", type=int, help="override dgp.replications")
    s.add_argument("--seed", type=int, help="override dgp.seed")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--dump-t", action="store_true", help="write per-replication t statistics")
    s.add_argument("--dump-data", action="store_true", help="write replication 0 data and estimates")

    e = sub.add_parser("estimate", help="factor-augmented OLS/IV on a panel CSV")
    e.add_argument("--panel", required=True, help="panel CSV, rows = units, columns = periods")
    e.add_argument("--outcomes", required=True, help="CSV with header y,g[,z]")
    e.add_argument("--header", action="store_true", help="panel CSV has a header row")
    e.add_argument("--R", type=int)
    e.add_argument("--grid", help="comma-separated working dimensions")
    m = e.add_mutually_exclusive_group()
    m.add_argument("--ols", action="store_true", help="z = g (default)")
    m.add_argument("--iv", action="store_true")
    e.add_argument("--out", required=True)

    d = sub.add_parser("diagnose", help="scree, MP bulk fit and probe incoherence")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--panel")
    src.add_argument("--spec", help="JSON DGP config (or experiment spec) for a synthetic panel")
    d.add_argument("--header", action="store_true")
    d.add_argument("--R", type=int, required=True)
    d.add_argument("--rep", type=int, default=0)
    d.add_argument("--seed", type=int)
    d.add_argument("--probe-seed", type=int, default=0)
    d.add_argument("--margin", type=float, default=0.1, help="relative margin above the MP edge")
    d.add_argument("--out", required=True)

    mp = sub.add_parser("mp-density", help="deformed MP density and edges")
    mp.add_argument("spec", help="JSON {atoms: [[s, w], ...], phi, grid: {min, max, points}, eta}")
    mp.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run quick built-in checks")
    return p


_COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "mp-density": cmd_mp_density,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FOPCA_LOG", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    if args.command == "selftest":
        try:
            cmd_selftest(args, None)
        except SelftestFailed as exc:
            print(exc, file=sys.stderr)
            return EXIT_NUMERIC
        return EXIT_OK

    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    out = Outputs(args.out)
    try:
        _COMMANDS[args.command](args, out)
    except (ConfigError, *_CONFIG_ERRORS) as exc:
        out.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FopcaError, ArithmeticError, np.linalg.LinAlgError) as exc:
        out.rollback()
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BaseException:
        out.rollback()
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
