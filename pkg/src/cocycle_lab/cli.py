"""``cocycle-lab`` command-line front end.

    cocycle-lab <command> --config <path> [--out <dir>] [--threads N] [--seed S] [--figures]

Each run writes into ``<out>/<command>-<hash>`` where the hash covers the
validated configuration (seed included).  Exit codes: 0 success, 2 config
error, 3 numerical failure (partial outputs are flushed first).

Output columns
--------------
lyapunov.csv   E, L_1..L_m, stderr_1..stderr_m
ids.csv        E, N
thouless.csv   E, lhs, rhs, gap
holder.csv     E, exponent, r2, usable_scales, card_zero, predicted
prediction.csv E, card_zero, predicted
levelset.csv   E, card_zero, n_plus, n_minus, i0, eta
duality.csv    E, N_long, N_finite
kam_phases.csv j, slot, re_rho, im_rho
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cocycle import lyapunov_spectrum, transfer_cocycle
from .config import (
    COMMANDS,
    load_config,
    parse_energies,
    parse_matrix,
    parse_operator,
    parse_schedule,
    parse_trig,
)
from .errors import CocycleLabError, ConfigError, InsufficientResolutionError
from .fourier import FourierMap, matrix_log_map
from .kam import kam_iterate
from .spectral import (
    duality_gap,
    finite_volume_eigenvalues,
    holder_fit,
    ids_curve,
    level_set_classify,
    predicted_holder,
    thouless_check,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class NumericalFailure(Exception):
    """Raised by a command after its partial outputs have been written."""


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return repr(v) if math.isfinite(v) else "nan"


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _json_text(doc):
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


class RunDir:
    """Single writer for one run; files are written whole, in call order."""

    def __init__(self, root, cfg):
        self.path = Path(root) / f"{cfg.command}-{cfg.digest()}"
        self.cfg = cfg
        self.written = []

    def text(self, name, content):
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / name).write_text(content, encoding="utf-8", newline="")
        self.written.append(name)

    def csv(self, name, header, rows):
        self.text(name, _csv_text(header, rows))

    def json(self, name, doc):
        self.text(name, _json_text(doc))

    def provenance(self, status, extra=None):
        doc = {
            "command": self.cfg.command,
            "config": self.cfg.doc,
            "config_hash": self.cfg.digest(),
            "version": __version__,
            "status": status,
            "outputs": sorted(set(self.written)),
        }
        doc.update(extra or {})
        self.json("provenance.json", doc)


def _fail(run, exc, extra=None):
    run.provenance("failed", {"error": f"{type(exc).__name__}: {exc}", **(extra or {})})
    raise NumericalFailure(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_lyapunov(cfg, run, threads=1):
    spec = parse_operator(cfg.get("operator", {}))
    energies = parse_energies(cfg.get("energies"))
    n_iters = int(cfg.get("n_iters", 100_000))
    samples = int(cfg.get("phase_samples", 8))
    burn_in = cfg.get("burn_in")
    m = spec.W.degree
    header = ["E"] + [f"L_{i + 1}" for i in range(2 * m)] + [f"stderr_{i + 1}" for i in range(2 * m)]
    rows = []
    try:
        for E in energies:
            L = lyapunov_spectrum(transfer_cocycle(spec, E), n_iters, samples, cfg.seed, burn_in, threads)
            rows.append([float(E), *L.values, *L.stderr])
    except CocycleLabError as exc:
        run.csv("lyapunov.csv", header, rows)
        _fail(run, exc, {"failed_energy": float(E)})
    run.csv("lyapunov.csv", header, rows)
    return {"rows": len(rows)}


def cmd_ids(cfg, run, threads=1):
    spec = parse_operator(cfg.get("operator", {}))
    family = cfg.get("family", "finite-range")
    energies = parse_energies(cfg.get("energies"))
    try:
        curve = ids_curve(spec, family, energies, int(cfg.get("box", 1000)), int(cfg.get("phase_samples", 8)),
                          cfg.seed)
    except CocycleLabError as exc:
        _fail(run, exc)
    run.text("ids.csv", curve.to_csv())
    run.json("ids.json", curve.to_json())
    return {"family": family, "dimension": curve.dimension}


def cmd_thouless(cfg, run, threads=1):
    spec = parse_operator(cfg.get("operator", {}))
    energies = parse_energies(cfg.get("energies"))
    box = int(cfg.get("box", 1000))
    samples = int(cfg.get("phase_samples", 8))
    n_iters = int(cfg.get("n_iters", 100_000))
    rows = []
    try:
        _, eigs = finite_volume_eigenvalues(spec, "finite-range", box, samples, cfg.seed)
        for E in energies:
            r = thouless_check(spec, E, box, samples, n_iters, cfg.seed, eigenvalues=eigs)
            rows.append([r.E, r.lhs, r.rhs, r.gap])
    except CocycleLabError as exc:
        run.csv("thouless.csv", ["E", "lhs", "rhs", "gap"], rows)
        _fail(run, exc)
    run.csv("thouless.csv", ["E", "lhs", "rhs", "gap"], rows)
    return {"max_gap": max(abs(r[3]) for r in rows)}


def cmd_holder(cfg, run, threads=1):
    spec = parse_operator(cfg.get("operator", {}))
    family = cfg.get("family", "finite-range")
    energies = parse_energies(cfg.get("energies"))
    targets = parse_energies(cfg.get("targets"), required=True)
    try:
        curve = ids_curve(spec, family, energies, int(cfg.get("box", 1000)), int(cfg.get("phase_samples", 8)),
                          cfg.seed)
    except CocycleLabError as exc:
        _fail(run, exc)
    run.text("ids.csv", curve.to_csv())
    try:
        table = predicted_holder(spec.W, targets, window=int(cfg.get("window", 0)))
    except CocycleLabError as exc:
        _fail(run, exc)
    run.csv("prediction.csv", ["E", "card_zero", "predicted"], table)
    rows, fits = [], []
    for (E, card, pred) in table:
        try:
            fit = holder_fit(curve, E, int(cfg.get("scale_count", 8)), cfg.get("eps0"), cfg.get("floor"))
        except InsufficientResolutionError as exc:
            rows.append([E, None, None, 0, card, pred])
            fits.append({"E": E, "error": str(exc)})
            continue
        rows.append([E, fit.exponent, fit.r2, len(fit.usable_scales), card, pred])
        fits.append(fit.to_json())
    run.csv("holder.csv", ["E", "exponent", "r2", "usable_scales", "card_zero", "predicted"], rows)
    run.json("fits.json", {"family": family, "fits": fits})
    return {"targets": len(rows)}


def cmd_levelset(cfg, run, threads=1):
    if "W" in cfg.doc:
        W = parse_trig(cfg.get("W"))
    else:
        W = parse_operator(cfg.get("operator", {})).W
    energies = parse_energies(cfg.get("energies"))
    rows, reports = [], []
    try:
        for E in energies:
            r = level_set_classify(W, E)
            rows.append([r.E, r.card_zero, r.z_plus.size, r.z_minus.size, r.i0, r.eta])
            reports.append(r.to_json())
    except CocycleLabError as exc:
        run.csv("levelset.csv", ["E", "card_zero", "n_plus", "n_minus", "i0", "eta"], rows)
        _fail(run, exc, {"failed_energy": float(E)})
    run.csv("levelset.csv", ["E", "card_zero", "n_plus", "n_minus", "i0", "eta"], rows)
    run.json("levelset.json", {"reports": reports})
    return {"rows": len(rows)}


def cmd_duality(cfg, run, threads=1):
    spec = parse_operator(cfg.get("operator", {}))
    try:
        rep = duality_gap(spec, int(cfg.get("box", 1000)), int(cfg.get("phase_samples", 8)), cfg.seed,
                          cfg.get("long_family", "long-range"), cfg.get("finite_family", "finite-range"))
    except CocycleLabError as exc:
        _fail(run, exc)
    grid = parse_energies(cfg.get("energies"), required=False)
    if grid is None:
        lo, hi = rep.energies[0], rep.energies[-1]
        grid = np.linspace(lo, hi, 401)
    n_long = np.interp(grid, rep.energies, rep.n_long)
    n_fin = np.interp(grid, rep.energies, rep.n_finite)
    run.csv("duality.csv", ["E", "N_long", "N_finite"], zip(grid, n_long, n_fin))
    run.json("duality.json", rep.to_json())
    return {"sup_gap": rep.sup_gap}


def _kam_inputs(cfg):
    if "A0" in cfg.doc:
        A0 = parse_matrix(cfg.get("A0"), "A0")
        alpha = parse_operator(cfg.get("operator", {})).alpha
        f0_doc = cfg.get("f0")
        if f0_doc is None or f0_doc == 0:
            f0 = FourierMap.zeros(alpha.d, A0.shape[0])
        else:
            try:
                f0 = FourierMap.from_json(f0_doc)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid f0: {exc}") from exc
        if f0.m != A0.shape[0] or f0.d != alpha.d:
            raise ConfigError("f0 does not match A0 and alpha")
        return A0, f0, alpha
    if "energy" not in cfg.doc:
        raise ConfigError("kam-trace needs either A0 (with optional f0) or operator + energy")
    spec = parse_operator(cfg.get("operator", {}))
    c = transfer_cocycle(spec, float(cfg.get("energy")))
    A0 = c.A.mean()
    F = c.A.left(np.linalg.inv(A0))
    f0 = matrix_log_map(F, radius=cfg.get("schedule", {}).get("max_radius", 16))
    return A0, f0, spec.alpha


def cmd_kam_trace(cfg, run, threads=1):
    schedule = parse_schedule(cfg.get("schedule"))
    A0, f0, alpha = _kam_inputs(cfg)
    try:
        trace = kam_iterate(A0, f0, alpha, schedule, int(cfg.get("max_steps", 8)))
    except CocycleLabError as exc:
        _fail(run, exc)
    run.json("kam_trace.json", trace.to_json())
    run.text("kam_phases.csv", trace.phases_csv())
    run.json("summary.json", trace.summary())
    if not trace.converged:
        run.provenance("failed", {"error": trace.failure})
        raise NumericalFailure(trace.failure)
    return {"steps": len(trace.states) - 1}


HANDLERS = {
    "lyapunov": cmd_lyapunov,
    "ids": cmd_ids,
    "thouless": cmd_thouless,
    "holder": cmd_holder,
    "levelset": cmd_levelset,
    "duality": cmd_duality,
    "kam-trace": cmd_kam_trace,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="cocycle-lab", description="Quasi-periodic cocycle toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--threads", type=int, default=None, help="worker threads (fallback: COCYCLE_LAB_THREADS)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--figures", action="store_true", help="also render PNG figures next to the tables")
    return p


def _threads(arg):
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("COCYCLE_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError("COCYCLE_LAB_THREADS must be an integer") from exc
    return 1


def run(command, config, out="runs", threads=None, seed=None, figures=False):
    """Execute one command; returns ``(exit_code, run_dir or None)``."""
    try:
        cfg = load_config(config, command, seed)
        nthreads = _threads(threads)
        rd = RunDir(out, cfg)
    except ConfigError as exc:
        print(f"cocycle-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    try:
        info = HANDLERS[command](cfg, rd, nthreads)
    except ConfigError as exc:
        print(f"cocycle-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    except NumericalFailure as exc:
        print(f"cocycle-lab: numerical failure: {exc} (partial outputs in {rd.path})", file=sys.stderr)
        return EXIT_NUMERICAL, rd.path
    except CocycleLabError as exc:
        rd.provenance("failed", {"error": f"{type(exc).__name__}: {exc}"})
        print(f"cocycle-lab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL, rd.path
    if figures:
        from .plotting import render_figures

        rd.written.extend(render_figures(command, rd.path))
    rd.provenance("ok", {"result": info})
    print(rd.path)
    return EXIT_OK, rd.path


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    code, _ = run(args.command, args.config, args.out, args.threads, args.seed, args.figures)
    return code


if __name__ == "__main__":
    sys.exit(main())
