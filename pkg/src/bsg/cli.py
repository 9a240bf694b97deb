"""Command-line front end: ``bsg <command> --config FILE [--jobs N] [--out DIR] [--seed S]``.

Exit codes: 0 success, 1 numerical non-convergence (partial outputs kept),
2 usage or configuration error.  A ``manifest.json`` is written on every
path that gets far enough to know the output directory.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig, load_config, parse_config

log = logging.getLogger("bsg")

EXIT_OK, EXIT_NONCONVERGED, EXIT_USAGE = 0, 1, 2
COMMANDS = ("spectrum", "scha-sweep", "damping-sweep", "fit", "losses", "validate")


class UsageError(Exception):
    pass


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".12g")
    return str(v)


def write_csv(path: Path, columns, rows, cfg: ScenarioConfig, command, seed):
    buf = io.StringIO()
    buf.write(f"# bsg {__version__} {command}\n")
    buf.write(f"# config_sha256: {cfg.digest()}\n")
    buf.write(f"# seed: {seed}\n")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def write_json_mirror(path: Path, columns, rows):
    data = [{c: (None if isinstance(r[c], float) and not np.isfinite(r[c]) else r[c]) for c in columns}
            for r in rows]
    path.write_text(json.dumps(data, indent=1, default=float), encoding="utf-8")


# ---------------------------------------------------------------------------
# jobs (module level so that they pickle for the process pool)


def _scha_point(cfg: ScenarioConfig, flux):
    from . import scha
    device = cfg.device.build()
    return scha.scha_solve(device, flux, tol=cfg.solver.scha_tol)


def _grid(cfg, device):
    from .selfenergy import FrequencyGrid
    return FrequencyGrid.for_device(device, cfg.sweep.grid.n_points, cfg.sweep.grid.cutoff_factor)


def _solve_sigma(cfg, device, flux):
    from . import selfenergy as se
    opts = se.SolverOptions(tol=cfg.solver.tol, max_iter=cfg.solver.max_iter, mixing=cfg.solver.mixing,
                            cutoff_fraction=cfg.solver.cutoff_fraction)
    return se.dyson_solve(device, flux, cfg.sweep.temperature_mK * 1e-3, _grid(cfg, device), opts)


def job_spectrum(cfg_json, index, seed):
    from . import spectroscopy as sp
    cfg = parse_config(cfg_json)
    device = cfg.device.build()
    flux = cfg.sweep.flux[index]
    f_min, f_max = (x * 1e9 for x in cfg.sweep.band_GHz)
    meta = {"flux": flux}
    if cfg.model == "linear-scha":
        sol = _scha_point(cfg, flux)
        meta.update(converged=sol.converged, iterations=sol.iterations, residual=sol.residual)
        if sol.ej_star <= 0:
            model = sp.LinearModel(np.inf)
        else:
            model = sp.LinearModel(sol.lj_star)
    else:
        _, sig = _solve_sigma(cfg, device, flux)
        meta.update(converged=sig.converged, iterations=sig.iterations, residual=sig.residual)
        model = sp.SelfEnergyModel(sig)
    tr = sp.synth_trace(device, model, flux, f_min, f_max, cfg.sweep.points, cfg.noise, seed + index)
    rows = [{"flux": flux, "f_GHz": f / 1e9, "re_s21": s.real, "im_s21": s.imag, "abs_s21": abs(s)}
            for f, s in zip(tr.frequencies, tr.s21)]
    return rows, meta


def job_scha(cfg_json, index, seed):
    from . import circuit
    cfg = parse_config(cfg_json)
    flux = cfg.sweep.flux[index]
    sol = _scha_point(cfg, flux)
    row = {"flux": flux, "ej_GHz": float(circuit.energy_ghz(sol.ej)),
           "ej_star_GHz": float(circuit.energy_ghz(sol.ej_star)), "ratio": sol.ratio,
           "phi_sq": sol.phi_sq, "f_j_star_GHz": sol.omega_j_star / (2 * np.pi) / 1e9,
           "iterations": sol.iterations, "converged": sol.converged, "residual": sol.residual}
    return [row], {"flux": flux, "converged": sol.converged, "iterations": sol.iterations,
                   "residual": sol.residual}


def job_damping(cfg_json, index, seed):
    from . import circuit
    from . import selfenergy as se
    from . import spectroscopy as sp
    cfg = parse_config(cfg_json)
    device = cfg.device.build()
    flux = cfg.sweep.flux[index]
    f_min, f_max = (x * 1e9 for x in cfg.sweep.band_GHz)
    gf, sig = _solve_sigma(cfg, device, flux)
    table = sp.damping_from_sigma(device, sig, flux, f_min, f_max, seed=seed)
    wj = se.renormalized_frequency(device, sig)
    modes = [{"flux": flux, "l": r.l, "f_GHz": r.f_l / 1e9, "fsr_GHz": r.fsr / 1e9,
              "gamma_int_MHz": r.gamma_int / 1e6, "gamma_ref_MHz": r.gamma_diel / 1e6,
              "gamma_j_MHz": r.gamma_j / 1e6, "p_decay": r.gamma_j / r.fsr, "flagged": r.flagged}
             for r in table.rows]
    w = sig.grid.omega
    sel = np.nonzero((w >= 2 * np.pi * f_min) & (w <= 2 * np.pi * f_max))[0]
    g_ret = gf.retarded
    sigma_rows = [{"flux": flux, "f_GHz": w[i] / (2 * np.pi) / 1e9,
                   "re_sigma_GHz": float(circuit.energy_ghz(sig.sigma[i].real)),
                   "im_sigma_GHz": float(circuit.energy_ghz(sig.sigma[i].imag)),
                   "re_g": g_ret[i].real, "im_g": g_ret[i].imag} for i in sel]
    meta = {"flux": flux, "converged": sig.converged, "iterations": sig.iterations, "residual": sig.residual,
            "fdt_residual": sig.fdt_residual, "phi_sq": sig.phi_sq,
            "f_j_star_GHz": wj / (2 * np.pi) / 1e9 if np.isfinite(wj) else None}
    return (modes, sigma_rows), meta


def job_losses(cfg_json, index, seed):
    from . import losses
    cfg = parse_config(cfg_json)
    device = cfg.device.build()
    flux = cfg.sweep.flux[index]
    lc = cfg.losses
    sol = _scha_point(cfg, flux)
    f = np.linspace(*(x * 1e9 for x in cfg.sweep.band_GHz), min(cfg.sweep.points, 2001))
    w = 2 * np.pi * f
    diel = losses.DielectricModel.for_array(device.array, lc.tan_delta_ref, lc.exponent)
    g_diel = losses.gamma_diel(diel, w, check=False)
    cj = device.squid.capacitance
    gap = lc.gap_ueV * 1e-6 * device.constants.electron_charge
    if sol.ej_star > 0:
        m_d = losses.JunctionLossModel("dielectric", sol.lj_star, cj, tan_delta=lc.junction_tan_delta, gap=gap)
        m_q = losses.JunctionLossModel("quasiparticle", sol.lj_star, cj, x_qp=lc.x_qp, gap=gap)
        g_dj = losses.gamma_boundary(device, losses.junction_admittance(m_d, w), w)
        g_qp = losses.gamma_boundary(device, losses.junction_admittance(m_q, w), w)
    else:
        g_dj = g_qp = np.zeros_like(w)
    noise = losses.FluxNoiseModel(lc.flux_noise * device.constants.flux_quantum)
    df = losses.flux_noise_broadening(device, sol, flux, w, noise)
    rows = [{"flux": flux, "f_GHz": a / 1e9, "gamma_diel_MHz": b / 1e6, "gamma_dielJ_MHz": c / 1e6,
             "gamma_qp_MHz": d / 1e6, "df_flux_MHz": e / 1e6}
            for a, b, c, d, e in zip(f, g_diel, g_dj, g_qp, df)]
    return rows, {"flux": flux, "converged": sol.converged, "iterations": sol.iterations,
                  "residual": sol.residual}


def _run_jobs(fn, cfg: ScenarioConfig, seed, jobs):
    cfg_json = cfg.model_dump_json()
    idx = list(range(len(cfg.sweep.flux)))
    if jobs > 1 and len(idx) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, [cfg_json] * len(idx), idx, [seed] * len(idx)))
    return [fn(cfg_json, i, seed) for i in idx]


# ---------------------------------------------------------------------------
# trace input for ``fit``


TRACE_COLUMNS = ("f_GHz", "re_s21", "im_s21")


def read_trace_csv(path: Path):
    """Parse a trace CSV (comment lines start with '#').  Returns {flux: Trace}."""
    from .spectroscopy import Trace
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"{path}: cannot read trace: {err.strerror}") from None
    lines = [(n + 1, ln) for n, ln in enumerate(text.splitlines()) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ConfigError(f"{path}: no data")
    reader = csv.reader([ln for _, ln in lines])
    header = next(reader)
    missing = [c for c in TRACE_COLUMNS if c not in header]
    if missing:
        raise ConfigError(f"{path}:{lines[0][0]}: missing column(s) {', '.join(missing)}")
    cols = {c: header.index(c) for c in header}
    data = {}
    for (lineno, _), rec in zip(lines[1:], reader):
        if len(rec) != len(header):
            raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
        vals = {}
        for name in TRACE_COLUMNS + (("flux",) if "flux" in cols else ()):
            raw = rec[cols[name]]
            try:
                vals[name] = float(raw)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: column '{name}': cannot parse {raw!r}") from None
        fl = vals.get("flux", 0.0)
        data.setdefault(fl, []).append((vals["f_GHz"] * 1e9, vals["re_s21"] + 1j * vals["im_s21"]))
    out = {}
    for fl, pts in data.items():
        arr = np.array(pts)
        try:
            out[fl] = Trace(arr[:, 0].real, arr[:, 1], fl, {"source": str(path)})
        except ValueError as err:
            raise ConfigError(f"{path}: flux {fl}: {err}") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_spectrum(cfg, out, seed, jobs):
    res = _run_jobs(job_spectrum, cfg, seed, jobs)
    rows = [r for rr, _ in res for r in rr]
    cols = ["flux", "f_GHz", "re_s21", "im_s21", "abs_s21"]
    return {"spectrum.csv": (cols, rows)}, [m for _, m in res]


def cmd_scha_sweep(cfg, out, seed, jobs):
    res = _run_jobs(job_scha, cfg, seed, jobs)
    rows = [r for rr, _ in res for r in rr]
    cols = ["flux", "ej_GHz", "ej_star_GHz", "ratio", "phi_sq", "f_j_star_GHz", "iterations", "converged",
            "residual"]
    return {"scha.csv": (cols, rows)}, [m for _, m in res]


def cmd_damping_sweep(cfg, out, seed, jobs):
    res = _run_jobs(job_damping, cfg, seed, jobs)
    modes = [r for (m, _), _ in res for r in m]
    sig = [r for (_, s), _ in res for r in s]
    mcols = ["flux", "l", "f_GHz", "fsr_GHz", "gamma_int_MHz", "gamma_ref_MHz", "gamma_j_MHz", "p_decay",
             "flagged"]
    scols = ["flux", "f_GHz", "re_sigma_GHz", "im_sigma_GHz", "re_g", "im_g"]
    return {"damping.csv": (mcols, modes), "sigma.csv": (scols, sig)}, [m for _, m in res]


def cmd_fit(cfg, out, seed, jobs, base_dir=Path(".")):
    from . import spectroscopy as sp
    if not cfg.fit.traces:
        raise ConfigError("fit.traces: at least one trace file is required")
    rows, meta = [], []
    for name in cfg.fit.traces:
        p = Path(name)
        if not p.is_absolute():
            p = base_dir / p
        for fl, tr in sorted(read_trace_csv(p).items()):
            fits = sp.fit_trace(tr, cfg.fit.prominence, seed)
            for k, ft in enumerate(fits):
                err = ft.stderr if ft.success else np.full(4, np.nan)
                rows.append({"source": p.name, "flux": fl, "index": k, "f_GHz": ft.f_l / 1e9,
                             "q_internal": ft.q_internal, "q_external": ft.q_external,
                             "asymmetry": ft.asymmetry, "gamma_int_MHz": ft.gamma_int / 1e6,
                             "f_err_GHz": err[0] / 1e9, "residual_rms": ft.residual_rms, "success": ft.success})
            meta.append({"source": p.name, "flux": fl, "converged": all(f.success for f in fits),
                         "resonances": len(fits)})
    cols = ["source", "flux", "index", "f_GHz", "q_internal", "q_external", "asymmetry", "gamma_int_MHz",
            "f_err_GHz", "residual_rms", "success"]
    return {"fits.csv": (cols, rows)}, meta


def cmd_losses(cfg, out, seed, jobs):
    res = _run_jobs(job_losses, cfg, seed, jobs)
    rows = [r for rr, _ in res for r in rr]
    cols = ["flux", "f_GHz", "gamma_diel_MHz", "gamma_dielJ_MHz", "gamma_qp_MHz", "df_flux_MHz"]
    return {"losses.csv": (cols, rows)}, [m for _, m in res]


def cmd_validate(cfg, out, seed, jobs):
    from .validation import run_suite
    results = run_suite(seed=seed)
    rows = [{"check": r.name, "passed": r.passed, "detail": r.detail} for r in results]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}")
    meta = [{"check": r.name, "converged": r.passed} for r in results]
    return {"validate.csv": (["check", "passed", "detail"], rows)}, meta


HANDLERS = {"spectrum": cmd_spectrum, "scha-sweep": cmd_scha_sweep, "damping-sweep": cmd_damping_sweep,
            "fit": cmd_fit, "losses": cmd_losses, "validate": cmd_validate}


def build_parser():
    p = argparse.ArgumentParser(prog="bsg", description="Boundary sine-Gordon circuit simulator")
    p.add_argument("--version", action="version", version=f"bsg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=(name != "validate"), help="scenario JSON file")
        s.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
        s.add_argument("--out", default=None, help="output directory (overrides outputs.dir)")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    return p


class _Parser(argparse.ArgumentParser):
    pass


def _write_manifest(out: Path, manifest: dict):
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str),
                                           encoding="utf-8")
    except OSError as err:
        log.error("cannot write manifest: %s", err)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BSG_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    t0 = time.time()
    out = Path(args.out) if args.out else None
    manifest = {"tool": "bsg", "version": __version__, "command": args.command, "status": "started"}
    if args.jobs < 1:
        print("bsg: --jobs must be >= 1", file=sys.stderr)
        manifest.update(status="usage-error", exit_code=EXIT_USAGE, error="--jobs must be >= 1")
        _write_manifest(out or Path("bsg_out"), manifest)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config) if args.config else ScenarioConfig()
    except ConfigError as err:
        print(f"bsg: config error:\n{err}", file=sys.stderr)
        manifest.update(status="config-error", exit_code=EXIT_USAGE, error=str(err),
                        wall_clock_s=round(time.time() - t0, 3))
        _write_manifest(out or Path("bsg_out"), manifest)
        return EXIT_USAGE
    out = out or Path(cfg.outputs.dir)
    seed = cfg.seed if args.seed is None else args.seed
    manifest.update(config_sha256=cfg.digest(), seed=seed, jobs=args.jobs)
    log.info("%s: config %s, seed %d, %d flux point(s), output %s", args.command, cfg.digest()[:12], seed,
             len(cfg.sweep.flux), out)
    base = Path(args.config).parent if args.config else Path(".")
    code = EXIT_OK
    try:
        out.mkdir(parents=True, exist_ok=True)
        handler = HANDLERS[args.command]
        if args.command == "fit":
            files, meta = handler(cfg, out, seed, args.jobs, base_dir=base)
        else:
            files, meta = handler(cfg, out, seed, args.jobs)
        written = []
        for name, (cols, rows) in files.items():
            write_csv(out / name, cols, rows, cfg, args.command, seed)
            written.append(name)
            if cfg.outputs.json_mirror:
                jname = name.rsplit(".", 1)[0] + ".json"
                write_json_mirror(out / jname, cols, rows)
                written.append(jname)
        for m in meta:
            log.debug("point %s", json.dumps(m, sort_keys=True, default=str))
        manifest["points"] = meta
        manifest["outputs"] = written
        if not all(m.get("converged", True) for m in meta):
            code = EXIT_NONCONVERGED
            manifest["status"] = "non-converged"
        else:
            manifest["status"] = "ok"
    except ConfigError as err:
        print(f"bsg: input error:\n{err}", file=sys.stderr)
        manifest.update(status="config-error", error=str(err))
        code = EXIT_USAGE
    except OSError as err:
        print(f"bsg: {err}", file=sys.stderr)
        manifest.update(status="io-error", error=str(err))
        code = EXIT_USAGE
    manifest["exit_code"] = code
    manifest["wall_clock_s"] = round(time.time() - t0, 3)
    _write_manifest(out, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
