"""Command-line front end: ``rdpersist <subcommand> --config run.ini``.

Every run writes ``<out>/<run-id>/`` containing ``manifest``, ``trace.csv``,
``histogram.csv`` and ``summary.csv`` (plus ``trace.svg`` with ``--svg``).
Exit codes: 0 success, 2 configuration or model-invariant error, 3 numerical
failure (blow-up, positivity rejection, non-convergence).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_delay, build_model, lv_params, parse_expression
from .delay import PathSegment, band_persistence, boundary_invasion, psi_monitor, run_sfde
from .domain import EllipticOp
from .eigen import principal_eig
from .engine import simulate
from .lyapunov import (
    EDGES,
    NBINS,
    InsufficientSamples,
    LyapunovMonitor,
    OccupationMeasure,
    bin_bounds,
    drift_check,
    persistence_verdict,
)
from .models import coexistence_check, invasion_rate
from .projective import HEvaluator, diverse_profiles, estimate_lambda, linearize, merge_estimates
from .svg import polyline_svg

log = logging.getLogger("rdpersist")

SUBCOMMANDS = ("simulate", "lambda", "eigen", "invade", "coexist", "delay", "persist")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def fmt(v) -> str:
    """Stable text for CSV cells; floats get 9 significant decimals."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    if v == 0:
        return "0.000000000"
    if 1e-4 <= abs(v) < 1e9:
        return f"{v:.9f}"
    return f"{v:.9e}"


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


# ----------------------------------------------------------------------------- helpers


def initial_state(cfg: RunConfig, model, paths):
    dom = model.domain
    names = ("x",) if dom.dim == 1 else ("x", "y")
    exprs = [e.strip() for e in cfg.raw("model", "init").split(",")]
    if len(exprs) == 1:
        exprs = exprs * model.m
    if len(exprs) != model.m:
        raise ConfigError("model.init", f"need 1 or {model.m} initial profiles")
    x = np.empty((model.m, dom.n))
    for i, e in enumerate(exprs):
        fn = parse_expression(e, "model.init", names)
        x[i] = np.broadcast_to(np.asarray(fn(*dom.points.T), float), (dom.n,))
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ConfigError("model.init", "initial state must be finite and nonnegative")
    return np.broadcast_to(x, (paths, model.m, dom.n)).copy()


def boundary_z(model):
    """Auxiliary components on the extinction set (disease-free ``S`` for SIR)."""
    others = model.others
    z = np.ones((len(others), model.domain.n))
    if model.name == "sir":
        z[:] = model.params["lam"] / model.params["eta"]
    return z


def norm_operator(model):
    return EllipticOp.create(model.op.diffusion, 1.0, conj_weight=model.op.conj_weight)


class TraceRecorder:
    """Rows ``t, L1_i..., Linf, W1, W2, V[, H]`` for one path, every ``every`` steps."""

    def __init__(self, model, beta, every, path=0, H=None):
        self.monitor = LyapunovMonitor(model.domain, norm_operator(model), model.tracked, beta, record=False)
        self.every = max(1, int(every))
        self.path = path
        self.H = H
        self.m = model.m
        self.rows = []
        self._k = 0

    def header(self):
        cols = ["t"] + [f"L1_{i}" for i in range(self.m)] + ["Linf", "W1", "W2", "V"]
        return cols + (["H"] if self.H is not None else [])

    def __call__(self, t, x, dt):
        self._k += 1
        if self._k % self.every:
            return
        xp = x[self.path]
        vals = self.monitor.values(xp)
        row = [t, *vals["L1"], vals["Linf"], vals["W1"], vals["W2"], vals["V"]]
        if self.H is not None:
            row.append(float(self.H(xp[None])[0]))
        self.rows.append(row)


def _blocks(paths, block):
    out, start = [], 0
    while start < paths:
        out.append((start, min(block, paths - start)))
        start += block
    return out


def _map(fn, args, jobs):
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*args)))


def _trace_every(cfg, T, dt):
    pts = cfg.int("estimator", "trace_points", minimum=1)
    return max(1, int(round(T / dt)) // pts)


# ----------------------------------------------------------------------------- workers


def _simulate_block(text, seed, index, start, count):
    cfg = RunConfig.from_text(text)
    model = build_model(cfg)
    step = cfg.stepper()
    T = cfg.float("estimator", "T", positive=True)
    burn = cfg.float("estimator", "burn_in", nonneg=True)
    beta = cfg.float("estimator", "beta")
    band = cfg.floats("estimator", "band")
    bands = [tuple(band)] if band else []
    x0 = initial_state(cfg, model, count)
    occ = OccupationMeasure((count,), burn, bands)
    dom = model.domain
    tracked = list(model.tracked)
    masses, w2s = [], []

    def occupy(t, x, dt):
        l1 = dom.integrate(np.abs(x))
        mass = l1[:, tracked].sum(axis=-1)
        occ.add(mass, np.max(np.abs(x), axis=(-2, -1)), dt, t)
        if index == 0:
            masses.append(l1.sum(axis=-1))
            w2s.append(1.0 + l1.sum(axis=-1))

    observers = [occupy]
    rec = None
    if index == 0:
        rec = TraceRecorder(model, beta, _trace_every(cfg, T, step.dt))
        observers.append(rec)
    stats = simulate(model, step, x0, T, observers=observers, seed=seed, stream=index)
    return {
        "mass_hist": occ.mass_hist,
        "sup_hist": occ.sup_hist,
        "band_time": occ.band_time,
        "kept": occ.kept_time,
        "final_L1": dom.integrate(stats.state).sum(axis=-1),
        "max_clip": stats.max_clip,
        "steps": stats.steps,
        "trace": None if rec is None else (rec.header(), rec.rows),
        "drift": (np.array(masses), np.array(w2s)) if index == 0 else None,
        "dt": step.dt,
    }


def _lambda_block(text, seed, index, start, count):
    cfg = RunConfig.from_text(text)
    model = build_model(cfg)
    lin = linearize(model)
    step = cfg.stepper()
    T = cfg.float("estimator", "T", positive=True)
    burn = cfg.float("estimator", "burn_in", nonneg=True)
    total = cfg.int("estimator", "paths", minimum=1)
    dom = model.domain
    d = len(model.tracked)
    prof = diverse_profiles(dom, total, seed)[start : start + count]
    init = np.repeat(prof[:, None, :], d, axis=1) / d
    rec = None
    if index == 0:
        rec = TraceRecorder(
            lin.model, cfg.float("estimator", "beta"), _trace_every(cfg, T, step.dt), H=HEvaluator(lin)
        )
    est = estimate_lambda(
        lin, step, burn, T, paths=count, seed=seed, init=init, z0=boundary_z(model), observer=rec, stream=1 + index
    )
    return est, (None if rec is None else (rec.header(), rec.rows))


# ----------------------------------------------------------------------------- subcommands


def _occupation_rows(mass_hist, sup_hist):
    mass_hist = np.atleast_2d(mass_hist).sum(axis=0)
    sup_hist = np.atleast_2d(sup_hist).sum(axis=0)
    tm, ts = mass_hist.sum(), sup_hist.sum()
    rows = []
    for i in range(NBINS):
        if mass_hist[i] == 0 and sup_hist[i] == 0:
            continue
        lo, hi = bin_bounds(i)
        rows.append([i, lo, hi, mass_hist[i] / tm if tm else 0.0, sup_hist[i] / ts if ts else 0.0])
    return rows


HIST_HEADER = ["bin", "lo", "hi", "L1_fraction", "Linf_fraction"]


def run_simulate(cfg, seed, jobs, persist=False):
    paths = cfg.int("estimator", "paths", minimum=1)
    block = cfg.int("estimator", "block", minimum=1)
    args = [(cfg.text, seed, i, s, c) for i, (s, c) in enumerate(_blocks(paths, block))]
    parts = _map(_simulate_block, args, jobs)
    mass_hist = np.concatenate([p["mass_hist"] for p in parts])
    sup_hist = np.concatenate([p["sup_hist"] for p in parts])
    kept = parts[0]["kept"]
    final = np.concatenate([p["final_L1"] for p in parts])
    summary = {
        "paths": paths,
        "steps": parts[0]["steps"],
        "final_L1_mean": float(final.mean()),
        "final_L1_min": float(final.min()),
        "final_L1_max": float(final.max()),
        "max_clip": max(p["max_clip"] for p in parts),
    }
    if persist:
        if kept <= 0:
            raise InsufficientSamples("no samples after burn-in; increase estimator.T")
        delta = cfg.float("estimator", "delta", positive=True)
        floor = cfg.float("estimator", "floor", positive=True)
        band = cfg.floats("estimator", "band")
        burn = cfg.float("estimator", "burn_in", nonneg=True)
        verdicts = []
        for i in range(paths):
            occ = OccupationMeasure((), burn)
            occ.mass_hist, occ.sup_hist, occ.kept_time = mass_hist[i], sup_hist[i], kept
            verdicts.append(persistence_verdict(occ, delta, floor))
        pilot = verdicts[0]
        if band:
            if len(band) != 2 or not 0 <= band[0] < band[1]:
                raise ConfigError("estimator.band", "need 'b, B' with 0 <= b < B")
            fractions = np.concatenate([p["band_time"][:, 0] for p in parts]) / kept
            b, B = band
        else:
            b, B = pilot.b, pilot.B
            lo = int(np.searchsorted(EDGES, np.log10(b), side="right")) if b > 0 else 0
            hi = int(np.searchsorted(EDGES, np.log10(B), side="left")) + 1 if np.isfinite(B) else NBINS
            fractions = mass_hist[:, lo:hi].sum(axis=1) / kept
        summary.update(
            {
                "persistent_paths": sum(v.persistent for v in verdicts) / paths,
                "pilot_persistent": pilot.persistent,
                "band_lo": b,
                "band_hi": B,
                "band_fraction_min": float(fractions.min()),
                "band_fraction_mean": float(fractions.mean()),
                "delta": delta,
            }
        )
        mass, w2 = parts[0]["drift"]
        try:
            rep = drift_check(mass, w2, parts[0]["dt"])
            summary.update({"drift_slope": rep.slope, "drift_violations": len(rep.violations)})
        except InsufficientSamples:
            summary.update({"drift_slope": float("nan"), "drift_violations": -1})
    header, rows = parts[0]["trace"]
    return summary, (header, rows), _occupation_rows(mass_hist, sup_hist), {}


def run_lambda(cfg, seed, jobs):
    paths = cfg.int("estimator", "paths", minimum=1)
    block = cfg.int("estimator", "block", minimum=1)
    args = [(cfg.text, seed, i, s, c) for i, (s, c) in enumerate(_blocks(paths, block))]
    parts = _map(_lambda_block, args, jobs)
    est = merge_estimates([p[0] for p in parts])
    summary = est.summary()
    summary["path_spread"] = float(est.path_means.max() - est.path_means.min())
    header, rows = parts[0][1]
    return summary, (header, rows), [], {}


def run_eigen(cfg, seed, jobs):
    model = build_model(cfg)
    if len(model.tracked) != 1:
        raise ConfigError("model.name", "eigen needs a single tracked component")
    if model.name.startswith("lv") and model.m > 1:
        raise ConfigError("model.name", "eigen on lv needs species = 1")
    lin = linearize(model)
    x = np.zeros((model.m, model.domain.n))
    x[list(model.others)] = boundary_z(model)
    potential = lin.f_hat(x)[0]
    res = principal_eig(model.op, model.domain, potential, tol=cfg.float("estimator", "tol", positive=True),
                        component=model.tracked[0])
    summary = {
        "lambda": res.value,
        "residual": res.residual,
        "iterations": res.iterations,
        "tau": res.tau,
        "eigenfield_min": float(res.field.min()),
        "eigenfield_max": float(res.field.max()),
    }
    pts = model.domain.points
    extra = {
        "eigenfunction.csv": (
            [f"x{i}" for i in range(pts.shape[1])] + ["value"],
            [[*p, v] for p, v in zip(pts, res.field)],
        )
    }
    return summary, (["t"], []), [], extra


def run_invade(cfg, seed, jobs):
    params = lv_params(cfg)
    k = cfg.int("estimator", "species", minimum=0)
    if k >= params.m:
        raise ConfigError("estimator.species", f"must be < {params.m}")
    res = invasion_rate(
        params,
        k,
        cfg.stepper(),
        cfg.domain(),
        replicas=cfg.int("estimator", "replicas", minimum=8),
        burn_in=cfg.float("estimator", "burn_in", nonneg=True),
        T=cfg.float("estimator", "T", positive=True),
        seed=seed,
        delta=cfg.float("estimator", "delta", positive=True),
    )
    extra = {"replicas.csv": (["replica", "rate"], [[i, r] for i, r in enumerate(res.path_rates)])}
    return res.summary(), (["t"], []), [], extra


def run_coexist(cfg, seed, jobs):
    params = lv_params(cfg)
    rep = coexistence_check(
        params,
        cfg.stepper(),
        cfg.domain(),
        replicas=cfg.int("estimator", "replicas", minimum=8),
        burn_in=cfg.float("estimator", "burn_in", nonneg=True),
        T=cfg.float("estimator", "T", positive=True),
        seed=seed,
        delta=cfg.float("estimator", "delta", positive=True),
    )
    rows = rep.rows()
    summary = {
        "coexist": rep.coexist,
        "score": rep.score,
        "faces_evaluated": len({r["face"] for r in rows}),
        "faces_unreachable": len(rep.unreachable),
    }
    header = ["face", "species", "rate", "stderr", "spread", "replicas"]
    extra = {"rates.csv": (header, [[r[h] for h in header] for r in rows])}
    return summary, (["t"], []), [], extra


def run_delay(cfg, seed, jobs):
    model = build_delay(cfg)
    dt = cfg.float("stepper", "dt", positive=True)
    T = cfg.float("estimator", "T", positive=True)
    burn = cfg.float("estimator", "burn_in", nonneg=True)
    paths = cfg.int("estimator", "paths", minimum=1)
    delta = cfg.float("estimator", "delta", positive=True)
    if model.horizon > 0 and not np.isclose(round(model.horizon / dt) * dt, model.horizon):
        raise ConfigError("stepper.dt", "delay horizon must be a multiple of dt")
    summary = {}
    for i in range(model.n):
        inv = boundary_invasion(model, i, dt, burn, T, paths=paths, seed=seed)
        summary[f"lambda_{i}"] = inv.rate
        summary[f"lambda_{i}_stderr"] = inv.stderr
        summary[f"lambda_{i}_nonstationary"] = inv.nonstationary
    band = cfg.floats("estimator", "band") or None
    pers = band_persistence(model, dt, burn, T, paths=paths, seed=seed, band=band, delta=delta)
    summary.update(
        {
            "persistent": pers.verdict_min.persistent,
            "band_lo": pers.band[0],
            "band_hi": pers.band[1],
            "min_fraction": pers.verdict_min.fraction,
        }
    )
    if pers.fraction_min is not None:
        summary["band_fraction_min"] = float(pers.fraction_min.min())
        summary["band_fraction_max_species"] = float(pers.fraction_max.min())
    # trace of one path
    seg = PathSegment.constant(model.horizon, dt, np.ones(model.n), (1,))
    every = _trace_every(cfg, T, dt)
    rows = []

    def obs(t, s):
        if int(round(t / dt)) % every == 0:
            h = s.head[0]
            rows.append([t, *h, h.min(), h.max(), float(psi_monitor(model, s)[0])])

    run_sfde(model, seg, dt, T, seed=seed, stream=4, observer=obs)
    header = ["t"] + [f"X_{i}" for i in range(model.n)] + ["min", "max", "Psi"]
    return summary, (header, rows), [], {}


RUNNERS = {
    "simulate": run_simulate,
    "persist": lambda cfg, seed, jobs: run_simulate(cfg, seed, jobs, persist=True),
    "lambda": run_lambda,
    "eigen": run_eigen,
    "invade": run_invade,
    "coexist": run_coexist,
    "delay": run_delay,
}


# ----------------------------------------------------------------------------- driver


def run_id(subcommand, cfg: RunConfig, seed):
    h = hashlib.sha256(f"{subcommand}\n{seed}\n{cfg.digest()}".encode()).hexdigest()
    return f"{subcommand}-{h[:12]}"


def write_outputs(outdir, subcommand, cfg, seed, result, svg):
    summary, (theader, trows), hist_rows, extra = result
    os.makedirs(outdir, exist_ok=True)
    write_csv(os.path.join(outdir, "summary.csv"), list(summary), [list(summary.values())])
    write_csv(os.path.join(outdir, "trace.csv"), theader, trows)
    write_csv(os.path.join(outdir, "histogram.csv"), HIST_HEADER, hist_rows)
    files = ["summary.csv", "trace.csv", "histogram.csv"]
    for name, (header, rows) in extra.items():
        write_csv(os.path.join(outdir, name), header, rows)
        files.append(name)
    if svg:
        arr = np.array(trows, dtype=float) if trows else np.zeros((0, len(theader)))
        cols = {h: arr[:, j] for j, h in enumerate(theader[1:], start=1)}
        with open(os.path.join(outdir, "trace.svg"), "w", encoding="utf-8") as fh:
            fh.write(polyline_svg(arr[:, 0] if len(arr) else [], cols, title=f"{subcommand} {os.path.basename(outdir)}"))
        files.append("trace.svg")
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    lines = [
        f"run_id = {os.path.basename(outdir)}",
        f"subcommand = {subcommand}",
        f"seed = {seed}",
        f"config_sha256 = {cfg.digest()}",
        f"version = {__version__}",
        f"files = {', '.join(files)}",
        f"created = {stamp}",
        "",
        "# configuration",
        cfg.text.rstrip(),
        "",
    ]
    with open(os.path.join(outdir, "manifest"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def build_parser():
    p = argparse.ArgumentParser(prog="rdpersist", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="INI file with domain/noise/model/stepper/estimator sections")
    p.add_argument("--seed", type=int, default=0, help="master seed (unsigned 64-bit)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes; results do not depend on it")
    p.add_argument("--out", default="out", help="output root directory")
    p.add_argument("--svg", action="store_true", help="also write trace.svg")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = RunConfig.from_file(args.config)
        result = RUNNERS[args.subcommand](cfg, args.seed, args.jobs)
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = os.path.join(args.out, run_id(args.subcommand, cfg, args.seed))
    write_outputs(outdir, args.subcommand, cfg, args.seed, result, args.svg)
    print(outdir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
