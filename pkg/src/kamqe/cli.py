"""Command-line driver.

Every subcommand reads an optional JSON config (``--config``), writes CSV and
JSON files under ``--out`` and prints a short summary. With ``--assert`` the
exit code is 0 only if every invariant checked by the pipeline held.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import flow
from .config import ConfigError, load_config
from .diophantine import DiophantineParams, complement_measure_estimate
from .errors import CertificationFailure, KamqeError
from .kam import KamOptions, bnf_leading, kam_step_family, symplectic_defect
from .model import Box, load_model, pendulum
from .quantum import quantize, track_flow

log = logging.getLogger("kamqe")

PIPELINES = ("diophantine", "kam", "spectrum", "flow", "qe-stat", "covering", "report", "full")


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else format(float(x), ".12g")
    if isinstance(x, (tuple, list, np.ndarray)):
        return " ".join(_fmt(v) for v in x)
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if math.isnan(x) or math.isinf(x) else x
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _slope(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


@dataclass
class ExperimentReport:
    """Summary of one invocation: per-pipeline results and invariant checks."""

    config: dict
    sections: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def check(self, name, ok):
        self.checks[name] = bool(ok)
        return ok

    @property
    def passed(self):
        return all(self.checks.values())

    def to_dict(self):
        return {"config": self.config, "sections": self.sections, "checks": self.checks,
                "files": sorted(self.files), "passed": self.passed}


class Context:
    """Shared, lazily computed pipeline state for one invocation."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.H = load_model(cfg.model)
        self.report = ExperimentReport(cfg.model_dump(mode="json", exclude={"out"}))
        self._bounds = None
        self._scan = None

    def params(self):
        d = self.cfg.diophantine
        return DiophantineParams(d.kappa, d.tau, d.K_max, d.boundary_margin).validate(self.H.dim)

    def kam_opts(self):
        k = self.cfg.kam
        return KamOptions(C_div=k.C_div, s=k.s, r=k.r, eps0=k.eps0, M=k.M, drop_tol=k.drop_tol,
                          refit_tol=k.refit_tol, seed=self.cfg.seed)

    def quasi(self):
        q = self.cfg.quasi
        return flow.QuasiConfig(q.omega_center, q.omega_radius, q.L, q.theta, self.cfg.gamma(self.H.dim), q.n_S,
                                q.patch_margin, self.cfg.kam.K0_degree)

    def emit_csv(self, name, header, rows):
        write_csv(self.out / name, header, rows)
        self.report.files.append(name)

    def emit_json(self, name, obj):
        write_json(self.out / name, obj)
        self.report.files.append(name)

    def bounds(self):
        if self._bounds is None:
            c, f = self.cfg, self.cfg.flow
            d = c.diophantine
            region = Box(d.search_lo, d.search_hi)
            self._bounds = flow.speed_bounds(self.H, c.band, c.t_interval, self.params(), f.c_target, region,
                                             f.n_E, f.n_t, f.n_samples, c.seed, f.delta)
        return self._bounds

    def scan(self):
        if self._scan is None:
            c = self.cfg
            self._scan = flow.non_concentration_scan(self.H, list(c.h_list), c.band, c.t_grid(), self.bounds(),
                                                     self.params(), self.quasi(), self.kam_opts(), c.seed)
        return self._scan


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def run_diophantine(ctx):
    d = ctx.cfg.diophantine
    region = Box(d.measure_lo, d.measure_hi)
    rows = []
    for k in d.kappa_grid:
        p = DiophantineParams(k, d.measure_tau, d.measure_K_max).validate(region.dim)
        m, se = complement_measure_estimate(region, p, d.n_samples, ctx.cfg.seed)
        rows.append((k, d.measure_tau, d.measure_K_max, m, se))
    ctx.emit_csv("diophantine.csv", ["kappa", "tau", "K_max", "measure_estimate", "std_err"], rows)
    slope = _slope([r[0] for r in rows], [r[3] for r in rows])
    by_k = sorted(rows)
    mono = all(b[3] >= a[3] - 2 * math.hypot(a[4], b[4]) for a, b in zip(by_k, by_k[1:]))
    ctx.report.sections["diophantine"] = {"slope": slope, "monotone": mono}
    if len(rows) > 1:
        ctx.report.check("diophantine.slope_in_[0.75,1.25]", 0.75 <= slope <= 1.25)
    ctx.report.check("diophantine.monotone", mono)


def run_kam(ctx):
    k = ctx.cfg.kam
    opts = ctx.kam_opts()
    # epsilon sweep on the pendulum
    P = pendulum()
    rows, norms, last = [], [], None
    for eps in k.eps_grid:
        st = kam_step_family(P, eps, None, opts)
        norms.append(st.diagnostics["norm_after"])
        last = st
    e_slope = _slope(k.eps_grid, norms)
    for eps, nrm in zip(k.eps_grid, norms):
        rows.append((eps, nrm, e_slope))
    ctx.emit_csv("kam_eps.csv", ["eps", "remainder_norm", "fitted_exponent"], rows)
    ctx.emit_json("kam_step.json", last.to_dict())
    sym = symplectic_defect(last)
    # leading normal form of the configured model
    H = ctx.H
    box = Box(k.box_lo, k.box_hi)
    b = bnf_leading(H, k.t_grid, box, opts, steps=k.steps)
    g = np.stack(np.meshgrid(*[np.linspace(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo), 10)
                               for lo, hi in zip(box.lo, box.hi)], indexing="ij"), -1).reshape(-1, H.dim)
    dK = lambda I: H.d_t().average_values(I, 0.0)  # noqa: E731
    err = float(np.abs(b.dK0_dt(g) - dK(g)).max())
    defect = b.K0_defect(g, dK)
    d_slope = _slope(b.ts, defect)
    ctx.emit_csv("kam_t.csv", ["t", "remainder_norm", "K0_defect", "fitted_exponent"],
                 [(t, r, df, d_slope) for t, r, df in zip(b.ts, b.remainder_norms, defect)])
    ctx.report.sections["kam"] = {"eps_exponent": e_slope, "symplectic_defect": sym, "dK0_error": err,
                                  "K0_defect_exponent": d_slope, "remainder_norms": b.remainder_norms}
    ctx.report.check("kam.eps_exponent>=1.4", e_slope >= 1.4)
    ctx.report.check("kam.symplectic<1e-8", sym < 1e-8)
    ctx.report.check("kam.dK0_error<1e-6", err < 1e-6)
    ctx.report.check("kam.K0_defect_exponent>=1.1", d_slope >= 1.1)


def run_spectrum(ctx):
    c = ctx.cfg
    rows, summary = [], {}
    for h in c.h_list:
        tr = track_flow(ctx.H, h, c.quasi.theta, c.t_grid(), c.band, L=c.quasi.L,
                        overlap_min=c.flow.overlap_min, max_bisect=c.flow.max_bisect)
        E, HV = tr.series_matrix()
        fd, hv_mid = tr.speeds()
        X = tr.crossing_matrix()
        for i, t in enumerate(tr.ts):
            for j in np.nonzero(np.isfinite(E[i]))[0]:
                sp = fd[i, j] if i < len(fd) else float("nan")
                flag = bool(X[i, j]) if i < len(X) else False
                rows.append((h, t, j, E[i, j], sp, HV[i, j], flag))
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.abs(fd - hv_mid) / np.abs(hv_mid)
        ok = np.isfinite(err) & ~X
        med = float(np.median(err[ok])) if ok.any() else float("nan")
        vmax = float(np.nanmax(np.abs(fd))) if np.isfinite(fd).any() else 0.0
        summary[str(h)] = {"labels": tr.n_labels, "bisections": tr.bisections, "hadamard_median_error": med,
                           "max_speed": vmax, "speed_bound": tr.speed_bound}
        ctx.report.check(f"spectrum.h={h}.hadamard_median<1e-3", med < 1e-3 or not ok.any())
        ctx.report.check(f"spectrum.h={h}.speed_bound", vmax <= tr.speed_bound + 1e-6)
        P = quantize(ctx.H, h, c.quasi.theta, modes=tr.modes, t=c.t_interval[1])
        ctx.report.check(f"spectrum.h={h}.hermitian", P.is_hermitian())
    ctx.emit_csv("spectrum.csv", ["h", "t", "j", "E_j", "speed_j", "hadamard_j", "crossing_flag"], rows)
    ctx.report.sections["spectrum"] = summary


def run_qe(ctx):
    c = ctx.cfg
    H0 = ctx.H.at(0.0).average()
    A = ctx.H.d_t().at(0.0).average()
    avg = flow.SurfaceAverageTable(H0, A, c.band, 0.0, c.flow.qe_bins, c.flow.n_samples, c.seed)
    rows = []
    for h in c.flow.qe_h_list:
        val = flow.qe_statistic_at(H0, A, h, c.band, 0.0, c.quasi.theta, avg, c.quasi.L)
        mock = flow.qe_statistic_at(H0, A, h, c.band, 0.0, c.quasi.theta, avg, c.quasi.L,
                                    frame=flow.haar_frame(c.seed))
        rows.append((h, val, mock))
    first = rows[0][1]
    rows = [(h, v, m, v / first if first else float("nan")) for h, v, m in rows]
    ctx.emit_csv("qe.csv", ["h", "statistic", "haar_statistic", "ratio_to_first"], rows)
    ctx.report.sections["qe"] = {"rows": rows}
    ctx.report.check("qe.nonvanishing", all(r[3] >= 0.5 for r in rows))
    ctx.report.check("qe.haar_below_10pct", all(r[2] < 0.1 * r[1] for r in rows))


def _scan_section(ctx):
    c = ctx.cfg
    try:
        b = ctx.bounds()
    except CertificationFailure as exc:
        ctx.report.sections["flow"] = {"certified": False, "reason": str(exc)}
        ctx.report.check("flow.slow_torus_certified", False)
        return None
    ctx.report.check("flow.slow_torus_certified", True)
    return ctx.scan()


def run_flow(ctx):
    c = ctx.cfg
    scan = _scan_section(ctx)
    if scan is None:
        return
    b = scan.bounds
    rows = [(r["h"], r["t"], r["ratio"], r["N"], r["M_count"], r["flagged"]) for r in scan.rows]
    ctx.emit_csv("flow.csv", ["h", "t", "ratio", "N", "M_count", "flagged"], rows)
    mu_rows, per_h = [], {}
    for h in c.h_list:
        fams = scan.families[h]
        worst = -np.inf
        for f in fams:
            sp = flow.mu_speeds(scan.K0, f)
            worst = max(worst, float(sp.max(initial=-np.inf)))
            mu_rows += [(h, f.t, tuple(m), s) for m, s in zip(f.m, sp)]
        bh = flow.certify_B(replace(b), worst)
        per_h[str(h)] = {"B": bh.B, "max_mu_speed": worst, "gap": bh.gap, "certified": bh.certified,
                         "flagged_fraction": scan.flagged_fraction[h], "t_star": scan.t_star(h)}
        ctx.report.check(f"flow.h={h}.B_certified", bh.certified and bh.gap > 0)
    flow.certify_B(b, max(v["max_mu_speed"] for v in per_h.values()))
    ctx.emit_csv("mu_speeds.csv", ["h", "t", "m", "mu_speed"], mu_rows)
    # quasimode residuals and Gram diagnostics at t* (or mid-interval) for the smallest h
    h = min(c.h_list)
    ts = c.t_grid()
    tstar = scan.t_star(h)
    t_g = tstar[0] if tstar else float(ts[len(ts) // 2])
    gram = gram_at(ctx, scan, h, t_g)
    ctx.emit_csv("quasimodes.csv", ["h", "t", "m", "mu_m", "residual_m"], gram.pop("_rows"))
    hs = sorted(c.h_list, reverse=True)
    fr = [scan.flagged_fraction[x] for x in hs]
    ctx.report.sections["flow"] = {"bounds": b.to_dict(), "per_h": per_h, "gram": gram,
                                   "flagged_fraction": {str(k): v for k, v in scan.flagged_fraction.items()}}
    ctx.report.check("flow.gram_bound", gram["bound_holds"])
    ctx.report.check("flow.t_star_at_smallest_h", bool(tstar))
    ctx.report.check("flow.flagged_fraction_nondecreasing", all(y >= x for x, y in zip(fr, fr[1:])))


def gram_at(ctx, scan, h, t):
    """Normal-form patch operator, quasimode residuals and Gram report at (h, t)."""
    from .kam import leading_K0
    K, st = leading_K0(ctx.H, t, scan.K0.domain, ctx.kam_opts())
    S = flow.action_set(scan.K0, scan.omegas, t)
    fam, op, rep = flow.gram_pipeline(K, st.H1_new, h, ctx.cfg.quasi.theta, S, ctx.cfg.quasi.L, t,
                                      scan.K0.domain)
    rmax = float(rep.residuals.max(initial=0.0))
    n = ctx.H.dim
    predicted = rep.n_M * (rmax / h ** (n + 1)) ** 2
    rows = [(h, t, tuple(m), mu, r) for m, mu, r in zip(fam.m, fam.mu, rep.residuals)]
    return {"h": h, "t": t, "hs_norm": rep.hs_norm, "invertible": rep.invertible, "dim_U": rep.dim_U,
            "n_M": rep.n_M, "max_residual": rmax, "predicted_bound": predicted,
            "bound_holds": rep.bound_holds(h, n) and rep.hs_norm <= 1.1 * predicted + 1e-12,
            "gamma": ctx.cfg.gamma(n), "_rows": rows}


def run_covering(ctx):
    scan = _scan_section(ctx)
    if scan is None:
        return
    c = ctx.cfg
    h = min(c.h_list)
    tr = scan.trajectories[h]
    mu = flow.mu_fn_from(scan.K0, h, c.quasi.theta or (0,) * ctx.H.dim)
    E, _ = tr.series_matrix()
    rows, ok = [], True
    for j in range(E.shape[1]):
        rep = flow.covering_intervals(tr.ts, E[:, j], scan.families[h], mu, c.band, j)
        if not rep.intervals:
            continue
        ok &= rep.distinct() and rep.almost_disjoint() and rep.covers_hits()
        rows.append((h, j, rep.m_C, rep.m_A, len(rep.intervals), [tuple(m) for m in rep.m]))
    ctx.emit_csv("covering.csv", ["h", "j", "m_Cj", "m_Aj", "n_intervals", "m_list"],
                 [(h, j, mc, ma, k, ";".join(",".join(map(str, m)) for m in ms)) for h, j, mc, ma, k, ms in rows])
    ctx.report.sections["covering"] = {"h": h, "n_reports": len(rows),
                                       "total_m_C": float(sum(r[2] for r in rows))}
    ctx.report.check("covering.invariants", ok)


def run_report(ctx):
    """Merge the per-pipeline summaries already present under --out."""
    merged = []
    for p in sorted(ctx.out.glob("report_*.json")):
        if p.name == "report_report.json":
            continue
        part = json.loads(p.read_text())
        ctx.report.sections.update(part.get("sections", {}))
        ctx.report.checks.update(part.get("checks", {}))
        ctx.report.files.extend(f for f in part.get("files", []) if f not in ctx.report.files)
        merged.append(p.name)
    ctx.report.sections["merged_from"] = merged


RUNNERS = {
    "diophantine": [run_diophantine],
    "kam": [run_kam],
    "spectrum": [run_spectrum],
    "flow": [run_flow],
    "qe-stat": [run_qe],
    "covering": [run_covering],
    "report": [run_report],
    "full": [run_diophantine, run_kam, run_spectrum, run_qe, run_flow, run_covering],
}


def run(cfg, pipeline):
    """Execute one pipeline; returns the ExperimentReport (also written to report.json)."""
    if pipeline not in RUNNERS:
        raise ValueError(f"unknown pipeline {pipeline!r}; choose from {PIPELINES}")
    ctx = Context(cfg)
    timings = {}
    for fn in RUNNERS[pipeline]:
        stage = fn.__name__.removeprefix("run_")
        t0 = time.perf_counter()
        try:
            fn(ctx)
        except KamqeError as exc:
            raise KamqeError(f"[{stage}] {exc}") from exc
        timings[stage] = time.perf_counter() - t0
        log.info("stage %s done in %.1fs", stage, timings[stage])
    write_json(ctx.out / f"report_{pipeline}.json", ctx.report.to_dict())
    if pipeline in ("report", "full"):
        write_json(ctx.out / "report.json", ctx.report.to_dict())
    return ctx.report


def _floats(text, flag):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}", [flag]) from None


def flag_overrides(args):
    """Nested config overrides from the per-pipeline flags."""
    out = {}
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("eps_grid"):
        out.setdefault("kam", {})["eps_grid"] = _floats(args.eps_grid, "--eps-grid")
    if get("steps") is not None:
        out.setdefault("kam", {})["steps"] = args.steps
    if get("t_grid"):
        v = _floats(args.t_grid, "--t-grid")
        if args.pipeline == "kam":
            out.setdefault("kam", {})["t_grid"] = v
        else:
            if len(v) != 3:
                raise ConfigError("--t-grid: expected t0,t1,points", ["--t-grid"])
            out["t_interval"], out["t_points"] = v[:2], int(v[2])
    if get("h"):
        out["h_list"] = _floats(args.h, "--h")
    if get("band"):
        out["band"] = _floats(args.band, "--band")
    if get("theta"):
        out.setdefault("quasi", {})["theta"] = [int(x) for x in _floats(args.theta, "--theta")]
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="kamqe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="pipeline", required=True)
    for name in PIPELINES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON configuration file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--model", help="built-in model name or JSON model file")
        s.add_argument("--assert", dest="check", action="store_true",
                       help="exit nonzero unless every invariant holds")
        if name in ("kam", "full"):
            s.add_argument("--eps-grid", help="comma-separated epsilon values for the pendulum sweep")
            s.add_argument("--steps", type=int, help="KAM steps for the leading normal form (1 or 2)")
        if name in ("kam", "spectrum", "flow", "covering", "full"):
            s.add_argument("--t-grid", help="kam: comma-separated t values; others: t0,t1,points")
        if name in ("spectrum", "flow", "covering", "qe-stat", "full"):
            s.add_argument("--h", help="comma-separated h values")
            s.add_argument("--band", help="energy band a,b")
            s.add_argument("--theta", help="Maslov shift, comma-separated integers")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, flag_overrides(args), seed=args.seed, out=args.out, model=args.model)
        rep = run(cfg, args.pipeline)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KamqeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for name, ok in sorted(rep.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if args.check and not rep.passed:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
