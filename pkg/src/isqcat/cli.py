"""Command-line front end: analytic tables, simulation and comparison reports.

Each table is written as one UTF-8 CSV with a header row; ``summary.txt``
lists pass/fail counts. Comparison rows carry a ``method`` column naming the
evaluation route and a ``status`` of pass, fail, diagnostic or rejected.
Only pass/fail rows of trusted methods decide the exit status.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import busy, sim, transient
from .config import COMMANDS, ConfigError, RunManifest, load_config
from .model import ModelSpec

TRUSTED = "renewal-convolution"
LITERAL = "literal"
SIMULATION = "simulation"
REJECTED = "rejected: homogeneity required"
SE_FACTOR = 4.0
TV_TOL = 0.02


@dataclass
class Table:
    name: str
    header: list[str]
    rows: list[list] = field(default_factory=list)

    def add(self, *row):
        self.rows.append(list(row))

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"{self.name}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for row in self.rows:
                w.writerow([_fmt(v) for v in row])
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _status(diff: float, tol: float) -> str:
    return "pass" if diff <= tol else "fail"


COMPARE_HEADER = ["quantity", "t_or_s", "index", "analytic", "simulated", "stderr",
                  "abs_diff", "tolerance", "status", "method"]


# -- analytic and simulated pieces ---------------------------------------------------------


def _transient_tables(spec: ModelSpec, m: RunManifest) -> list[Table]:
    pmf = Table("transient_pmf", ["t", "n", "probability", "error_estimate", "truncation_mass", "method"])
    mom = Table("transient_moments", ["t", "order", "factorial_moment", "method"])
    idle = Table("idle_probability", ["t", "probability", "method"])
    res = transient.solve(transient.TransientQuery(spec, m.times, state_cutoff=m.state_cutoff, tol=m.tol))
    for p in res.points:
        for n, prob in enumerate(p.pmf):
            pmf.add(p.t, n, prob, p.pmf_error, p.truncation_mass, TRUSTED)
        for order, val in p.moments.items():
            mom.add(p.t, order, val, p.moment_source)
        idle.add(p.t, transient.idle_prob(spec, p.t), TRUSTED)
    return [pmf, mom, idle]


def _busy_tables(spec: ModelSpec, m: RunManifest) -> list[Table]:
    if not spec.is_homogeneous:
        t = Table("busy", ["quantity", "value", "status", "method"])
        t.add("busy period", "", REJECTED, "")
        return [t]
    rep = busy.busy_report(spec, m.s_values, m.df_times)
    lst = Table("busy_lst", ["s", "busy_period_lst", "busy_cycle_lst", "error_estimate", "flagged", "method"])
    for s in m.s_values:
        p, c = rep.lst_period[s], rep.lst_cycle[s]
        lst.add(s, p.value, c.value, p.error_estimate, p.flagged, TRUSTED)
    mom = Table("busy_moments", ["quantity", "value", "error_estimate", "method"])
    mom.add("busy_mean", rep.moments.mean, rep.moments.mean_error, "lst-differentiation")
    mom.add("busy_second_moment", rep.moments.second_moment, rep.moments.second_error, "lst-differentiation")
    if rep.moments.closed_mean is not None:
        mom.add("busy_mean", rep.moments.closed_mean, 0.0, "closed-form")
        mom.add("busy_second_moment", rep.moments.printed_second_moment, 0.0, LITERAL)
    mom.add("cycle_mean", rep.cycle_mean, rep.moments.mean_error, "lst-differentiation")
    df = Table("busy_df", ["t", "busy_period_df", "busy_period_error", "busy_cycle_df", "busy_cycle_error",
                           "method"])
    for i, t in enumerate(rep.df_period.t):
        df.add(t, rep.df_period.values[i], rep.df_period.error_estimate[i],
               rep.df_cycle.values[i], rep.df_cycle.error_estimate[i], "lst-inversion")
    return [lst, mom, df]


def _simulate(spec: ModelSpec, m: RunManifest, busy_too: bool = True):
    cfg = sim.SimConfig(spec, max(m.times) if m.times else 0.0, m.times, m.replications, m.seed,
                        busy_cycle_target=m.busy_cycles)
    tr = sim.simulate_transient(cfg)
    bz = None
    if busy_too and spec.is_homogeneous and spec.total_batch_rate > 0:
        bz = sim.simulate_busy(replace(cfg, seed=(m.seed + 1) % 2 ** 64))
    return tr, bz


def _simulate_tables(spec: ModelSpec, m: RunManifest) -> list[Table]:
    tr, bz = _simulate(spec, m)
    pmf = Table("sim_pmf", ["t", "n", "empirical_probability", "stderr", "method"])
    means = Table("sim_moments", ["t", "mean", "stderr", "variance", "served_mean", "completed_mean", "method"])
    for t in m.times:
        e = tr.pmf(t)
        for n, p in enumerate(e):
            pmf.add(t, n, p, math.sqrt(p * (1 - p) / tr.replications), SIMULATION)
        mean, se = tr.mean(t)
        means.add(t, mean, se, tr.variance(t), tr.mean(t, "served")[0], tr.mean(t, "completed")[0], SIMULATION)
    out = [pmf, means]
    if bz is not None:
        b = Table("sim_busy", ["quantity", "mean", "stderr", "samples", "method"])
        for name, x in (("busy_period", bz.busy_periods), ("idle_period", bz.idle_periods),
                        ("busy_cycle", bz.cycles)):
            b.add(name, float(x.mean()), sim._stderr(x), len(x), SIMULATION)
        out.append(b)
    return out


# -- comparison ----------------------------------------------------------------------------


def _compare_transient(spec: ModelSpec, m: RunManifest, tr: sim.SimulationSummary) -> Table:
    table = Table("compare_transient", COMPARE_HEADER)
    R = tr.replications
    for t in m.times:
        emp = tr.pmf(t)
        res = transient.state_pmf(spec, t, max(m.state_cutoff, len(emp) - 1), aggregate=True, tol=m.tol) \
            if not spec.is_simple else None
        if spec.is_simple:
            ana = transient.state_prob(spec, np.arange(max(m.state_cutoff, len(emp) - 1) + 1), t, tol=m.tol)
        else:
            ana = res.probabilities
        L = max(len(ana), len(emp))
        a = np.pad(ana, (0, L - len(ana)))
        e = np.pad(emp, (0, L - len(emp)))
        tv = 0.5 * (np.abs(a - e).sum() + max(0.0, 1.0 - a.sum()))
        table.add("total_variation", t, "", "", "", "", tv, TV_TOL, _status(tv, TV_TOL), TRUSTED)
        for n in range(min(L, m.state_cutoff + 1)):
            se = math.sqrt(max(a[n] * (1 - a[n]), 1.0 / R) / R)
            tol = SE_FACTOR * se
            d = abs(a[n] - e[n])
            table.add("P_n", t, n, a[n], e[n], se, d, tol, _status(d, tol), TRUSTED)
        if spec.is_simple:
            lit = transient.state_prob(spec, np.arange(min(L, m.state_cutoff + 1)), t, tol=m.tol, literal=True)
            for n, p in enumerate(lit):
                table.add("P_n", t, n, p, e[n], "", abs(p - e[n]), "", "diagnostic", LITERAL)
            mean, se = tr.mean(t)
            m1 = transient.moment(spec, 1, t)
            table.add("m1", t, "", m1, mean, se, abs(m1 - mean), SE_FACTOR * se,
                      _status(abs(m1 - mean), SE_FACTOR * se), "moment ODE")
            fk = transient.mean_forward_kernel(spec, t).value
            table.add("m1", t, "", fk, mean, se, abs(fk - mean), "", "diagnostic", "forward-kernel")
            cls = spec.classes[0]
            if cls.service.kind == "deterministic" and spec.is_homogeneous and spec.catastrophe_rate.value > 0:
                printed, _ = transient.md_moments_literal(spec, t)
                table.add("m1", t, "", printed, mean, se, abs(printed - mean), "", "diagnostic", LITERAL)
    return table


def _compare_busy(spec: ModelSpec, m: RunManifest, bz: sim.SimulationSummary | None) -> list[Table]:
    table = Table("compare_busy", COMPARE_HEADER)
    if not spec.is_homogeneous:
        table.add(REJECTED, "", "", "", "", "", "", "", "rejected", "")
        return [table]
    if bz is None:
        return []
    for s in m.s_values:
        for name, op, samples in (("busy_period_lst", busy.lst_busy_period, bz.busy_periods),
                                  ("busy_cycle_lst", busy.lst_busy_cycle, bz.cycles)):
            val = op(spec, s)
            emp, se = sim.empirical_lst(samples, s)
            tol = SE_FACTOR * se + val.error_estimate
            table.add(name, s, "", val.value, emp, se, abs(val.value - emp), tol,
                      _status(abs(val.value - emp), tol), TRUSTED)
    mom = busy.busy_moments(spec)
    x = bz.busy_periods
    se = sim._stderr(x)
    mean = float(x.mean())
    table.add("busy_mean", "", "", mom.mean, mean, se, abs(mom.mean - mean), SE_FACTOR * se,
              _status(abs(mom.mean - mean), SE_FACTOR * se), "lst-differentiation")
    if mom.closed_mean is not None:
        d = abs(mom.closed_mean - mean)
        table.add("busy_mean", "", "", mom.closed_mean, mean, se, d, SE_FACTOR * se,
                  _status(d, SE_FACTOR * se), "closed-form")
        for s in m.s_values:
            f = busy.md_closed_forms(spec, s)
            emp, se_s = sim.empirical_lst(x, s)
            table.add("busy_period_lst", s, "", f.busy_from_literal, emp, se_s,
                      abs(f.busy_from_literal - emp), "", "diagnostic", LITERAL)
    atoms = busy.busy_period_atoms(spec)
    df = busy.invert_lst(lambda s: busy._busy_values(spec, s)[0], m.df_times, atoms)
    R = len(x)
    for i, t in enumerate(df.t):
        emp = float((x <= t).mean())
        se_b = math.sqrt(max(emp * (1 - emp), 1.0 / R) / R)
        tol = max(0.01, 3 * se_b)
        d = abs(df.values[i] - emp)
        table.add("busy_period_df", t, "", df.values[i], emp, se_b, d, tol, _status(d, tol), "lst-inversion")
    return [table]


# -- driver ---------------------------------------------------------------------------------


def run(spec: ModelSpec, manifest: RunManifest) -> tuple[list[Table], int]:
    """Build every table for the manifest's command; returns (tables, exit status)."""
    cmd = manifest.command
    tables: list[Table] = []
    if cmd == "transient":
        tables = _transient_tables(spec, manifest)
    elif cmd == "busy":
        tables = _busy_tables(spec, manifest)
    elif cmd == "simulate":
        tables = _simulate_tables(spec, manifest)
    else:
        tr, bz = _simulate(spec, manifest)
        tables = [_compare_transient(spec, manifest, tr)] + _compare_busy(spec, manifest, bz)
    failed = sum(1 for t in tables for r in t.rows if "status" in t.header
                 and r[t.header.index("status")] == "fail")
    flagged = sum(1 for t in tables for r in t.rows if "flagged" in t.header and r[t.header.index("flagged")])
    return tables, int(failed > 0 or flagged > 0)


def write_report(tables: list[Table], out_dir: Path, manifest: RunManifest, status: int) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {"pass": 0, "fail": 0, "diagnostic": 0, "rejected": 0}
    for t in tables:
        t.write(out_dir)
        if "status" in t.header:
            i = t.header.index("status")
            for r in t.rows:
                key = "rejected" if str(r[i]).startswith("rejected") else r[i]
                counts[key] = counts.get(key, 0) + 1
    lines = [f"command: {manifest.command}",
             f"config: {manifest.config_path}",
             f"seed: {manifest.seed}",
             f"replications: {manifest.replications}",
             f"tolerance: {manifest.tol:g}",
             f"tables: {', '.join(t.name + '.csv' for t in tables)}",
             f"pass: {counts['pass']}",
             f"fail: {counts['fail']}",
             f"diagnostic: {counts['diagnostic']}",
             f"rejected: {counts['rejected']}",
             f"exit status: {status}"]
    path = out_dir / "summary.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isqcat", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, help="YAML model description")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--seed", type=int, help="simulation seed")
    p.add_argument("--tol", type=float, help="analytic tolerance")
    p.add_argument("--replications", type=int, help="simulation replications")
    p.add_argument("--command", choices=COMMANDS, help="overrides run.command")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec, manifest = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    overrides = {k: v for k, v in (("out_dir", args.out), ("seed", args.seed), ("tol", args.tol),
                                   ("replications", args.replications), ("command", args.command))
                 if v is not None}
    if overrides.get("replications", 1) < 1 or overrides.get("tol", 1.0) <= 0:
        print("--replications must be >= 1 and --tol positive", file=sys.stderr)
        return 2
    manifest = replace(manifest, overrides=overrides, **overrides)
    try:
        tables, status = run(spec, manifest)
    except (ValueError, RuntimeError) as exc:
        tables = [Table("errors", ["error", "status", "method"], [[str(exc), "fail", ""]])]
        status = 1
    out = Path(manifest.out_dir)
    summary = write_report(tables, out, manifest, status)
    print(summary.read_text(encoding="utf-8"), end="")
    return status


if __name__ == "__main__":
    sys.exit(main())
