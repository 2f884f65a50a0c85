"""Serialize analysis results: schema-versioned JSON, text tables, plot-ready CSV."""
from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ingest import aligned_table, dataset_label
from .pipeline import FORMATS, AnalysisResult
from .stats import ECDF

SCHEMA_NAME = "report.schema.json"


def load_schema() -> dict:
    return json.loads(resources.files("drivetel").joinpath("schemas", SCHEMA_NAME).read_text())


def _clean(obj):
    """JSON-safe copy: tuples -> lists, numpy scalars -> Python, inf -> None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def to_json(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def f4(x):
    return f"{x:.4f}"


def pval(x):
    return f"{x:.2e}"


def level(x):
    return f"{x:.2f}"


def pct(x):
    return f"{x:.1f}%"


def _ci(lo, hi):
    lo_s = "-∞" if lo is None else f4(lo)
    hi_s = "∞" if hi is None else f4(hi)
    return f"({lo_s}, {hi_s})"


def to_text(report: dict) -> str:
    """Deterministic plain-text rendering; every number also lives in the JSON."""
    out = [f"drivetel analysis report (schema {report['schema_version']})", ""]

    inv = report["inventory"]
    out.append("Data inventory")
    rows = [[dataset_label(r["source"], r["channel"]), str(r["obs_active"]), str(r["obs_inactive"]),
             str(r["trips_active"]), str(r["trips_inactive"])] for r in inv["channels"]]
    out.append(aligned_table(["Dataset", "Obs (A)", "Obs (I)", "Trips (A)", "Trips (I)"], rows))

    f = report["filter"]
    out.append("Active-segment observations")
    out.append(aligned_table(["Status", "Observations"],
                             [["Active", str(f["active_observations"])],
                              ["Inactive", str(f["inactive_observations"])]]))

    cmp_ = report["comparison"]
    pos, neg = cmp_["positive"], cmp_["negative"]
    out.append("Mean acceleration")
    out.append(aligned_table(
        ["Status", "Mean positive acceleration", "Mean negative acceleration"],
        [["Inactive", f4(pos["means"]["mean_inactive"]), f4(neg["means"]["mean_inactive"])],
         ["Active", f4(pos["means"]["mean_active"]), f4(neg["means"]["mean_active"])]]))

    out.append("One-sided Welch tests, inactive minus active")
    rows = []
    for name, sec in (("positive", pos), ("negative", neg)):
        w = sec["welch"]
        rows.append([name, f4(w["difference"]), f4(w["t_statistic"]), f4(w["degrees_of_freedom"]),
                     pval(w["p_value_one_sided"]), _ci(w["ci_lower"], w["ci_upper"])])
    out.append(aligned_table(["Sign", "Difference", "t", "df", "p", "Conf. Interval"], rows))

    out.append("One-sided Kolmogorov-Smirnov tests, inactive vs active")
    rows = []
    for name, sec in (("positive", pos), ("negative", neg)):
        k = sec["ks"]
        rows.append([name, f4(k["d_plus"]), f4(k["d_minus"]), k["direction"], pval(k["p_value_one_sided"])])
    out.append(aligned_table(["Sign", "D+", "D-", "Alternative", "p"], rows))

    if report.get("can_means"):
        out.append("CAN signal means")
        rows = [[r["channel"], f4(r["mean_inactive"]), f4(r["mean_active"]), _ci(r["ci_lower"], r["ci_upper"])]
                for r in report["can_means"]]
        out.append(aligned_table(["Signal", "Inactive Mean", "Active Mean", "Conf. Interval"], rows))

    seg = report["segments"]
    out.append("Per-segment tests, positive acceleration")
    rows = [[r["segment_id"], f"{f4(r['mean_inactive'])} ({r['n_inactive']})",
             f"{f4(r['mean_active'])} ({r['n_active']})", pval(r["p_value"])] for r in seg["rows"]]
    out.append(aligned_table(["Road ID", "Mean Inactive (# obs)", "Mean Active (# obs)", "p-value"], rows))
    out.append(f"segments skipped: {seg['skipped']}")
    out.append("")

    e = report["evt"]
    out.append(f"Return levels, exceeded every {e['return_period_s']:g} s")
    acc, dec = e["acceleration"], e["deceleration"]
    out.append(aligned_table(["", "Acceleration", "Deceleration"],
                             [["Active", level(acc["return_level_active"]), level(dec["return_level_active"])],
                              ["Inactive", level(acc["return_level_inactive"]), level(dec["return_level_inactive"])]]))
    rows = []
    for tail, sec in (("acceleration", acc), ("deceleration", dec)):
        for grp in ("active", "inactive"):
            fit = sec[f"fit_{grp}"]
            rows.append([tail, grp, f4(fit["u"]), f4(fit["sigma"]), f4(fit["xi"]), f4(fit["zeta_u"]),
                         str(fit["n_exceedances"])])
    out.append(aligned_table(["Tail", "Group", "u", "sigma", "xi", "zeta_u", "Exceedances"], rows))

    s = report["summary"]
    out.append("Summary")
    out.append(f"mean positive acceleration reduction: {pct(s['mean_reduction_pct'])}")
    out.append(f"acceleration return level reduction: {pct(s['return_level_reduction_pct'])}")
    return "\n".join(out) + "\n"


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_plot_data(result: AnalysisResult, out_dir) -> list[Path]:
    """ECDF, histogram and mean-excess tables for external plotting."""
    out = Path(out_dir)
    paths = []
    acc = result.acceleration
    if acc is None:
        return paths
    for name, sign in (("positive", 1.0), ("negative", -1.0)):
        rows, hist_rows = [], []
        vals = {g: acc.value[(acc.active == (g == "active")) & (sign * acc.value > 0)] for g in ("active", "inactive")}
        lo = min(v.min() for v in vals.values() if len(v))
        hi = max(v.max() for v in vals.values() if len(v))
        edges = np.linspace(lo, hi, 51)
        for g, v in vals.items():
            if len(v) == 0:
                continue
            x, F = ECDF(v).points
            rows.extend([g, repr(float(a)), repr(float(b))] for a, b in zip(x, F))
            counts, _ = np.histogram(v, edges)
            hist_rows.extend([g, repr(float(a)), repr(float(b)), int(c)] for a, b, c in zip(edges[:-1], edges[1:], counts))
        p = out / f"ecdf_{name}.csv"
        _write_csv(p, ["group", "value", "cdf"], rows)
        paths.append(p)
        p = out / f"histogram_{name}.csv"
        _write_csv(p, ["group", "bin_lo", "bin_hi", "count"], hist_rows)
        paths.append(p)
    rows = []
    for (tail, group), c in sorted(result.mean_excess.items()):
        rows.extend([tail, group, repr(float(t)), repr(float(m)), int(n)]
                    for t, m, n in zip(c.thresholds, c.mean_excess, c.counts))
    p = out / "mean_excess.csv"
    _write_csv(p, ["tail", "group", "threshold", "mean_excess", "count"], rows)
    paths.append(p)
    return paths


def emit_report(result: AnalysisResult, out_dir, formats=FORMATS) -> list[Path]:
    """Write report.json / report.txt / plot CSVs. Output is byte-stable."""
    if isinstance(formats, str):
        formats = (formats,)
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ConfigError(f"unknown report format(s) {bad}; choose from {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(to_json(result.report), encoding="utf-8")
        paths.append(p)
    if "table" in formats:
        p = out / "report.txt"
        p.write_text(to_text(result.report), encoding="utf-8")
        paths.append(p)
    if "csv" in formats:
        paths.extend(write_plot_data(result, out))
    return paths
