"""Field-comparison metrics and report aggregation.

All metric functions take ground truth first and accept either FieldMaps or
complex arrays of equal shape.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateError, PreconditionError, ShapeError
from .solver import FieldMap, SolveStats

REPORT_SCHEMA = 1
PHASE_FLOOR = 1e-6
REPORT_KEYS = ("schema_version", "kind", "frequency", "samples", "subjects", "summary", "timing")
SAMPLE_KEYS = ("subject", "antenna", "trained_ring", "cc", "mean_ad", "max_rd", "mean_pd")
SUBJECT_KEYS = ("subject", "count", "mean_cc", "std_cc")
SUMMARY_KEYS = ("count", "mean_cc", "std_cc", "mean_ad", "max_rd", "mean_pd")
TIMING_KEYS = ("solver_mean_s", "surrogate_mean_s", "speedup")


def _pair(y, yhat):
    a = y.values if isinstance(y, FieldMap) else np.asarray(y, dtype=complex)
    b = yhat.values if isinstance(yhat, FieldMap) else np.asarray(yhat, dtype=complex)
    if a.shape != b.shape:
        raise ShapeError(f"field shapes differ: {a.shape} vs {b.shape}")
    return a, b


def absolute_difference(y, yhat):
    a, b = _pair(y, yhat)
    return np.abs(a - b)


def relative_difference(y, yhat):
    """Percent magnitude difference against the sample's peak |y|."""
    a, b = _pair(y, yhat)
    peak = np.abs(a).max() if a.size else 0.0
    if not peak > 0:
        raise DegenerateError("ground truth is identically zero; RD is undefined")
    return np.abs(np.abs(a) - np.abs(b)) / peak * 100.0


def phase_difference(y, yhat, floor=PHASE_FLOOR):
    """Wrapped phase distance in [0, pi].

    Cells where |y| <= floor * max|y| are returned as NaN; pass ``floor=None``
    to evaluate every cell.
    """
    a, b = _pair(y, yhat)
    pa = np.mod(np.angle(a), 2 * np.pi)
    pb = np.mod(np.angle(b), 2 * np.pi)
    d = np.abs(pa - pb)
    pd = np.minimum(d, 2 * np.pi - d)
    if floor is not None:
        mag = np.abs(a)
        peak = mag.max() if mag.size else 0.0
        pd = np.where(mag > floor * peak, pd, np.nan)
    return pd


def complex_correlation(y, yhat, centered=False):
    """|<y, yhat>| / (||y|| ||yhat||), optionally after removing the means."""
    a, b = _pair(y, yhat)
    a = a.ravel()
    b = b.ravel()
    if centered:
        a = a - a.mean()
        b = b - b.mean()
    na = np.sqrt(np.sum(np.abs(a) ** 2))
    nb = np.sqrt(np.sum(np.abs(b) ** 2))
    if not (na > 0 and nb > 0):
        raise DegenerateError("complex correlation needs two fields with nonzero energy")
    cc = abs(np.vdot(b, a)) / (na * nb)
    return float(min(cc, 1.0))


def sample_metrics(y, yhat):
    pd = phase_difference(y, yhat)
    return {
        "cc": complex_correlation(y, yhat),
        "mean_ad": float(np.mean(absolute_difference(y, yhat))),
        "max_rd": float(np.max(relative_difference(y, yhat))),
        "mean_pd": float(np.nanmean(pd)) if np.any(np.isfinite(pd)) else 0.0,
    }


def per_subject_stats(groups):
    """``{subject: [cc, ...]}`` -> ``[(subject, mean, population std), ...]``."""
    out = []
    for subject, values in groups.items():
        values = np.asarray(list(values), dtype=float)
        if values.size == 0:
            raise PreconditionError(f"subject {subject!r} has no samples")
        out.append((subject, float(values.mean()), float(values.std())))
    return out


def timing_comparison(solver_stats, surrogate_times):
    """(mean solver seconds, mean surrogate seconds, solver/surrogate ratio)."""
    if not solver_stats or not surrogate_times:
        raise PreconditionError("timing comparison needs non-empty solver and surrogate lists")
    solver = [s.wall_time if isinstance(s, SolveStats) else float(s) for s in solver_stats]
    ms = float(np.mean(solver))
    mm = float(np.mean(surrogate_times))
    if not mm > 0:
        raise PreconditionError("surrogate times must be positive")
    return ms, mm, ms / mm


def build_report(kind, frequency, samples, timing=None):
    """Assemble the JSON-ready evaluation report from per-sample records.

    Each record needs ``subject``, ``antenna`` ([i, j]), ``trained_ring`` and
    the four entries of :func:`sample_metrics`.
    """
    if not samples:
        raise PreconditionError("report needs at least one sample")
    rows = [{k: s[k] for k in SAMPLE_KEYS} for s in samples]
    groups = {}
    for r in rows:
        groups.setdefault(r["subject"], []).append(r["cc"])
    subjects = [{"subject": s, "count": len(groups[s]), "mean_cc": m, "std_cc": sd}
                for s, m, sd in per_subject_stats(groups)]
    cc = np.array([r["cc"] for r in rows])
    summary = {
        "count": len(rows),
        "mean_cc": float(cc.mean()),
        "std_cc": float(cc.std()),
        "mean_ad": float(np.mean([r["mean_ad"] for r in rows])),
        "max_rd": float(np.max([r["max_rd"] for r in rows])),
        "mean_pd": float(np.mean([r["mean_pd"] for r in rows])),
    }
    if timing is not None:
        timing = {k: timing[k] for k in TIMING_KEYS}
    return {
        "schema_version": REPORT_SCHEMA,
        "kind": kind,
        "frequency": float(frequency),
        "samples": rows,
        "subjects": subjects,
        "summary": summary,
        "timing": timing,
    }


def check_report(report):
    """Raise ShapeError unless ``report`` carries exactly the published keys."""
    def same(obj, keys, where):
        if set(obj) != set(keys):
            raise ShapeError(f"{where} keys {sorted(obj)} != {sorted(keys)}")

    same(report, REPORT_KEYS, "report")
    for s in report["samples"]:
        same(s, SAMPLE_KEYS, "sample")
    for s in report["subjects"]:
        same(s, SUBJECT_KEYS, "subject")
    same(report["summary"], SUMMARY_KEYS, "summary")
    if report["timing"] is not None:
        same(report["timing"], TIMING_KEYS, "timing")
    if not all(0.0 <= s["cc"] <= 1.0 and math.isfinite(s["cc"]) for s in report["samples"]):
        raise ShapeError("sample CC outside [0, 1]")
    return report
