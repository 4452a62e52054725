"""Benchmark-style evaluation: cumulative precision buckets over pose errors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThresholdBuckets:
    """(meters, degrees) thresholds; a query counts in a bucket when both
    errors are within it, so the percentages are cumulative."""

    fine: tuple[float, float] = (0.25, 2.0)
    medium: tuple[float, float] = (0.5, 5.0)
    coarse: tuple[float, float] = (5.0, 10.0)

    def __post_init__(self):
        if not (
            self.fine[0] <= self.medium[0] <= self.coarse[0]
            and self.fine[1] <= self.medium[1] <= self.coarse[1]
        ):
            raise ValueError("buckets must be componentwise non-decreasing")


@dataclass
class QueryEvalRow:
    name: str
    t_err_m: float | None  # None when localization failed
    r_err_deg: float | None
    inliers: int = 0
    used_fallback: bool = False
    condition: str = "day"


@dataclass
class EvalReport:
    buckets: ThresholdBuckets
    rows: list[QueryEvalRow] = field(default_factory=list)
    per_condition: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    overall: tuple[float, float, float] = (0.0, 0.0, 0.0)


def bucket_errors(
    errors: list[tuple[float, float] | None], buckets: ThresholdBuckets
) -> tuple[float, float, float]:
    """Percentages of queries within the fine/medium/coarse thresholds.

    Entries of None are failed localizations: they count in no bucket but
    stay in the denominator.
    """
    if not errors:
        logger.warning("bucketing an empty error list; reporting 0/0/0")
        return (0.0, 0.0, 0.0)
    counts = [0, 0, 0]
    for err in errors:
        if err is None:
            continue
        t, r = err
        for i, (t_max, r_max) in enumerate((buckets.fine, buckets.medium, buckets.coarse)):
            if t <= t_max and r <= r_max:
                counts[i] += 1
    total = len(errors)
    return tuple(100.0 * c / total for c in counts)


def build_eval_report(rows: list[QueryEvalRow], buckets: ThresholdBuckets) -> EvalReport:
    report = EvalReport(buckets=buckets, rows=sorted(rows, key=lambda r: r.name))
    def errs(selected):
        return [
            None if r.t_err_m is None else (r.t_err_m, r.r_err_deg) for r in selected
        ]
    report.overall = bucket_errors(errs(report.rows), buckets)
    for condition in sorted({r.condition for r in report.rows}):
        subset = [r for r in report.rows if r.condition == condition]
        report.per_condition[condition] = bucket_errors(errs(subset), buckets)
    return report


def format_eval_report(report: EvalReport) -> str:
    lines = ["condition  fine%   medium%  coarse%   (n)"]
    for condition, pct in report.per_condition.items():
        n = sum(1 for r in report.rows if r.condition == condition)
        lines.append(f"{condition:<9} {pct[0]:6.1f}  {pct[1]:7.1f}  {pct[2]:7.1f}   ({n})")
    lines.append(
        f"{'all':<9} {report.overall[0]:6.1f}  {report.overall[1]:7.1f}  "
        f"{report.overall[2]:7.1f}   ({len(report.rows)})"
    )
    lines.append("")
    lines.append("query                     t-err[m]   r-err[deg]  inliers  fallback")
    for row in report.rows:
        if row.t_err_m is None:
            lines.append(f"{row.name:<24}   failed        -        {row.inliers:7d}  {row.used_fallback}")
        else:
            lines.append(
                f"{row.name:<24} {row.t_err_m:9.4f}  {row.r_err_deg:10.4f}  "
                f"{row.inliers:7d}  {row.used_fallback}"
            )
    return "\n".join(lines)
