"""Machine-readable outputs: JSON report objects and CSV sweep tables.

JSON uses sorted keys and Python's round-trip float repr, so reruns with the
same seed produce byte-identical files apart from the wall_time field.  CSV
numbers carry 17 significant digits.
"""

from __future__ import annotations

import json

from .verify import DecayTable, EquivReport, IdentityReport, McReport

MC_CSV_HEADER = ("label", "lhs", "rhs", "se_lhs", "se_rhs", "se_diff", "z",
                 "n_paths", "n_failed", "steps", "eps_end", "seed")


def report_to_dict(report) -> dict:
    if hasattr(report, "to_json_dict"):
        return report.to_json_dict()
    if isinstance(report, IdentityReport):
        return {"label": report.label, "records": report.to_rows(),
                "audit": report.audit, "passed": report.passed,
                "wall_time": report.wall_time}
    raise TypeError(f"cannot serialize report of type {type(report).__name__}")


def to_json(reports) -> str:
    if isinstance(reports, (list, tuple)):
        payload = [report_to_dict(r) for r in reports]
    else:
        payload = report_to_dict(reports)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return "" if value is None else str(value)


def _csv_line(cells) -> str:
    return ",".join(_fmt(c) for c in cells) + "\n"


def to_csv(reports) -> str:
    """CSV rows for a report or list of reports; one schema per report type."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    if not reports:
        return _csv_line(MC_CSV_HEADER)
    first = reports[0]
    if isinstance(first, McReport):
        lines = [_csv_line(MC_CSV_HEADER)]
        for r in reports:
            lines.append(_csv_line((
                r.label, r.estimate_lhs, r.estimate_rhs, r.se_lhs, r.se_rhs,
                r.se_diff, r.z_score, r.n_paths, r.n_failed,
                r.grid_meta.get("steps"), r.grid_meta.get("eps_end"), r.seed)))
        return "".join(lines)
    if isinstance(first, DecayTable):
        lines = [_csv_line(("label", "t", "m", "se"))]
        for table in reports:
            for row in table.rows:
                lines.append(_csv_line((table.label, row.t, row.moment, row.se)))
        return "".join(lines)
    if isinstance(first, EquivReport):
        lines = [_csv_line(("label", "steps", "gap", "se"))]
        for rep in reports:
            for row in rep.rows:
                lines.append(_csv_line((rep.label, row.steps, row.gap_mean,
                                        row.gap_se)))
        return "".join(lines)
    if isinstance(first, IdentityReport):
        lines = [_csv_line(("label", "name", "where", "lhs", "rhs", "error",
                            "tol", "passed"))]
        for rep in reports:
            for row in rep.records:
                lines.append(_csv_line((rep.label, row.name, row.where,
                                        row.value_a, row.value_b, row.error,
                                        row.tol, row.passed)))
        return "".join(lines)
    raise TypeError(f"cannot serialize report of type {type(first).__name__}")


def write_report(reports, path: str, fmt: str = "json") -> None:
    """Write a report (or list) to a file as JSON or CSV."""
    if fmt == "json":
        text = to_json(reports)
    elif fmt == "csv":
        text = to_csv(reports)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
