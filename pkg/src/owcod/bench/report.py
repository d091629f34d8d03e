"""Report emission: long-form CSV and a monospaced leaderboard."""

from __future__ import annotations

import csv
import io

from .metrics import average_rank


def _fmt(v, scale=100.0, digits=1):
    return "-" if v is None else f"{v * scale:.{digits}f}"


def csv_rows(reports) -> list:
    rows = []
    for r in reports:
        for name, ap in zip(r.subset_names, r.per_subset_ap):
            rows.append((r.method, name, "AP", ap))
        for metric in ("ap_old", "ap_new", "ap_seen", "ap_unseen"):
            rows.append((r.method, "all", metric, getattr(r, metric)))
        for name, v in sorted(r.ap50.items()):
            rows.append((r.method, name, "AP50", v))
        for k, v in sorted(r.ranks.items()):
            rows.append((r.method, "all", k, v))
    return rows


def to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "subset", "metric", "value"))
    for m, s, k, v in csv_rows(reports):
        w.writerow((m, s, k, "" if v is None else repr(float(v))))
    return buf.getvalue()


def attach_ranks(reports) -> None:
    """Fill R_seen / R_unseen / R_avg on each report, ranking them against each other."""
    seen = {r.method: r.per_subset_ap for r in reports}
    unseen = {r.method: (r.ap_unseen if r.ap_unseen is not None else 0.0) for r in reports}
    for r in reports:
        rs, ru, ra = average_rank(seen, unseen)[r.method]
        r.ranks = {"R_seen": rs, "R_unseen": ru, "R_avg": ra}


def leaderboard(reports) -> str:
    """Per-subset AP columns, then Seen, Unseen and R_avg (AP shown x100)."""
    if not reports:
        return ""
    subsets = reports[0].subset_names
    head = ["Method"] + [s[:9] for s in subsets] + ["Seen", "Unseen", "R_avg"]
    body = []
    for r in reports:
        ravg = r.ranks.get("R_avg")
        body.append([r.method] + [_fmt(a) for a in r.per_subset_ap]
                    + [_fmt(r.ap_seen), _fmt(r.ap_unseen), "-" if ravg is None else f"{ravg:.2f}"])
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    lines = []
    for k, row in enumerate([head] + body):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"
