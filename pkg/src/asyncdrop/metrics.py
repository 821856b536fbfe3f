"""Run traces: records, CSV persistence, and time-to-target comparisons."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

from .errors import ParseError


@dataclass(frozen=True)
class MetricsRecord:
    sim_time: float
    event_index: int
    global_version: int
    client_id: int
    capacity_level: int
    train_loss: float
    test_loss: float | None
    test_accuracy: float | None
    cum_params_down: int
    cum_params_up: int
    staleness: int


COLUMNS = tuple(f.name for f in fields(MetricsRecord))
_INT_COLUMNS = {"event_index", "global_version", "client_id", "capacity_level",
                "cum_params_down", "cum_params_up", "staleness"}


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_records(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for rec in records:
        writer.writerow([_render(v) for v in astuple(rec)])
    return buf.getvalue()


def write_metrics(path, records) -> None:
    Path(path).write_text(format_records(records), encoding="utf-8")


class MetricsWriter:
    """Append-only metrics file, flushed per row."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(COLUMNS)

    def append(self, rec: MetricsRecord):
        self._writer.writerow([_render(v) for v in astuple(rec)])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != COLUMNS:
            raise ParseError(f"unexpected metrics header {header}", row=0)
        out = []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(COLUMNS):
                raise ParseError(f"expected {len(COLUMNS)} fields, got {len(row)}", row=row_no)
            values = {}
            for col_no, (name, raw) in enumerate(zip(COLUMNS, row), start=1):
                try:
                    if raw == "":
                        values[name] = None
                    elif name in _INT_COLUMNS:
                        values[name] = int(raw)
                    else:
                        values[name] = float(raw)
                except ValueError:
                    raise ParseError(f"bad value {raw!r} for {name}", row=row_no, column=col_no) from None
            out.append(MetricsRecord(**values))
    return out


def time_to_threshold(records, metric: str = "test_accuracy", threshold: float = 0.0,
                      lower_is_better: bool = False):
    """First ``(sim_time, cum_params_down + cum_params_up)`` reaching the target.

    Returns ``None`` when the target is never reached.
    """
    for rec in records:
        value = getattr(rec, metric)
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        hit = value <= threshold if lower_is_better else value >= threshold
        if hit:
            return rec.sim_time, rec.cum_params_down + rec.cum_params_up
    return None


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    time: float | None
    communication: int | None
    time_overhead: float | None
    comm_overhead: float | None
    best: bool

    def render(self) -> list[str]:
        if self.time is None:
            return [self.name, "N/A", "N/A", "N/A", "N/A"]
        t_over = "[Best]" if self.best else f"+{100 * self.time_overhead:.2f}%"
        c_over = "[Best]" if self.comm_overhead == 0 else f"+{100 * self.comm_overhead:.2f}%"
        return [self.name, f"{self.time:.1f}s", str(self.communication), t_over, c_over]


def compare_runs(traces: dict, metric: str = "test_accuracy", threshold: float | None = None,
                 lower_is_better: bool = False) -> list[ComparisonRow]:
    """Time and communication to reach ``threshold``, relative to the fastest run.

    With ``threshold=None`` the target is the second-lowest final best value
    among the runs (or the lowest when only one run is given).
    """
    if threshold is None:
        threshold = default_target(traces, metric, lower_is_better)
    reached = {name: time_to_threshold(recs, metric, threshold, lower_is_better)
               for name, recs in traces.items()}
    hits = [v for v in reached.values() if v is not None]
    best_time = min((t for t, _ in hits), default=None)
    best_comm = min((c for _, c in hits), default=None)
    rows = []
    for name, hit in reached.items():
        if hit is None:
            rows.append(ComparisonRow(name, None, None, None, None, False))
            continue
        t, c = hit
        t_over = (t - best_time) / best_time if best_time > 0 else 0.0
        c_over = (c - best_comm) / best_comm if best_comm > 0 else 0.0
        rows.append(ComparisonRow(name, t, c, t_over, c_over, t == best_time))
    return rows


def default_target(traces: dict, metric: str, lower_is_better: bool = False) -> float:
    finals = []
    for recs in traces.values():
        vals = [getattr(r, metric) for r in recs if getattr(r, metric) is not None]
        if vals:
            finals.append(min(vals) if lower_is_better else max(vals))
    if not finals:
        raise ValueError(f"no run reports {metric}")
    finals.sort(reverse=lower_is_better)
    return finals[1] if len(finals) > 1 else finals[0]


def format_table(rows) -> str:
    header = ["run", "time", "communication", "time overhead", "comm overhead"]
    lines = [header] + [r.render() for r in rows]
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
                     for line in lines) + "\n"
