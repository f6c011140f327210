"""CSV formats for filter traces and evaluation reports."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError
from .filter import Trace

TRACE_HEADER = ["t", "est_x", "est_y", "ess", "resampled"]
METRIC_COLUMNS = ["method", "rmse_mean", "rmse_se", "eta_mean", "eta_se", "crlb_rms",
                  "eta_ratio_of_means", "n_runs"]


def _atomic_write(path, write_rows):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write_rows(csv.writer(fh))
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_trace(trace: Trace, path) -> None:
    def rows(w):
        w.writerow(TRACE_HEADER)
        for t, (x, y), e, r in zip(trace.t, trace.est, trace.ess, trace.resampled):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(e)), int(r)])

    _atomic_write(path, rows)


def read_trace(path) -> Trace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(TRACE_HEADER)}")
        data = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ParseError(path, lineno, f"expected 5 fields, got {len(row)}")
            try:
                data.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from exc
    a = np.array(data, dtype=float).reshape(-1, 5)
    return Trace(a[:, 0], a[:, 1:3], a[:, 3], a[:, 4].astype(bool))


def _fmt(v):
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_metrics(rows: list[dict], path) -> None:
    def out(w):
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])

    _atomic_write(path, out)


def read_metrics(path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_COLUMNS:
            raise ParseError(path, 1, "not a metrics report")
        out = {}
        for r in reader:
            out[r["method"]] = {k: (int(v) if k == "n_runs" else float(v))
                                for k, v in r.items() if k != "method"}
    return out


def write_table(path, header: list[str], columns: list) -> None:
    """Column-oriented numeric table."""
    cols = [np.asarray(c) for c in columns]
    if len({len(c) for c in cols}) > 1:
        raise DataError("table columns differ in length")

    def out(w):
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])

    _atomic_write(path, out)


def read_table(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(path, 1, "empty table")
        rows = list(reader)
    cols = {}
    for k, name in enumerate(header):
        vals = [r[k] for r in rows]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals)
    return cols
