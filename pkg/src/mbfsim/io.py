"""CSV / JSON forms of simulator and experiment outputs.

Floats are written with ``repr`` so every file parses back to identical
values.  Schemas:

* histogram CSV: ``state,fraction``
* occupancy CSV: ``state,empirical_fraction,analytic_pi`` (``analytic_pi``
  empty when the chain has no stationary distribution)
* trace CSV: ``time,state``; the first row is ``0,start_state``
* sweep CSV: ``p,q,valid,n_runs,n_purely_good,n_purely_bad,n_flipped,mean_first_flip``
  with ``valid`` either ``valid`` or ``invalid`` (invalid cells leave the
  remaining columns empty; ``mean_first_flip`` is empty when no run flipped)
* aggregate JSON: see :func:`aggregate_to_dict`
"""
from __future__ import annotations

import csv
import io
import json
from typing import Iterable

import numpy as np

from .simulator import AggregateStats, OccupancyHistogram, RunTrace

HISTOGRAM_HEADER = ["state", "fraction"]
OCCUPANCY_HEADER = ["state", "empirical_fraction", "analytic_pi"]
TRACE_HEADER = ["time", "state"]
SWEEP_HEADER = ["p", "q", "valid", "n_runs", "n_purely_good", "n_purely_bad",
                "n_flipped", "mean_first_flip"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _opt_float(s: str):
    return None if s == "" else float(s)


def _write_rows(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) if not isinstance(x, str) else x for x in row])
    return buf.getvalue()


def _read_rows(text: str, header) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != list(header):
        raise ValueError(f"expected header {header}, got {reader.fieldnames}")
    return list(reader)


# -- histograms -------------------------------------------------------------

def histogram_to_csv(hist: OccupancyHistogram) -> str:
    return _write_rows(HISTOGRAM_HEADER, enumerate(hist.fractions))


def histogram_from_csv(text: str) -> OccupancyHistogram:
    rows = _read_rows(text, HISTOGRAM_HEADER)
    if [int(r["state"]) for r in rows] != list(range(len(rows))):
        raise ValueError("states must be 0..n in order")
    return OccupancyHistogram(np.array([float(r["fraction"]) for r in rows]))


def occupancy_to_csv(hist: OccupancyHistogram, pi: np.ndarray | None) -> str:
    rows = []
    for i, x in enumerate(hist.fractions):
        rows.append((i, x, None if pi is None else pi[i]))
    return _write_rows(OCCUPANCY_HEADER, rows)


def occupancy_from_csv(text: str) -> tuple[np.ndarray, np.ndarray | None]:
    rows = _read_rows(text, OCCUPANCY_HEADER)
    emp = np.array([float(r["empirical_fraction"]) for r in rows])
    pis = [_opt_float(r["analytic_pi"]) for r in rows]
    pi = None if any(v is None for v in pis) else np.array(pis)
    return emp, pi


# -- traces -----------------------------------------------------------------

def trace_to_csv(trace: RunTrace) -> str:
    rows = [(0.0, trace.start_state)]
    rows += [(float(t), int(s)) for t, s in zip(trace.times, trace.states)]
    return _write_rows(TRACE_HEADER, rows)


def trace_from_csv(text: str, end_time: float) -> RunTrace:
    rows = _read_rows(text, TRACE_HEADER)
    if not rows:
        raise ValueError("trace CSV has no start row")
    start = int(rows[0]["state"])
    times = np.array([float(r["time"]) for r in rows[1:]])
    states = np.array([int(r["state"]) for r in rows[1:]], dtype=np.int64)
    return RunTrace(start, times, states, float(end_time))


# -- aggregates -------------------------------------------------------------

def aggregate_to_dict(agg: AggregateStats) -> dict:
    return {
        "n_runs": agg.n_runs,
        "n_purely_good": agg.n_purely_good,
        "n_purely_bad": agg.n_purely_bad,
        "n_flipped": agg.n_flipped,
        "percent_purely_good": agg.percent_purely_good,
        "percent_purely_bad": agg.percent_purely_bad,
        "percent_flipped": agg.percent_flipped,
        "mean_first_flip": agg.mean_first_flip,
        "sem_first_flip": agg.sem_first_flip,
        "occupancy": [float(x) for x in agg.occupancy.fractions],
    }


def aggregate_from_dict(doc: dict) -> AggregateStats:
    return AggregateStats(
        n_runs=doc["n_runs"],
        n_purely_good=doc["n_purely_good"],
        n_purely_bad=doc["n_purely_bad"],
        n_flipped=doc["n_flipped"],
        mean_first_flip=doc["mean_first_flip"],
        sem_first_flip=doc["sem_first_flip"],
        occupancy=OccupancyHistogram(np.array(doc["occupancy"], dtype=float)),
    )


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# -- sweeps -----------------------------------------------------------------

def sweep_to_csv(cells: Iterable) -> str:
    rows = []
    for c in cells:
        if not c.valid:
            rows.append((c.p, c.q, "invalid", None, None, None, None, None))
            continue
        a = c.stats
        rows.append((c.p, c.q, "valid", a.n_runs, a.n_purely_good, a.n_purely_bad,
                     a.n_flipped, a.mean_first_flip))
    return _write_rows(SWEEP_HEADER, rows)


def sweep_from_csv(text: str) -> list[dict]:
    out = []
    for r in _read_rows(text, SWEEP_HEADER):
        valid = r["valid"] == "valid"
        if r["valid"] not in ("valid", "invalid"):
            raise ValueError(f"bad validity marker {r['valid']!r}")
        row = {"p": float(r["p"]), "q": float(r["q"]), "valid": valid}
        for key in ("n_runs", "n_purely_good", "n_purely_bad", "n_flipped"):
            row[key] = int(r[key]) if r[key] != "" else None
        row["mean_first_flip"] = _opt_float(r["mean_first_flip"])
        out.append(row)
    return out
