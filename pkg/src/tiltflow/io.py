"""Files: measure specs in, per-path CSVs out (and back in).

Every written file starts with one ``#`` line carrying the package version,
the seed and a hash of the run configuration.  Floats are written with
``repr`` so that a rerun with the same seed is byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .errors import MalformedSpec
from .flow import PROBE_LEVELS, PathResult
from .measure import Measure, make_measure

RESULT_COLUMNS = ["path_id", "T_hat", "W_T", "n_steps", "stop_reason", "tau_diag"]
CHECKPOINT_COLUMNS = ["path_id", "t", "w", "b", "c", "A", "S", "F_q10", "F_q50", "F_q90"]
DIAGNOSTIC_COLUMNS = ["path_id", "t_stop", "A_stop", "F_stop_q10", "F_stop_q50", "F_stop_q90",
                      "max_A_times_b", "max_A", "max_S_ratio", "max_gap", "min_db"]


def load_measure(path, center: bool | None = None) -> Measure:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedSpec(f"{path}: not valid JSON ({exc})") from exc
    return make_measure(spec, center=center)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def header_line(seed, config: dict) -> str:
    return f"# tiltflow {__version__} seed={seed} config={config_hash(config)}\n"


def write_atomic(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _table(header: str, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def results_tables(results: Sequence[PathResult], header: str) -> tuple[str, str, str]:
    """(main CSV, checkpoints CSV, diagnostics CSV) as text."""
    main = _table(header, RESULT_COLUMNS,
                  ((i, r.T_hat, r.W_T, r.n_steps, r.stop_reason, r.tau_diag)
                   for i, r in enumerate(results)))
    ck_rows = []
    for i, r in enumerate(results):
        for row in r.checkpoints:
            ck_rows.append([i, *row])
    ck = _table(header, CHECKPOINT_COLUMNS, ck_rows)
    diag = _table(header, DIAGNOSTIC_COLUMNS,
                  ((i, r.t_stop, r.A_stop, *r.F_stop, r.max_Ab, r.max_A, r.max_S_ratio,
                    r.max_gap, r.min_db) for i, r in enumerate(results)))
    return main, ck, diag


def companion_paths(out) -> tuple[Path, Path, Path]:
    out = Path(out)
    return out, Path(f"{out}.checkpoints.csv"), Path(f"{out}.diagnostics.csv")


def write_results(out, results: Sequence[PathResult], header: str) -> None:
    for path, text in zip(companion_paths(out), results_tables(results, header)):
        write_atomic(path, text)


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def read_results(out) -> list[PathResult]:
    """Rebuild PathResults from the main CSV and its companions (if present)."""
    main, ck_path, diag_path = companion_paths(out)
    rows = _read_csv(main)
    n_pr = len(PROBE_LEVELS)
    results = [PathResult(T_hat=float(r["T_hat"]), W_T=float(r["W_T"]),
                          n_steps=int(r["n_steps"]), stop_reason=r["stop_reason"],
                          tau_diag=float(r["tau_diag"]),
                          checkpoints=np.empty((0, 6 + n_pr)))
               for r in rows]
    if ck_path.exists():
        per = {}
        for r in _read_csv(ck_path):
            per.setdefault(int(r["path_id"]), []).append(
                [float(r[c]) for c in CHECKPOINT_COLUMNS[1:]])
        for i, rows_i in per.items():
            results[i].checkpoints = np.array(rows_i)
    if diag_path.exists():
        for r in _read_csv(diag_path):
            res = results[int(r["path_id"])]
            res.t_stop = float(r["t_stop"])
            res.A_stop = float(r["A_stop"])
            res.F_stop = np.array([float(r[c]) for c in DIAGNOSTIC_COLUMNS[3:6]])
            res.max_Ab = float(r["max_A_times_b"])
            res.max_A = float(r["max_A"])
            res.max_S_ratio = float(r["max_S_ratio"])
            res.max_gap = float(r["max_gap"])
            res.min_db = float(r["min_db"])
    return results
