"""CSV interchange: samples, weights, estimates, covariance blocks, manifests.

Sample files hold ``cluster_id,x1,...,xd`` rows (header optional).  Weight
files hold ``cluster_id,weight`` or the optimiser's ``cluster_id,m_i,w_i``.
Floats are written with ``repr`` (shortest round-trip, period decimal point).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .model import ClusteredSample, WeightScheme


class InputFormatError(ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _rows(path):
    """Yield ``(line_number, fields)`` skipping blanks and ``#`` comments."""
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if row[0].lstrip().startswith("#"):
                continue
            yield lineno, [c.strip() for c in row]


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_sample_csv(path) -> ClusteredSample:
    groups: dict[int, list] = {}
    width = None
    for lineno, row in _rows(path):
        if width is None and not all(_is_number(c) for c in row):
            # header line
            if row[0].lower() != "cluster_id":
                raise InputFormatError(path, lineno, "first column must be cluster_id")
            width = len(row)
            continue
        if width is None:
            width = len(row)
        if len(row) != width:
            raise InputFormatError(path, lineno, f"expected {width} fields, found {len(row)}")
        if width < 2:
            raise InputFormatError(path, lineno, "need cluster_id and at least one coordinate")
        try:
            cid = int(row[0])
        except ValueError:
            raise InputFormatError(path, lineno, f"cluster_id {row[0]!r} is not an integer") from None
        try:
            coords = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise InputFormatError(path, lineno, f"bad coordinate: {exc}") from None
        if not all(np.isfinite(coords)):
            raise InputFormatError(path, lineno, "coordinates must be finite")
        groups.setdefault(cid, []).append(coords)
    if not groups:
        raise InputFormatError(path, 0, "no data rows")
    return ClusteredSample(list(groups.values()), ids=list(groups.keys()))


@dataclass
class WeightTable:
    ids: list
    weights: np.ndarray
    sizes: np.ndarray | None = None

    def scheme_for(self, sample: ClusteredSample) -> WeightScheme:
        lookup = dict(zip(self.ids, self.weights))
        missing = [i for i in sample.ids if i not in lookup]
        if missing:
            raise ValueError(f"no weight for cluster ids {missing}")
        return WeightScheme(np.array([lookup[i] for i in sample.ids]))


def read_weights_csv(path) -> WeightTable:
    ids, ws, ms = [], [], []
    layout = None
    for lineno, row in _rows(path):
        if layout is None and not all(_is_number(c) for c in row):
            names = [c.lower() for c in row]
            if names[:2] == ["cluster_id", "weight"] and len(names) == 2:
                layout = "plain"
            elif names == ["cluster_id", "m_i", "w_i"]:
                layout = "sized"
            else:
                raise InputFormatError(path, lineno, "header must be cluster_id,weight or cluster_id,m_i,w_i")
            continue
        if layout is None:
            layout = "plain" if len(row) == 2 else "sized"
        want = 2 if layout == "plain" else 3
        if len(row) != want:
            raise InputFormatError(path, lineno, f"expected {want} fields, found {len(row)}")
        try:
            cid = int(row[0])
            if layout == "sized":
                m = int(row[1])
                if m < 1:
                    raise ValueError("m_i must be >= 1")
                ms.append(m)
            w = float(row[-1])
        except ValueError as exc:
            raise InputFormatError(path, lineno, str(exc)) from None
        if not (np.isfinite(w) and w > 0):
            raise InputFormatError(path, lineno, "weights must be finite and positive")
        if cid in ids:
            raise InputFormatError(path, lineno, f"duplicate cluster_id {cid}")
        ids.append(cid)
        ws.append(w)
    if not ids:
        raise InputFormatError(path, 0, "no weight rows")
    return WeightTable(ids, np.array(ws), np.array(ms) if ms else None)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_sample_csv(path, sample: ClusteredSample):
    header = ["cluster_id"] + [f"x{k + 1}" for k in range(sample.d)]
    rows = []
    for cid, cluster in zip(sample.ids, sample.clusters):
        rows.extend([cid, *pt] for pt in cluster)
    write_csv(path, header, rows)


def write_weights_csv(path, ids, sizes, weights):
    write_csv(path, ["cluster_id", "m_i", "w_i"], zip(ids, sizes, weights))


def write_theta_csv(path, theta):
    theta = np.asarray(theta)
    write_csv(path, [f"theta_{k + 1}" for k in range(theta.size)], [list(theta)])


def write_covariance_csv(path, report):
    d = report.d
    rows = []
    for name in ("B_hat", "C_hat", "V_hat", "Sigma_hat"):
        M = getattr(report, name)
        rows.extend([name, r, *M[r]] for r in range(d))
    write_csv(path, ["matrix", "row"] + [f"c{k + 1}" for k in range(d)], rows)


def read_covariance_csv(path) -> dict:
    out: dict[str, list] = {}
    for lineno, row in _rows(path):
        if row[0] == "matrix":
            continue
        out.setdefault(row[0], []).append([float(v) for v in row[2:]])
    return {k: np.array(v) for k, v in out.items()}


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_path: str | None = None
    seed: int | None = None
    tool_version: str = __version__
    started: str = field(default_factory=now)
    finished: str | None = None
    outputs: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def add_output(self, path):
        p = str(path)
        if p not in self.outputs:
            self.outputs.append(p)

    def write(self, path):
        self.finished = now()
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, ensure_ascii=False)
            fh.write("\n")


def default_seed(fallback: int = 20150101) -> int:
    raw = os.environ.get("WMEST_SEED")
    return int(raw) if raw else fallback
