"""
Long-format CSV ingestion and output.

Three file kinds are recognized by their header:

* samples: ``obs_id,value``, one row per sample point;
* densities: ``obs_id,x,f``, equispaced ``x`` per observation;
* targets: ``obs_id,y``.

Observation ids are kept as exact strings, in order of first appearance.
Every error names the file and the 1-based line number.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .dist_core import EmpiricalDistribution, GridDensity
from .errors import InvalidInputError

HEADERS = {
    ("obs_id", "value"): "samples",
    ("obs_id", "x", "f"): "densities",
    ("obs_id", "y"): "targets",
}

EQUISPACED_RTOL = 1e-6


def _fail(path, line, msg):
    raise InvalidInputError(f"{path}: line {line}: {msg}")


def _rows(path):
    """Yield ``(line_number, fields)`` after the header, plus the detected kind."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InvalidInputError(f"{path}: cannot open: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            _fail(path, 1, "empty file")
        except csv.Error as exc:
            _fail(path, 1, str(exc))
        key = tuple(h.strip() for h in header)
        if key not in HEADERS:
            _fail(path, 1, f"unrecognized header {','.join(key)!r}")
        rows = []
        try:
            for fields in reader:
                if not fields or all(not f.strip() for f in fields):
                    continue
                if len(fields) != len(key):
                    _fail(path, reader.line_num,
                          f"expected {len(key)} fields, got {len(fields)}")
                rows.append((reader.line_num, [f.strip() for f in fields]))
        except csv.Error as exc:
            _fail(path, reader.line_num, str(exc))
    if not rows:
        _fail(path, 2, "no data rows")
    return HEADERS[key], rows


def _number(path, line, text, what):
    try:
        v = float(text)
    except ValueError:
        _fail(path, line, f"{what} {text!r} is not a number")
    if not math.isfinite(v):
        _fail(path, line, f"{what} must be finite")
    return v


def _check_id(path, line, obs):
    if not obs:
        _fail(path, line, "empty obs_id")
    return obs


def detect_kind(path) -> str:
    return _rows(path)[0]


def _expect(path, kind, wanted):
    if kind != wanted:
        raise InvalidInputError(f"{path}: line 1: expected a {wanted} file, got {kind}")


def _group(path, rows, names):
    groups: dict[str, list] = {}
    for line, fields in rows:
        obs = _check_id(path, line, fields[0])
        vals = [_number(path, line, t, name) for t, name in zip(fields[1:], names)]
        groups.setdefault(obs, []).append((line, vals))
    return groups


def read_samples(path) -> dict[str, EmpiricalDistribution]:
    kind, rows = _rows(path)
    _expect(path, kind, "samples")
    out = {}
    for obs, items in _group(path, rows, ("value",)).items():
        out[obs] = EmpiricalDistribution(np.array([v[0] for _, v in items]))
    return out


def read_densities(path) -> dict[str, GridDensity]:
    """Densities must be equispaced per observation and integrate to 1 (trapezoid)."""
    kind, rows = _rows(path)
    _expect(path, kind, "densities")
    out = {}
    for obs, items in _group(path, rows, ("x", "f")).items():
        lines = np.array([ln for ln, _ in items])
        xf = np.array([v for _, v in items])
        order = np.argsort(xf[:, 0], kind="stable")
        x, f, lines = xf[order, 0], xf[order, 1], lines[order]
        if x.size < 2:
            _fail(path, lines[0], f"obs_id {obs!r} has fewer than 2 grid points")
        dx = np.diff(x)
        step = (x[-1] - x[0]) / (x.size - 1)
        bad = np.nonzero(np.abs(dx - step) > EQUISPACED_RTOL * max(step, 1e-300))[0]
        if step <= 0 or bad.size:
            _fail(path, lines[bad[0] + 1] if bad.size else lines[0],
                  f"x grid of obs_id {obs!r} is not equispaced")
        neg = np.nonzero(f < 0)[0]
        if neg.size:
            _fail(path, lines[neg[0]], f"negative density value for obs_id {obs!r}")
        try:
            out[obs] = GridDensity(x[0], x[-1], f)
        except InvalidInputError as exc:
            _fail(path, lines[0], f"obs_id {obs!r}: {exc}")
    return out


def read_targets(path) -> dict[str, float]:
    kind, rows = _rows(path)
    _expect(path, kind, "targets")
    out = {}
    for line, fields in rows:
        obs = _check_id(path, line, fields[0])
        if obs in out:
            _fail(path, line, f"duplicate obs_id {obs!r}")
        out[obs] = _number(path, line, fields[1], "y")
    return out


def read_inputs(path):
    """Samples or densities, whichever the header declares: ``(kind, {obs_id: obj})``."""
    kind = detect_kind(path)
    if kind == "samples":
        return kind, read_samples(path)
    if kind == "densities":
        return kind, read_densities(path)
    raise InvalidInputError(f"{path}: line 1: expected samples or densities, got targets")


def align(inputs: dict, targets: dict, inputs_path="inputs", targets_path="targets"):
    """Pair inputs with targets by exact obs_id, in input order."""
    missing = [k for k in inputs if k not in targets]
    if missing:
        raise InvalidInputError(f"{targets_path}: no target for obs_id {missing[0]!r}")
    extra = [k for k in targets if k not in inputs]
    if extra:
        raise InvalidInputError(f"{inputs_path}: no input for obs_id {extra[0]!r}")
    ids = list(inputs)
    return ids, [inputs[k] for k in ids], np.array([targets[k] for k in ids])


def fmt(v) -> str:
    """12 significant digits."""
    return format(float(v), ".12g")


def write_predictions(fh, ids, mean, sd):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["obs_id", "mean", "sd"])
    for k, mu, s in zip(ids, mean, sd):
        w.writerow([k, fmt(mu), fmt(s)])
