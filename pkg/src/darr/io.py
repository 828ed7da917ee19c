"""Long-format CSV reading/writing and JSON run configuration."""

from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import fields
from typing import Optional

import numpy as np

from .data import LongitudinalDataset

ENV_PREFIX = "DARR_"
_X_COL = re.compile(r"^x_(\d+)$")
_Z_COL = re.compile(r"^z_(\d+)$")


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


class SchemaError(ValueError):
    """Data file violates the CSV schema; maps to exit code 2."""


def fmt(x) -> str:
    """17 significant digits, enough for an exact float round trip."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _indexed_columns(header, pattern, kind):
    found = [(int(m.group(1)), k) for k, h in enumerate(header) if (m := pattern.match(h))]
    idx = [i for i, _ in found]
    if idx != list(range(1, len(idx) + 1)):
        raise SchemaError(f"{kind} columns must be {kind}_1..{kind}_k in order, got {idx}")
    return [k for _, k in found]


def read_table(path: str, allow_missing_x: bool = False):
    """Parse the long-format CSV.

    Returns ``(ids, times, y, X, Z_or_None)`` with ids as strings. Missing or
    non-numeric cells raise :class:`SchemaError` naming the row (1-based,
    header excluded) and column. ``allow_missing_x`` turns empty x cells
    into NaN for preprocessing.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header[:3] != ["subject_id", "time", "y"]:
            raise SchemaError(f"{path}: header must start with subject_id,time,y")
        xcols = _indexed_columns(header, _X_COL, "x")
        zcols = _indexed_columns(header, _Z_COL, "z")
        if not xcols:
            raise SchemaError(f"{path}: no x_ columns")
        known = {0, 1, 2, *xcols, *zcols}
        extra = [header[k] for k in range(len(header)) if k not in known]
        if extra:
            raise SchemaError(f"{path}: unexpected columns {extra}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise SchemaError(f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}")
            ids.append(rec[0].strip())
            vals = []
            for k in range(1, len(header)):
                cell = rec[k].strip()
                if cell == "" or cell.lower() == "na":
                    if allow_missing_x and k in xcols:
                        vals.append(math.nan)
                        continue
                    raise SchemaError(f"{path}: row {lineno} column {header[k]!r} is missing")
                try:
                    v = float(cell)
                except ValueError:
                    raise SchemaError(f"{path}: row {lineno} column {header[k]!r} is not numeric: {cell!r}") from None
                if not math.isfinite(v):
                    if allow_missing_x and k in xcols and math.isnan(v):
                        vals.append(v)
                        continue
                    raise SchemaError(f"{path}: row {lineno} column {header[k]!r} is not finite")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    col = {h: k - 1 for k, h in enumerate(header)}
    times = arr[:, col["time"]]
    y = arr[:, col["y"]]
    X = arr[:, [k - 1 for k in xcols]]
    Z = arr[:, [k - 1 for k in zcols]] if zcols else None
    return ids, times, y, X, Z


def default_time_scale(ids) -> float:
    """Largest number of visits of any subject (T in Z = (1, t/T))."""
    _, counts = np.unique(np.asarray(ids), return_counts=True)
    return float(counts.max())


def _check_grouping(ids, path):
    seen, prev = set(), None
    for k, i in enumerate(ids, start=1):
        if i != prev:
            if i in seen:
                raise SchemaError(f"{path}: rows of subject {i!r} are not contiguous (row {k})")
            seen.add(i)
            prev = i


def read_dataset(path: str, time_scale: Optional[float] = None):
    """Dataset from CSV; Z defaults to (1, time/T). Returns ``(dataset, time_scale)``."""
    ids, times, y, X, Z = read_table(path)
    _check_grouping(ids, path)
    if Z is None:
        time_scale = float(time_scale or default_time_scale(ids))
        Z = np.column_stack([np.ones_like(times), times / time_scale])
    return LongitudinalDataset.from_long(ids, times, y, X, Z), time_scale


def write_rows(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) if isinstance(c, float) else c for c in row])


def write_dataset(path: str, dataset: LongitudinalDataset, include_z: bool = False) -> None:
    header = ["subject_id", "time", "y"] + [f"x_{j + 1}" for j in range(dataset.p)]
    if include_z:
        header += [f"z_{j + 1}" for j in range(dataset.q)]
    rows = []
    for blk in dataset.subjects:
        for t in range(blk.T):
            row = [str(blk.id), fmt(blk.times[t]), fmt(blk.Y[t])] + [fmt(v) for v in blk.X[t]]
            if include_z:
                row += [fmt(v) for v in blk.Z[t]]
            rows.append(row)
    write_rows(path, header, rows)


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_config(path: Optional[str], environ=None) -> dict:
    """JSON config plus ``DARR_SECTION__FIELD=value`` environment overrides.

    Override values are parsed as JSON when possible, else kept as strings.
    """
    cfg = {}
    if path:
        with open(path) as fh:
            text = fh.read()
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    environ = os.environ if environ is None else environ
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        raw = environ[key]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p!r} is not a section")
        node[parts[-1]] = value
    return cfg


def take_section(cfg: dict, name: str, allowed) -> dict:
    """Sub-dict ``cfg[name]`` after checking it has only ``allowed`` keys."""
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {', '.join(unknown)}")
    return sec


def dataclass_fields(cls) -> list:
    return [f.name for f in fields(cls)]
