"""Whitespace-separated XYZ point files.

Each non-comment line holds ``x y z`` or ``x y z nx ny nz``; all lines of a
file must agree. Lines starting with ``#`` are skipped.
"""

from __future__ import annotations

import numpy as np

from .errors import XYZFormatError
from .geometry import LabeledCloud


def _parse(path):
    rows = []
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            fields = s.split()
            if len(fields) not in (3, 4, 6):
                raise XYZFormatError(
                    f"{path}:{lineno}: expected 3 or 6 fields, got {len(fields)}")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise XYZFormatError(
                    f"{path}:{lineno}: mixed {width}- and {len(fields)}-field lines")
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise XYZFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise XYZFormatError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def read_xyz(path) -> LabeledCloud:
    data = _parse(path)
    if data.shape[1] == 4:
        raise XYZFormatError(f"{path}: 4-field lines are not a supported layout")
    if not np.all(np.isfinite(data)):
        raise XYZFormatError(f"{path}: non-finite values")
    if data.shape[1] == 6:
        return LabeledCloud(data[:, :3], data[:, 3:])
    return LabeledCloud(data)


def read_columns(path, width: int) -> np.ndarray:
    """Read an XYZ-style file with a fixed number of numeric columns
    (used for the 4-column per-point error dumps)."""
    data = _parse(path)
    if data.shape[1] != width:
        raise XYZFormatError(f"{path}: expected {width} fields per line")
    return data


def _fmt(arr):
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in arr)


def write_xyz(path, points, normals=None) -> None:
    """Write 3- or 6-field lines. Floats use shortest round-trip repr."""
    data = np.asarray(points, dtype=np.float64)
    if normals is not None:
        data = np.hstack([data, np.asarray(normals, dtype=np.float64)])
    write_columns(path, data)


def write_columns(path, data) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(_fmt(np.asarray(data, dtype=np.float64)))
        fh.write("\n")
