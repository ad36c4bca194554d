"""On-disk formats: raw row-major float64 matrices with JSON sidecars, and CSV tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .datagen import DataMatrixPair

__all__ = [
    "MATRIX_FORMAT",
    "read_csv",
    "read_matrix",
    "read_pair",
    "to_jsonable",
    "write_csv",
    "write_matrix",
    "write_pair",
]

MATRIX_FORMAT = "sdrkit.matrix/1"


def _base(path: str | Path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuples for json.dumps."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_matrix(path: str | Path, array: NDArray, meta: dict | None = None) -> Path:
    """Write ``path.bin`` (little-endian float64, row-major) and ``path.json``."""
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    a = np.ascontiguousarray(np.atleast_2d(array), dtype="<f8")
    base.with_suffix(".bin").write_bytes(a.tobytes())
    header = {"format": MATRIX_FORMAT, "shape": list(a.shape), "dtype": "float64",
              "order": "row-major", "meta": to_jsonable(meta or {})}
    base.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return base


def read_matrix(path: str | Path) -> tuple[NDArray, dict]:
    base = _base(path)
    header = json.loads(base.with_suffix(".json").read_text())
    if header.get("format") != MATRIX_FORMAT:
        raise ValueError(f"{base}: unsupported matrix format {header.get('format')!r}")
    data = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype="<f8")
    shape = tuple(header["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{base}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape).copy(), header.get("meta", {})


def write_pair(directory: str | Path, pair: DataMatrixPair) -> Path:
    """Write ``x`` and ``y`` matrices plus ``pair.json`` with provenance and true MI."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"provenance": pair.provenance, "true_mi": pair.true_mi}
    write_matrix(directory / "x", pair.x, meta)
    write_matrix(directory / "y", pair.y, meta)
    if pair.shared is not None:
        write_matrix(directory / "shared", pair.shared, meta)
    (directory / "pair.json").write_text(json.dumps(to_jsonable(meta), indent=2, sort_keys=True))
    return directory


def read_pair(directory: str | Path) -> DataMatrixPair:
    directory = Path(directory)
    x, _ = read_matrix(directory / "x")
    y, _ = read_matrix(directory / "y")
    meta = {}
    if (directory / "pair.json").exists():
        meta = json.loads((directory / "pair.json").read_text())
    shared = None
    if (directory / "shared.bin").exists():
        shared, _ = read_matrix(directory / "shared")
    return DataMatrixPair(x, y, provenance=meta.get("provenance") or {},
                          true_mi=meta.get("true_mi"), shared=shared)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])
    return path


def _parse(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path: str | Path) -> tuple[list[str], list[dict]]:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        columns = next(r)
        rows = [{c: _parse(v) for c, v in zip(columns, line)} for line in r]
    return columns, rows
