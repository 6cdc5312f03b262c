"""UMDS: a directory holding ``meta.json`` plus raw little-endian payloads.

Layout::

    meta.json  {"n", "p", "k", "y_kind", "dtype": "f64le", "order": "row-major", "version": 1}
    X.bin      n*p float64, row-major
    y.bin      n float64 (n*k for y_kind == "onehot")
    c.bin      n uint32 cluster indices

Payload sizes must match the header exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .mixture import Dataset

VERSION = 1
_F64 = np.dtype("<f8")
_U32 = np.dtype("<u4")
_ROWS_PER_WRITE = 1 << 15


def _expected_sizes(meta: dict) -> dict[str, int]:
    n, p, k = meta["n"], meta["p"], meta["k"]
    ny = n * k if meta["y_kind"] == "onehot" else n
    return {"X.bin": n * p * 8, "y.bin": ny * 8, "c.bin": n * 4}


def save_external_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as a UMDS directory, streaming the feature payload in row blocks."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"n": ds.n, "p": ds.p, "k": ds.k, "y_kind": ds.y_kind,
            "dtype": "f64le", "order": "row-major", "version": VERSION}
    with open(root / "X.bin", "wb") as fh:
        for s in range(0, ds.n, _ROWS_PER_WRITE):
            fh.write(np.ascontiguousarray(ds.X[s:s + _ROWS_PER_WRITE], dtype=_F64).tobytes())
    (root / "y.bin").write_bytes(np.ascontiguousarray(ds.y, dtype=_F64).tobytes())
    (root / "c.bin").write_bytes(np.ascontiguousarray(ds.c, dtype=_U32).tobytes())
    (root / "meta.json").write_text(json.dumps(meta))


def load_external_dataset(path) -> Dataset:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing meta.json in {root}") from exc
    for key in ("n", "p", "k", "y_kind"):
        if key not in meta:
            raise FormatError(f"meta.json lacks {key!r}")
    if meta.get("dtype", "f64le") != "f64le" or meta.get("order", "row-major") != "row-major":
        raise FormatError("only f64le row-major payloads are supported")
    if meta.get("version", VERSION) != VERSION:
        raise FormatError(f"unsupported UMDS version {meta.get('version')}")
    sizes = _expected_sizes(meta)
    for name, size in sizes.items():
        f = root / name
        if not f.exists():
            raise FormatError(f"missing payload {name}")
        actual = f.stat().st_size
        if actual != size:
            raise FormatError(f"{name}: expected {size} bytes from header, found {actual}")
    n, p, k = meta["n"], meta["p"], meta["k"]
    X = np.fromfile(root / "X.bin", dtype=_F64).reshape(n, p)
    y = np.fromfile(root / "y.bin", dtype=_F64)
    if meta["y_kind"] == "onehot":
        y = y.reshape(n, k)
    c = np.fromfile(root / "c.bin", dtype=_U32).astype(np.int64)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise FormatError("non-finite values in payload")
    if n and c.max() >= k:
        raise FormatError(f"cluster index {c.max()} out of range for k={k}")
    try:
        return Dataset(X=X.astype(np.float64, copy=False), y=y.astype(np.float64, copy=False),
                       c=c, k=k, y_kind=meta["y_kind"], provenance="external")
    except ConfigError as exc:
        raise FormatError(f"invalid dataset in {root}: {exc}") from exc
