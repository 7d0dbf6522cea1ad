"""Binary matrix files with JSON sidecars.

Layout: 8-byte magic ``PUMROM01``, u64 rows, u64 cols (little endian), then
the row-major little-endian float64 payload.  Fields are stored with one
column.  Sidecars live next to the data file as ``<name>.json``.
"""
import csv
import json
import os
import struct

import numpy as np

MAGIC = b"PUMROM01"
_HEADER = struct.Struct("<8sQQ")


class FormatError(ValueError):
    pass


def sidecar_path(path):
    return os.fspath(path) + ".json"


def write_matrix(path, A, meta=None):
    A = np.asarray(A, dtype="<f8")
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError("only 1-d and 2-d arrays are supported")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, A.shape[0], A.shape[1]))
        fh.write(np.ascontiguousarray(A).tobytes())
    if meta is not None:
        write_json(sidecar_path(path), meta)


def read_matrix(path, with_meta=False):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, rows, cols = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    if len(payload) != 8 * rows * cols:
        raise FormatError(f"{path}: expected {rows}x{cols} payload, got {len(payload)} bytes")
    A = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(float)
    if not with_meta:
        return A
    sc = sidecar_path(path)
    meta = read_json(sc) if os.path.exists(sc) else None
    return A, meta


def write_field(path, values, disc_meta, extra=None):
    meta = {"kind": "field", "discretization": disc_meta}
    if extra:
        meta.update(extra)
    write_matrix(path, np.asarray(values, float).ravel(), meta)


def read_field(path):
    A, meta = read_matrix(path, with_meta=True)
    if A.shape[1] != 1:
        raise FormatError(f"{path}: field files have one column")
    return A[:, 0], meta


def discretization_meta(disc):
    return {"degree": int(disc.ref.degree), "nex": int(disc.nex), "ney": int(disc.ney),
            "ndof": int(disc.ndof), "x_range": [float(disc.x1d[0]), float(disc.x1d[-1])],
            "y_range": [float(disc.y1d[0]), float(disc.y1d[-1])]}


def save_basis(path, basis, provenance=None):
    ev = [] if basis.eigenvalues is None else np.asarray(basis.eigenvalues, float).ravel()
    meta = {"kind": "basis", "label": basis.label, "n": int(basis.n),
            "eigenvalues": [float(x) for x in ev],
            "rank_deficient": bool(basis.rank_deficient), "meta": basis.meta}
    if provenance:
        meta["provenance"] = provenance
    write_matrix(path, basis.vectors, meta)


def load_basis(path):
    from .training import ReducedBasis
    V, meta = read_matrix(path, with_meta=True)
    meta = meta or {}
    return ReducedBasis(meta.get("label", ""), V, np.asarray(meta.get("eigenvalues", [])),
                        meta.get("rank_deficient", False), meta.get("meta", {}))


def save_state(path, state):
    write_matrix(path, state.coefficients, {"kind": "reduced_state", **state.report()})


def load_state(path):
    from .rom import ReducedState
    c, meta = read_matrix(path, with_meta=True)
    meta = meta or {}
    return ReducedState(c[:, 0], meta.get("residual_norms", []), meta.get("iterations", 0),
                        meta.get("wall_time", 0.0))


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_csv(path, header, rows, units=None):
    """CSV with a header row; ``units`` (column -> unit) goes in a ``# units:`` comment line."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if units:
            fh.write("# units: " + "; ".join(f"{k}={v}" for k, v in units.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(h, "") for h in header]
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    r = csv.DictReader(lines)
    return list(r)
