"""Matrix files, edge lists, sidecar metadata and JSON run reports.

Text matrices are header-free, row-major, comma- or whitespace-delimited.
The binary format is a 16-byte header (8-byte magic ``ROBSUBF8``, then
``N`` and ``p`` as little-endian uint32) followed by ``N*p`` little-endian
float64 values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

MAGIC = b"ROBSUBF8"
HEADER = struct.Struct("<8sII")


class DataFileError(OSError):
    """Unreadable, malformed or protected data file."""


def _check_overwrite(path, force):
    if os.path.exists(path) and not force:
        raise DataFileError(f"{path} exists; pass --force to overwrite")


def is_binary_matrix(path):
    with open(path, "rb") as fh:
        return fh.read(len(MAGIC)) == MAGIC


def read_matrix(path, binary=None):
    """Load a 2-D float matrix; the format is sniffed when ``binary`` is None."""
    try:
        if binary is None:
            binary = is_binary_matrix(path)
        if binary:
            with open(path, "rb") as fh:
                head = fh.read(HEADER.size)
                if len(head) != HEADER.size:
                    raise DataFileError(f"{path}: truncated header")
                magic, N, p = HEADER.unpack(head)
                if magic != MAGIC:
                    raise DataFileError(f"{path}: bad magic {magic!r}")
                data = np.frombuffer(fh.read(), dtype="<f8")
            if data.size != N * p:
                raise DataFileError(f"{path}: expected {N * p} values, found {data.size}")
            return data.reshape(N, p).astype(float)
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if not text.strip():
            raise DataFileError(f"{path}: empty matrix")
        delim = "," if "," in text else None
        A = np.loadtxt(text.splitlines(), delimiter=delim, ndmin=2, dtype=float)
    except DataFileError:
        raise
    except (OSError, ValueError) as exc:
        raise DataFileError(f"cannot read matrix from {path}: {exc}") from exc
    if A.size == 0:
        raise DataFileError(f"{path}: empty matrix")
    return A


def write_matrix(path, A, binary=False, force=False, delimiter=","):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    _check_overwrite(path, force)
    if binary:
        N, p = A.shape
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, N, p))
            fh.write(np.ascontiguousarray(A, dtype="<f8").tobytes())
    else:
        np.savetxt(path, A, delimiter=delimiter, fmt="%.17g", encoding="utf-8")


def read_vector(path, dtype=float):
    A = read_matrix(path, binary=False)
    if min(A.shape) != 1:
        raise DataFileError(f"{path}: expected a single row or column")
    return A.ravel().astype(dtype)


def read_edge_list(path, n_nodes=None):
    """Symmetric 0/1 adjacency from whitespace-separated node-id pairs.

    Node ids are nonnegative integers; self-loops are dropped and
    duplicate edges collapse.
    """
    try:
        E = np.loadtxt(path, dtype=int, ndmin=2, comments="#")
    except (OSError, ValueError) as exc:
        raise DataFileError(f"cannot read edge list from {path}: {exc}") from exc
    if E.size and E.shape[1] != 2:
        raise DataFileError(f"{path}: each line needs exactly two node ids")
    if E.size and E.min() < 0:
        raise DataFileError(f"{path}: node ids must be nonnegative")
    n = int(E.max()) + 1 if E.size else 0
    n = n if n_nodes is None else int(n_nodes)
    if E.size and E.max() >= n:
        raise DataFileError(f"{path}: node id {int(E.max())} >= n_nodes {n}")
    A = np.zeros((n, n))
    for i, j in E:
        if i != j:
            A[i, j] = A[j, i] = 1.0
    return A


def sidecar_path(path):
    return str(path) + ".meta.json"


def write_sidecar(path, meta, force=False):
    write_json(sidecar_path(path), meta, force=force)


def write_json(path, obj, force=False):
    _check_overwrite(path, force)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _finite(x):
    x = float(x)
    return x if np.isfinite(x) else None


def _plain(obj):
    # non-finite floats become strings so the report stays strict JSON
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class RunReport:
    command: list
    config: dict
    seed: int
    metrics: dict = field(default_factory=dict)
    outlier_norms: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["metrics"] = {k: _finite(v) for k, v in self.metrics.items()}
        d["outlier_norms"] = [float(v) for v in self.outlier_norms]
        return _plain(json.loads(json.dumps(d, default=_json_default)))


def report_schema():
    return json.loads(resources.files("robsub").joinpath("report_schema.json").read_text())


def validate_report(d):
    import jsonschema

    jsonschema.validate(d, report_schema())
