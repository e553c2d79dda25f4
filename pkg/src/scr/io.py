"""Feature matrix files.

Binary layout: magic ``FVEC``, little-endian u32 rows, u32 cols, then f32
row-major payload. The text fallback has one ``name<TAB>v1 v2 ...`` line per
entity.
"""

import struct
import warnings
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError

FVEC_MAGIC = b"FVEC"


def write_fvec(path, X):
    X = np.ascontiguousarray(X, dtype="<f4")
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fout:
        fout.write(FVEC_MAGIC)
        fout.write(struct.pack("<II", *X.shape))
        fout.write(X.tobytes())


def read_fvec(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FVEC_MAGIC:
        raise FormatError(f"{path}: missing FVEC header")
    rows, cols = struct.unpack("<II", data[4:12])
    payload = data[12:]
    if len(payload) != 4 * rows * cols:
        raise FormatError(f"{path}: expected {rows}x{cols} payload, got {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


def read_feature_tsv(path, entity_ids):
    """Read ``name<TAB>values`` lines into a matrix aligned with ``entity_ids``.

    Entities without a line get a zero row.
    """
    rows = {}
    width = None
    with open(path, encoding="utf-8") as fin:
        for lineno, line in enumerate(fin, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            name, sep, values = line.partition("\t")
            if not sep:
                raise ParseError("expected name<TAB>values", line=lineno, path=path)
            try:
                vec = np.array([float(v) for v in values.split()])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            if width is None:
                width = len(vec)
            elif len(vec) != width:
                raise ParseError(f"expected {width} values, got {len(vec)}", line=lineno, path=path)
            rows[name] = vec
    X = np.zeros((len(entity_ids), width or 0))
    missing = 0
    for name, idx in entity_ids.items():
        vec = rows.get(name)
        if vec is None:
            missing += 1
        else:
            X[idx] = vec
    if missing:
        warnings.warn(f"{path}: {missing} entities have no feature row; zero-filled", stacklevel=2)
    return X


def write_feature_tsv(path, X, names):
    with open(path, "w", encoding="utf-8") as fout:
        for name, row in zip(names, np.asarray(X)):
            fout.write(name + "\t" + " ".join(repr(float(v)) for v in row) + "\n")


def read_features(path, entity_ids=None, num_rows=None):
    """Load a feature file, dispatching on the FVEC magic."""
    path = Path(path)
    with open(path, "rb") as fin:
        head = fin.read(4)
    if head == FVEC_MAGIC:
        X = read_fvec(path)
    else:
        if entity_ids is None:
            raise FormatError(f"{path}: text features need an entity vocabulary")
        X = read_feature_tsv(path, entity_ids)
    if num_rows is not None and X.shape[0] != num_rows:
        raise FormatError(f"{path}: {X.shape[0]} feature rows for {num_rows} entities")
    return X
