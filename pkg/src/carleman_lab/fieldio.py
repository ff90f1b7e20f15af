"""Field files and CSV output, written atomically.

Binary layout (little-endian): a 64-byte header

    magic    8s   b"CARLFLD1"
    version  u32  1
    ndim     u32  number of array axes (<= 5)
    dims     5 x u64, unused entries 0
    ncomp    u64  component count (size of axis 0, or 1 for a single field)

followed by the array as row-major float64.
"""

import csv
import io
import os
import struct
import tempfile

import numpy as np

MAGIC = b"CARLFLD1"
VERSION = 1
HEADER = struct.Struct("<8sII5QQ")
MAX_DIMS = 5
assert HEADER.size == 64


class FieldFormatError(ValueError):
    pass


def atomic_write(path, data, mode="wb"):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_field(a, ncomp=None):
    a = np.ascontiguousarray(a, dtype="<f8")
    if a.ndim > MAX_DIMS or a.ndim == 0:
        raise FieldFormatError(f"field must have 1..{MAX_DIMS} axes, got {a.ndim}")
    dims = list(a.shape) + [0] * (MAX_DIMS - a.ndim)
    nc = (a.shape[0] if a.ndim > 3 else 1) if ncomp is None else ncomp
    return HEADER.pack(MAGIC, VERSION, a.ndim, *dims, nc) + a.tobytes(order="C")


def decode_field(buf):
    if len(buf) < HEADER.size:
        raise FieldFormatError("truncated header")
    magic, version, ndim, *rest = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FieldFormatError(f"unsupported version {version}")
    if not 1 <= ndim <= MAX_DIMS:
        raise FieldFormatError(f"bad ndim {ndim}")
    shape = tuple(rest[:ndim])
    count = int(np.prod(shape))
    body = buf[HEADER.size:]
    if len(body) != 8 * count:
        raise FieldFormatError(f"payload has {len(body)} bytes, expected {8 * count}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(float)


def write_field(path, a, ncomp=None):
    atomic_write(path, encode_field(a, ncomp))


def read_field(path):
    with open(path, "rb") as f:
        return decode_field(f.read())


def field_to_csv(a, grid=None):
    """Long-format CSV: one row per node with its indices (and coordinates if a grid is given)."""
    a = np.asarray(a, dtype=float)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    names = [f"i{k}" for k in range(a.ndim)]
    coords = grid is not None and a.ndim >= 3
    w.writerow(names + (["t", "r", "theta"] if coords else []) + ["value"])
    for idx in np.ndindex(a.shape):
        row = list(idx)
        if coords:
            it, ir, ith = idx[-3:]
            row += [f"{grid.t[it]:.17g}", f"{grid.r[ir]:.17g}", f"{grid.theta[ith]:.17g}"]
        w.writerow(row + [f"{a[idx]:.17g}"])
    return out.getvalue()


def write_field_csv(path, a, grid=None):
    atomic_write(path, field_to_csv(a, grid), mode="w")


def format_value(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def report_csv(columns, rows, schema=1):
    """CSV text with a ``# schema=N`` first line."""
    out = io.StringIO()
    out.write(f"# schema={schema}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r[c]) for c in columns])
    return out.getvalue()


def write_report(path, columns, rows, schema=1):
    atomic_write(path, report_csv(columns, rows, schema), mode="w")


def read_report(path):
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# schema="):
            raise FieldFormatError("missing schema line")
        return list(csv.DictReader(f))
