"""Plain-text artifacts: grid fields, eigenpairs and CSV tables.

Every writer accepts ``header``, a mapping written as leading ``# key=value``
comment lines; readers skip any line starting with ``#``.  Floats are
printed with 17 significant digits so that files round-trip exactly.
"""

import csv
import io as _io

import numpy as np

from ._validation import check_vector

FLOAT_FMT = "%.17e"


def _fmt(x):
    return FLOAT_FMT % x


def _header_lines(header):
    if not header:
        return ""
    return "".join(f"# {key}={value}\n" for key, value in header.items())


def _data_lines(path):
    with open(path) as fh:
        return [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]


def _write(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def read_header(path):
    """Return the ``# key=value`` comment lines of a file as a dict."""
    out = {}
    with open(path) as fh:
        for ln in fh:
            if not ln.startswith("#"):
                break
            key, _, value = ln[1:].strip().partition("=")
            out[key.strip()] = value.strip()
    return out


def write_grid(path, values, dx=1.0, dy=1.0, header=None):
    """Write a 2-D field as ``nx ny dx dy`` followed by row-major values.

    A 1-D array is written as a single row (``ny = 1``).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    ny, nx = values.shape
    buf = _io.StringIO()
    buf.write(_header_lines(header))
    buf.write(f"{nx} {ny} {_fmt(dx)} {_fmt(dy)}\n")
    for row in values:
        buf.write(" ".join(_fmt(v) for v in row) + "\n")
    _write(path, buf.getvalue())


def read_grid(path):
    """Read a grid file; returns ``(values of shape (ny, nx), dx, dy)``."""
    lines = _data_lines(path)
    if not lines:
        raise ValueError(f"{path}: empty grid file")
    head = lines[0].split()
    if len(head) != 4:
        raise ValueError(f"{path}: header must be 'nx ny dx dy'")
    nx, ny, dx, dy = int(head[0]), int(head[1]), float(head[2]), float(head[3])
    values = np.array(" ".join(lines[1:]).split(), dtype=float)
    if values.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {values.size}")
    return values.reshape(ny, nx), dx, dy


def write_eigenpairs(path, values, vectors, header=None):
    """Write ``m r``, one line of eigenvalues, then one line per eigenvector."""
    values = check_vector(values, name="values") if len(values) else np.zeros(0)
    vectors = np.asarray(vectors, dtype=float)
    m, r = vectors.shape
    if r != values.shape[0]:
        raise ValueError("one eigenvalue per eigenvector column is required")
    buf = _io.StringIO()
    buf.write(_header_lines(header))
    buf.write(f"{m} {r}\n")
    buf.write(" ".join(_fmt(v) for v in values) + "\n")
    for j in range(r):
        buf.write(" ".join(_fmt(v) for v in vectors[:, j]) + "\n")
    _write(path, buf.getvalue())


def read_eigenpairs(path):
    """Inverse of :func:`write_eigenpairs`; returns ``(values, vectors)``."""
    lines = _data_lines(path)
    m, r = (int(t) for t in lines[0].split())
    if r == 0:
        return np.zeros(0), np.zeros((m, 0))
    values = np.array(lines[1].split(), dtype=float)
    vectors = np.array([ln.split() for ln in lines[2:2 + r]], dtype=float).T
    if values.shape != (r,) or vectors.shape != (m, r):
        raise ValueError(f"{path}: inconsistent eigenpair file")
    return values, vectors


def write_csv(path, columns, rows, header=None):
    """Write a CSV table; floats use full precision, other values ``str``."""
    buf = _io.StringIO()
    buf.write(_header_lines(header))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    _write(path, buf.getvalue())


def read_csv(path):
    """Return ``(columns, rows)`` with every cell as a string."""
    lines = _data_lines(path)
    reader = csv.reader(lines)
    columns = next(reader)
    return columns, [row for row in reader]


def write_manifest(path, entries, header=None):
    """Write ``key=value`` lines."""
    body = "".join(f"{k}={_fmt(v) if isinstance(v, float) else v}\n" for k, v in entries.items())
    _write(path, _header_lines(header) + body)


def read_manifest(path):
    out = {}
    for ln in _data_lines(path):
        key, _, value = ln.strip().partition("=")
        out[key] = value
    return out
