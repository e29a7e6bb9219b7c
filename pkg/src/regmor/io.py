"""Plain-text persistence formats.

All writers emit 17 significant digits (lossless for doubles) and write
through a temp-file-then-rename so partially written artifacts never
appear. Format magics: ``regmor-mesh v1``, ``regmor-field v1``,
``regmor-grid v1``, ``regmor-map v1``.
"""

import hashlib
import io as _io
import os
import tempfile

import numpy as np

from .mesh import Mesh
from .mapspace import MappingSpace
from .registration import ParametricMapModel
from .sensors import GridField

__all__ = [
    "atomic_write",
    "sha256_file",
    "write_mesh",
    "read_mesh",
    "write_field",
    "read_field",
    "write_grid",
    "read_grid",
    "write_map_model",
    "read_map_model",
    "FormatError",
]

_FMT = "%.17g"


class FormatError(ValueError):
    pass


def atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _expect(line, magic):
    if line.strip() != magic:
        raise FormatError(f"expected {magic!r}, found {line.strip()!r}")


def _fmt_row(vals):
    return " ".join(_FMT % v for v in vals)


def write_mesh(path, mesh):
    buf = _io.StringIO()
    buf.write("regmor-mesh v1\n")
    buf.write(f"{mesh.p} 2 {mesh.n_vertices} {mesh.n_elements}\n")
    for xy in mesh.vertices:
        buf.write(_fmt_row(xy) + "\n")
    for row in mesh.conn:
        buf.write(" ".join(str(int(i)) for i in row) + "\n")
    for (k, f), tag in sorted(mesh.boundary_tags.items()):
        buf.write(f"{k} {f} {tag}\n")
    atomic_write(path, buf.getvalue())
    return sha256_file(path)


def read_mesh(path):
    with open(path) as f:
        lines = f.read().split("\n")
    _expect(lines[0], "regmor-mesh v1")
    p, dim, nv, ne = (int(t) for t in lines[1].split())
    if dim != 2:
        raise FormatError("only 2D meshes supported")
    pos = 2
    verts = np.loadtxt(_io.StringIO("\n".join(lines[pos:pos + nv])), ndmin=2)
    pos += nv
    conn = np.loadtxt(
        _io.StringIO("\n".join(lines[pos:pos + ne])), dtype=np.int64, ndmin=2
    )
    pos += ne
    tags = {}
    for line in lines[pos:]:
        if not line.strip():
            continue
        k, f, tag = line.split()
        tags[(int(k), int(f))] = tag
    return Mesh(p, verts, conn, tags)


def write_field(path, vec, mu, mesh_checksum):
    vec = np.asarray(vec, float).reshape(-1)
    buf = _io.StringIO()
    buf.write("regmor-field v1\n")
    buf.write(f"mesh {mesh_checksum}\n")
    buf.write("mu " + _fmt_row(np.asarray(mu, float)[:2]) + "\n")
    buf.write(f"n {len(vec)}\n")
    for v in vec:
        buf.write(_FMT % v + "\n")
    atomic_write(path, buf.getvalue())


def read_field(path):
    with open(path) as f:
        lines = f.read().split("\n")
    _expect(lines[0], "regmor-field v1")
    checksum = lines[1].split()[1]
    mu = np.array([float(t) for t in lines[2].split()[1:3]])
    n = int(lines[3].split()[1])
    vec = np.loadtxt(_io.StringIO("\n".join(lines[4:4 + n])))
    if vec.size != n:
        raise FormatError(f"field length mismatch: header {n}, data {vec.size}")
    return vec, mu, checksum


def write_grid(path, field):
    values = field.values if isinstance(field, GridField) else np.asarray(field, float)
    buf = _io.StringIO()
    buf.write("regmor-grid v1\n")
    buf.write(f"{values.shape[0]} {values.shape[1]}\n")
    for v in values.ravel():
        buf.write(_FMT % v + "\n")
    atomic_write(path, buf.getvalue())


def read_grid(path):
    with open(path) as f:
        lines = f.read().split("\n")
    _expect(lines[0], "regmor-grid v1")
    nx, ny = (int(t) for t in lines[1].split())
    vals = np.loadtxt(_io.StringIO("\n".join(lines[2:2 + nx * ny])))
    return GridField(vals.reshape(nx, ny))


def write_map_model(path, model):
    """Persist mapping modes (raw polynomial coefficients) and the
    per-training-parameter coefficient records."""
    sp = model.space
    buf = _io.StringIO()
    buf.write("regmor-map v1\n")
    buf.write(f"J {sp.J} M {sp.dim} rmin {_FMT % model.r_min}\n")
    for m in range(sp.dim):
        buf.write(f"mode {m}\n")
        for v in sp.modes[m].ravel():
            buf.write(_FMT % v + "\n")
    buf.write(f"ntrain {len(model.mus)}\n")
    for mu, a in zip(model.mus, model.coeffs):
        buf.write("mu " + _fmt_row(mu) + " a " + _fmt_row(a) + "\n")
    atomic_write(path, buf.getvalue())


def read_map_model(path):
    with open(path) as f:
        lines = f.read().split("\n")
    _expect(lines[0], "regmor-map v1")
    hdr = lines[1].split()
    J, M, rmin = int(hdr[1]), int(hdr[3]), float(hdr[5])
    n1 = J + 1
    block = 2 * n1 * n1
    pos = 2
    modes = np.empty((M, 2, n1, n1))
    for m in range(M):
        if not lines[pos].startswith("mode"):
            raise FormatError("missing mode header")
        pos += 1
        vals = np.array([float(v) for v in lines[pos:pos + block]])
        modes[m] = vals.reshape(2, n1, n1)
        pos += block
    ntrain = int(lines[pos].split()[1])
    pos += 1
    mus = np.empty((ntrain, 2))
    coeffs = np.empty((ntrain, M))
    for k in range(ntrain):
        toks = lines[pos + k].split()
        mus[k] = [float(toks[1]), float(toks[2])]
        coeffs[k] = [float(t) for t in toks[4:4 + M]]
    space = MappingSpace(J, modes)
    return ParametricMapModel(space, mus, coeffs, rmin)
