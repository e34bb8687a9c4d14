"""Minimal PLY reader/writer for vertex elements (ASCII and binary little-endian)."""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int",
          "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise PlyError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        raw = f.readline()
        if not raw:
            raise PlyError("header ended before end_header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "format":
            if len(parts) < 2:
                raise PlyError("malformed format line")
            fmt = parts[1]
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"malformed element line: {raw!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise PlyError("property before any element")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise PlyError(f"malformed list property: {raw!r}")
                elements[-1][2].append((parts[4], "list:" + parts[2] + ":" + parts[3]))
            else:
                if len(parts) != 3 or parts[1] not in _TYPES:
                    raise PlyError(f"malformed property line: {raw!r}")
                elements[-1][2].append((parts[2], _TYPES[parts[1]]))
        elif key == "end_header":
            break
        else:
            raise PlyError(f"unexpected header keyword {key!r}")
    if fmt is None:
        raise PlyError("missing format line")
    if fmt == "binary_big_endian":
        raise PlyError("binary_big_endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unknown PLY format {fmt!r}")
    return fmt, elements


def read_ply_vertices(path) -> dict[str, np.ndarray]:
    """Read the ``vertex`` element into a ``name -> array`` mapping."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        body = f.read()
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise PlyError("PLY has no vertex element")
    if names[0] != "vertex":
        raise PlyError("vertex must be the first element")
    _, count, props = elements[0]
    if any(t.startswith("list:") for _, t in props):
        raise PlyError("list properties on vertices are not supported")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        need = dtype.itemsize * count
        if len(body) < need:
            raise PlyError(f"truncated body: expected {need} bytes of vertex data, found {len(body)}")
        data = np.frombuffer(body, dtype=dtype, count=count)
        return {n: np.array(data[n]) for n, _ in props}

    lines = body.decode("ascii", errors="replace").splitlines()
    rows = [ln.split() for ln in lines if ln.strip()]
    if len(rows) < count:
        raise PlyError(f"truncated body: expected {count} vertex rows, found {len(rows)}")
    out = {}
    try:
        table = np.array(rows[:count], dtype=float) if count else np.zeros((0, len(props)))
    except ValueError as exc:
        raise PlyError(f"malformed vertex row: {exc}") from None
    if table.ndim != 2 or table.shape[1] != len(props):
        raise PlyError(f"vertex rows must have {len(props)} values")
    for j, (n, t) in enumerate(props):
        out[n] = table[:, j].astype(t)
    return out


def write_ply_vertices(path, columns: Mapping[str, np.ndarray], binary: bool = True, comments=()):
    """Write columns as one vertex element; column dtypes map to PLY types."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    count = len(arrays[0]) if arrays else 0
    for n, a in zip(names, arrays):
        if a.shape != (count,):
            raise ValueError(f"column {n!r} has shape {a.shape}, expected ({count},)")
    kinds = []
    for n, a in zip(names, arrays):
        code = a.dtype.str[1:]
        if code == "b1":
            code = "u1"
        if code not in _NAMES:
            code = "f8" if a.dtype.kind == "f" else "i4"
        kinds.append(code)
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {count}")
    header += [f"property {_NAMES[k]} {n}" for n, k in zip(names, kinds)]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(count, dtype=[(n, "<" + k) for n, k in zip(names, kinds)])
            for n, a in zip(names, arrays):
                rec[n] = a
            f.write(rec.tobytes())
        else:
            for i in range(count):
                vals = []
                for a, k in zip(arrays, kinds):
                    v = a[i]
                    vals.append(repr(float(v)) if k.startswith("f") else str(int(v)))
                f.write((" ".join(vals) + "\n").encode("ascii"))
