"""Triangle mesh files: Wavefront OBJ and PLY (ASCII and binary little-endian)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InvalidArgumentError, MeshFormatError

FORMATS = ("obj", "ply")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}  # fmt: skip


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidArgumentError(f"vertices must be (N, 3), got {v.shape}")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise InvalidArgumentError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidArgumentError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if labels.shape != (v.shape[0],):
                raise InvalidArgumentError("labels must have one entry per vertex")
            object.__setattr__(self, "labels", labels)


def _format(path, fmt) -> str:
    fmt = fmt or Path(path).suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise InvalidArgumentError(f"unknown mesh format {fmt!r}; expected one of {FORMATS}")
    return fmt


def read_mesh(path, fmt: str | None = None) -> TriangleMesh:
    """Read an OBJ or PLY file; the format defaults to the file suffix."""
    fmt = _format(path, fmt)
    data = Path(path).read_bytes()
    return parse_obj(data) if fmt == "obj" else parse_ply(data)


def write_mesh(path, mesh: TriangleMesh, fmt: str | None = None, binary: bool = True) -> None:
    fmt = _format(path, fmt)
    data = format_obj(mesh) if fmt == "obj" else format_ply(mesh, binary=binary)
    Path(path).write_bytes(data)


# -- OBJ --------------------------------------------------------------------------


def _checked_faces(faces, n, where) -> np.ndarray:
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    for i, face in enumerate(f):
        if face.min() < 0 or face.max() >= n:
            raise MeshFormatError("face index out of range", **where(i))
        if len(set(face.tolist())) < 3:
            raise MeshFormatError("degenerate face (repeated vertex index)", **where(i))
    return f


def parse_obj(data: bytes) -> TriangleMesh:
    """Positions and faces of an OBJ file; texture/normal indices and other records are ignored.

    Polygons with more than three corners are split into a triangle fan.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MeshFormatError("OBJ file is not UTF-8 text", offset=exc.start) from exc
    vertices, faces, face_lines = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split("#", 1)[0].split()
        if not fields:
            continue
        tag = fields[0]
        if tag == "v":
            if len(fields) not in (4, 5, 7):
                raise MeshFormatError("vertex needs 3 coordinates", line=lineno)
            try:
                vertices.append([float(x) for x in fields[1:4]])
            except ValueError as exc:
                raise MeshFormatError(f"bad vertex coordinate: {exc}", line=lineno) from exc
        elif tag == "f":
            if len(fields) < 4:
                raise MeshFormatError("face needs at least 3 corners", line=lineno)
            corners = []
            for token in fields[1:]:
                head = token.split("/", 1)[0]
                try:
                    idx = int(head)
                except ValueError as exc:
                    raise MeshFormatError(f"bad face index {token!r}", line=lineno) from exc
                if idx == 0:
                    raise MeshFormatError("OBJ indices are 1-based; got 0", line=lineno)
                corners.append(idx - 1 if idx > 0 else len(vertices) + idx)
            for i in range(1, len(corners) - 1):
                faces.append((corners[0], corners[i], corners[i + 1]))
                face_lines.append(lineno)
    n = len(vertices)
    f = _checked_faces(faces, n, lambda i: {"line": face_lines[i]})
    return TriangleMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), f)


def format_obj(mesh: TriangleMesh) -> bytes:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return ("\n".join(lines) + "\n").encode("utf-8")


# -- PLY --------------------------------------------------------------------------


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("not a PLY file (missing 'ply' magic or 'end_header')", line=1)
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields or fields[0] in ("ply", "comment", "obj_info"):
            continue
        if fields[0] == "format":
            if len(fields) != 3 or fields[1] not in ("ascii", "binary_little_endian"):
                raise MeshFormatError(f"unsupported PLY format {' '.join(fields[1:])!r}", line=lineno)
            fmt = fields[1]
        elif fields[0] == "element":
            if len(fields) != 3 or not fields[2].isdigit():
                raise MeshFormatError("malformed element line", line=lineno)
            elements.append((fields[1], int(fields[2]), []))
        elif fields[0] == "property":
            if not elements:
                raise MeshFormatError("property before any element", line=lineno)
            if len(fields) == 5 and fields[1] == "list":
                if fields[2] not in _PLY_TYPES or fields[3] not in _PLY_TYPES:
                    raise MeshFormatError("unknown list property type", line=lineno)
                elements[-1][2].append((fields[4], _PLY_TYPES[fields[2]], _PLY_TYPES[fields[3]]))
            elif len(fields) == 3 and fields[1] in _PLY_TYPES:
                elements[-1][2].append((fields[2], _PLY_TYPES[fields[1]], None))
            else:
                raise MeshFormatError("malformed property line", line=lineno)
        else:
            raise MeshFormatError(f"unknown header keyword {fields[0]!r}", line=lineno)
    if fmt is None:
        raise MeshFormatError("PLY header lacks a format line", line=1)
    return fmt, elements, body_start, len(lines) + 2


def _mesh_from_elements(values: dict, where) -> TriangleMesh:
    if "vertex" not in values:
        raise MeshFormatError("PLY file has no vertex element")
    vert = values["vertex"]
    for axis in ("x", "y", "z"):
        if axis not in vert:
            raise MeshFormatError(f"vertex element lacks property {axis!r}")
    vertices = np.stack([np.asarray(vert[a], dtype=np.float64) for a in ("x", "y", "z")], axis=1)
    labels = np.asarray(vert["label"], dtype=np.int64) if "label" in vert else None
    faces = []
    face_rows = []
    face = values.get("face", {})
    lists = face.get("vertex_indices", face.get("vertex_index", []))
    for row, corners in enumerate(lists):
        if len(corners) < 3:
            raise MeshFormatError("face needs at least 3 corners", **where(row))
        for i in range(1, len(corners) - 1):
            faces.append((corners[0], corners[i], corners[i + 1]))
            face_rows.append(row)
    f = _checked_faces(faces, vertices.shape[0], lambda i: where(face_rows[i]))
    return TriangleMesh(vertices, f, labels)


def parse_ply(data: bytes) -> TriangleMesh:
    fmt, elements, pos, first_line = _parse_ply_header(data)
    values: dict[str, dict[str, list]] = {}
    if fmt == "ascii":
        lines = data[pos:].decode("ascii", errors="replace").splitlines()
        cursor = 0
        row_lines: dict[str, list[int]] = {}
        for name, count, props in elements:
            cols = {p[0]: [] for p in props}
            row_lines[name] = []
            for _ in range(count):
                while cursor < len(lines) and not lines[cursor].strip():
                    cursor += 1
                if cursor >= len(lines):
                    raise MeshFormatError(f"file ends inside element {name!r}", line=first_line + cursor)
                lineno = first_line + cursor
                tokens = lines[cursor].split()
                cursor += 1
                t = 0
                try:
                    for pname, ptype, itype in props:
                        if itype is None:
                            cols[pname].append(float(tokens[t]) if ptype[0] == "f" else int(tokens[t]))
                            t += 1
                        else:
                            m = int(tokens[t])
                            cols[pname].append([int(x) for x in tokens[t + 1 : t + 1 + m]])
                            if len(cols[pname][-1]) != m:
                                raise IndexError
                            t += 1 + m
                except (IndexError, ValueError) as exc:
                    raise MeshFormatError(f"malformed {name} record", line=lineno) from exc
                if t != len(tokens):
                    raise MeshFormatError(f"trailing values in {name} record", line=lineno)
                row_lines[name].append(lineno)
            values[name] = cols
        return _mesh_from_elements(values, lambda r: {"line": row_lines["face"][r]})

    offsets: dict[str, list[int]] = {}
    for name, count, props in elements:
        offsets[name] = []
        if all(p[2] is None for p in props):
            dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
            size = dtype.itemsize * count
            if pos + size > len(data):
                raise MeshFormatError(f"file ends inside element {name!r}", offset=len(data))
            table = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            offsets[name] = [pos + i * dtype.itemsize for i in range(count)] if name == "face" else []
            values[name] = {p[0]: table[p[0]] for p in props}
            pos += size
            continue
        cols = {p[0]: [] for p in props}
        for _ in range(count):
            offsets[name].append(pos)
            for pname, ptype, itype in props:
                if itype is None:
                    dt = np.dtype("<" + ptype)
                    if pos + dt.itemsize > len(data):
                        raise MeshFormatError(f"file ends inside element {name!r}", offset=pos)
                    cols[pname].append(np.frombuffer(data, dt, 1, pos)[0])
                    pos += dt.itemsize
                else:
                    ct, it = np.dtype("<" + ptype), np.dtype("<" + itype)
                    if pos + ct.itemsize > len(data):
                        raise MeshFormatError(f"file ends inside element {name!r}", offset=pos)
                    m = int(np.frombuffer(data, ct, 1, pos)[0])
                    pos += ct.itemsize
                    if pos + m * it.itemsize > len(data):
                        raise MeshFormatError(f"file ends inside element {name!r}", offset=pos)
                    cols[pname].append(np.frombuffer(data, it, m, pos).astype(np.int64).tolist())
                    pos += m * it.itemsize
        values[name] = cols
    return _mesh_from_elements(values, lambda r: {"offset": offsets["face"][r]})


def format_ply(mesh: TriangleMesh, binary: bool = True) -> bytes:
    n, f = mesh.vertices.shape[0], mesh.faces.shape[0]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header += [f"element vertex {n}", "property double x", "property double y", "property double z"]
    if mesh.labels is not None:
        header.append("property int label")
    header += [f"element face {f}", "property list uchar int vertex_indices", "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")
    if not binary:
        rows = []
        for i, (x, y, z) in enumerate(mesh.vertices.tolist()):
            rows.append(f"{x!r} {y!r} {z!r}" + (f" {mesh.labels[i]}" if mesh.labels is not None else ""))
        rows += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
        return head + ("\n".join(rows) + "\n").encode("ascii")
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if mesh.labels is not None:
        fields.append(("label", "<i4"))
    vert = np.zeros(n, dtype=np.dtype(fields))
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T
    if mesh.labels is not None:
        vert["label"] = mesh.labels
    face = np.zeros(f, dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
    face["n"] = 3
    face["idx"] = mesh.faces
    return head + vert.tobytes() + face.tobytes()
