"""Point-cloud file ingestion and export.

Supported formats:
  ply  ASCII and binary_little_endian; vertex properties x,y,z and
       optionally nx,ny,nz are read, anything else is skipped with a warning.
  obj  'v' lines only.
  xyz  whitespace-separated, 3 columns, or 6 with normals.
"""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

from .core import PointCloud
from .errors import EmptyCloud, ParseError

_PLY_TYPES = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}

_WANTED = ("x", "y", "z", "nx", "ny", "nz")


def load_face_set(manifest_path) -> "FaceSet":
    """Corresponded faces from a faces.json manifest: a list of records
    {path, identity, expression}, paths relative to the manifest."""
    import json

    from .core import CorrespondedFace, FaceSet

    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        payload = json.load(fh)
    faces = []
    for rec in payload["faces"]:
        cloud = load_cloud(manifest_path.parent / rec["path"])
        faces.append(CorrespondedFace(cloud=cloud,
                                      identity_id=int(rec["identity"]),
                                      expression_id=int(rec.get("expression", 0))))
    return FaceSet(faces)


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Read a point cloud; `format` defaults to the file extension."""
    path = Path(path)
    if format is None:
        format = path.suffix.lstrip(".").lower()
    if format == "ply":
        points, normals = _read_ply(path)
    elif format == "obj":
        points, normals = _read_obj(path), None
    elif format == "xyz":
        points, normals = _read_xyz(path)
    else:
        raise ParseError(f"unknown format {format!r}")

    if len(points) == 0:
        raise EmptyCloud(f"{path}: no vertices")
    if not np.isfinite(points).all():
        raise ParseError(f"{path}: non-finite coordinates")
    if normals is not None:
        lengths = np.linalg.norm(normals, axis=1)
        if not np.isfinite(normals).all() or np.any(lengths < 1e-12):
            raise ParseError(f"{path}: zero-length or non-finite normal")
        normals = normals / lengths[:, None]
    return PointCloud(points, normals)


def save_cloud(cloud: PointCloud, path, format: str | None = None,
               binary: bool = True) -> None:
    path = Path(path)
    if format is None:
        format = path.suffix.lstrip(".").lower()
    if format == "ply":
        _write_ply(cloud, path, binary=binary)
    elif format == "xyz":
        cols = cloud.points
        if cloud.normals is not None:
            cols = np.hstack([cloud.points, cloud.normals])
        np.savetxt(path, cols, fmt="%.9g")
    else:
        raise ParseError(f"unsupported output format {format!r}")


# --- PLY ----------------------------------------------------------------------


def _read_ply(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"ply"):
        raise ParseError(f"{path}: missing 'ply' magic")
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: truncated header (no end_header)")
    header_end = data.index(b"\n", end) + 1
    header = data[:header_end].decode("ascii", errors="replace").splitlines()
    body = data[header_end:]

    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_count_type|None)])
    for line in header[1:]:
        tok = line.strip().split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"{path}: unsupported format {line.strip()!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"{path}: malformed element line {line!r}")
            try:
                elements.append([tok[1], int(tok[2]), []])
            except ValueError:
                raise ParseError(f"{path}: bad element count in {line!r}") from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before any element")
            if tok[1] == "list":
                if len(tok) != 5:
                    raise ParseError(f"{path}: malformed list property {line!r}")
                elements[-1][2].append((tok[4], tok[3], tok[2]))
            else:
                if len(tok) != 3:
                    raise ParseError(f"{path}: malformed property {line!r}")
                elements[-1][2].append((tok[2], tok[1], None))
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"{path}: unknown header keyword {tok[0]!r}")
    if fmt is None:
        raise ParseError(f"{path}: header has no format line")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError(f"{path}: no vertex element")
    for name, ptype, list_type in vertex[2]:
        if list_type is not None:
            raise ParseError(f"{path}: list-typed vertex property {name!r}")
    ignored = [p[0] for p in vertex[2] if p[0] not in _WANTED]
    if ignored:
        warnings.warn(f"{path}: skipping vertex properties {ignored}")

    if fmt == "ascii":
        table = _read_ply_ascii_vertices(path, body, elements, vertex)
    else:
        table = _read_ply_binary_vertices(path, body, elements, vertex)

    cols = {name: table[:, i]
            for i, (name, _, _) in enumerate(vertex[2]) if name in _WANTED}
    for axis in ("x", "y", "z"):
        if axis not in cols:
            raise ParseError(f"{path}: vertex element lacks property {axis}")
    points = np.column_stack([cols["x"], cols["y"], cols["z"]])
    normals = None
    if all(n in cols for n in ("nx", "ny", "nz")):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
    return points, normals


def _read_ply_ascii_vertices(path, body, elements, vertex):
    lines = body.decode("ascii", errors="replace").splitlines()
    lines = [ln for ln in lines if ln.strip()]
    pos = 0
    for element in elements:
        name, count, props = element
        if pos + count > len(lines):
            raise ParseError(f"{path}: element {name} truncated")
        if element is vertex:
            chunk = lines[pos:pos + count]
            try:
                table = np.array(
                    [[float(v) for v in ln.split()[:len(props)]] for ln in chunk]
                )
            except ValueError as exc:
                raise ParseError(f"{path}: bad vertex line ({exc})") from None
            if table.ndim != 2 or table.shape[1] != len(props):
                raise ParseError(f"{path}: vertex row width mismatch")
            return table
        pos += count
    raise ParseError(f"{path}: vertex element not found in body")


def _read_ply_binary_vertices(path, body, elements, vertex):
    offset = 0
    for element in elements:
        name, count, props = element
        fixed = all(lt is None for _, _, lt in props)
        if element is vertex:
            dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
            if offset + dtype.itemsize * count > len(body):
                raise ParseError(f"{path}: vertex data truncated")
            raw = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            return np.column_stack([raw[p[0]].astype(np.float64) for p in props])
        if fixed:
            fmt = "<" + "".join(_PLY_TYPES[t] for _, t, _ in props)
            offset += struct.calcsize(fmt) * count
        else:
            offset = _skip_binary_lists(path, body, offset, count, props)
        if offset > len(body):
            raise ParseError(f"{path}: element {name} truncated")
    raise ParseError(f"{path}: vertex element not found in body")


def _skip_binary_lists(path, body, offset, count, props):
    for _ in range(count):
        for _, ptype, list_type in props:
            if list_type is None:
                offset += struct.calcsize(_PLY_TYPES[ptype])
            else:
                cfmt = "<" + _PLY_TYPES[list_type]
                csize = struct.calcsize(cfmt)
                if offset + csize > len(body):
                    raise ParseError(f"{path}: truncated list property")
                (n,) = struct.unpack_from(cfmt, body, offset)
                offset += csize + n * struct.calcsize(_PLY_TYPES[ptype])
    return offset


def _write_ply(cloud: PointCloud, path: Path, binary: bool) -> None:
    n = len(cloud)
    has_n = cloud.normals is not None
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header += ["end_header"]
    table = cloud.points
    if has_n:
        table = np.hstack([cloud.points, cloud.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(table.astype("<f4").tobytes())
        else:
            for row in table.astype(np.float32):
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode())


# --- OBJ / XYZ ----------------------------------------------------------------


def _read_obj(path: Path) -> np.ndarray:
    points = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0] != "v":
                continue
            if len(tok) < 4:
                raise ParseError(f"{path}:{lineno}: short vertex line")
            try:
                points.append([float(tok[1]), float(tok[2]), float(tok[3])])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad vertex value") from None
    return np.array(points).reshape(-1, 3)


def _read_xyz(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    rows = []
    width = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) not in (3, 6):
                raise ParseError(f"{path}:{lineno}: expected 3 or 6 columns")
            if width is None:
                width = len(tok)
            elif len(tok) != width:
                raise ParseError(f"{path}:{lineno}: inconsistent column count")
            try:
                rows.append([float(v) for v in tok])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad number") from None
    table = np.array(rows).reshape(-1, width or 3)
    if width == 6:
        return table[:, :3], table[:, 3:]
    return table, None
