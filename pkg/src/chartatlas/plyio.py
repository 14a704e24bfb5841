"""Reading and writing point clouds as .xyz text or PLY (ascii / binary little-endian)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud

log = logging.getLogger(__name__)

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class CloudFormatError(ValueError):
    pass


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list = field(default_factory=list)  # (name, dtype) or (name, (count_dtype, item_dtype))

    @property
    def has_lists(self) -> bool:
        return any(isinstance(t, tuple) for _, t in self.properties)


@dataclass
class PlyHeader:
    format: str
    elements: list
    body_offset: int
    text_lines: int


def _parse_header(raw: bytes, path) -> PlyHeader:
    if not raw.startswith(b"ply"):
        raise CloudFormatError(f"{path}: missing 'ply' magic")
    end = raw.find(b"end_header")
    if end < 0:
        raise CloudFormatError(f"{path}: header has no end_header")
    nl = raw.find(b"\n", end)
    body_offset = len(raw) if nl < 0 else nl + 1
    lines = raw[:body_offset].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[PlyElement] = []
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            if len(tok) < 3:
                raise CloudFormatError(f"{path}:{lineno}: malformed format line")
            fmt = tok[1]
            if fmt == "binary_big_endian":
                raise CloudFormatError(f"{path}: big-endian PLY is not supported; convert to little-endian")
            if fmt not in ("ascii", "binary_little_endian"):
                raise CloudFormatError(f"{path}:{lineno}: unknown PLY format {fmt!r}")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise CloudFormatError(f"{path}:{lineno}: malformed element line {line!r}")
            elements.append(PlyElement(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise CloudFormatError(f"{path}:{lineno}: property before any element")
            try:
                if tok[1] == "list":
                    elements[-1].properties.append((tok[4], (PLY_TYPES[tok[2]], PLY_TYPES[tok[3]])))
                else:
                    elements[-1].properties.append((tok[2], PLY_TYPES[tok[1]]))
            except (KeyError, IndexError):
                raise CloudFormatError(f"{path}:{lineno}: malformed property line {line!r}") from None
        else:
            raise CloudFormatError(f"{path}:{lineno}: unexpected header line {line!r}")
    if fmt is None:
        raise CloudFormatError(f"{path}: header has no format line")
    return PlyHeader(fmt, elements, body_offset, len(lines))


def _read_binary_element(raw, offset, el: PlyElement, path):
    if not el.has_lists:
        dtype = np.dtype([(name, "<" + t) for name, t in el.properties])
        need = offset + dtype.itemsize * el.count
        if need > len(raw):
            raise CloudFormatError(
                f"{path}: element {el.name!r} needs {need - offset} bytes at offset {offset}, "
                f"file has {len(raw) - offset}"
            )
        arr = np.frombuffer(raw, dtype=dtype, count=el.count, offset=offset)
        return {name: arr[name] for name, _ in el.properties}, need
    # fast path for the common triangle list: one uniform-count list per row
    if len(el.properties) == 1:
        name, (ct, it) = el.properties[0]
        first = np.frombuffer(raw, "<" + ct, 1, offset)[0] if offset < len(raw) else 0
        dtype = np.dtype([("n", "<" + ct), ("v", "<" + it, (int(first),))])
        if first > 0 and offset + dtype.itemsize * el.count <= len(raw):
            arr = np.frombuffer(raw, dtype=dtype, count=el.count, offset=offset)
            if np.all(arr["n"] == first):
                return {name: arr["v"].astype(np.int64)}, offset + dtype.itemsize * el.count
    rows = {name: [] for name, _ in el.properties}
    for _ in range(el.count):
        for name, t in el.properties:
            if isinstance(t, tuple):
                ct, it = (np.dtype("<" + x) for x in t)
                if offset + ct.itemsize > len(raw):
                    raise CloudFormatError(f"{path}: truncated list in element {el.name!r} at offset {offset}")
                k = int(np.frombuffer(raw, ct, 1, offset)[0])
                offset += ct.itemsize
                rows[name].append(np.frombuffer(raw, it, k, offset).astype(np.int64))
                offset += it.itemsize * k
            else:
                dt = np.dtype("<" + t)
                if offset + dt.itemsize > len(raw):
                    raise CloudFormatError(f"{path}: truncated element {el.name!r} at offset {offset}")
                rows[name].append(np.frombuffer(raw, dt, 1, offset)[0])
                offset += dt.itemsize
    return rows, offset


def read_ply(path) -> dict:
    """Parse a PLY file into ``{element_name: {property_name: array}}``."""
    raw = Path(path).read_bytes()
    header = _parse_header(raw, path)
    out = {}
    if header.format == "binary_little_endian":
        offset = header.body_offset
        for el in header.elements:
            out[el.name], offset = _read_binary_element(raw, offset, el, path)
        return out
    body = raw[header.body_offset:].decode("ascii", errors="replace").splitlines()
    lineno = 0
    for el in header.elements:
        if lineno + el.count > len(body):
            raise CloudFormatError(
                f"{path}: element {el.name!r} declares {el.count} rows, "
                f"only {len(body) - lineno} lines remain"
            )
        chunk = body[lineno:lineno + el.count]
        if not el.has_lists:
            try:
                arr = np.array([[float(t) for t in ln.split()] for ln in chunk], dtype=np.float64).reshape(
                    el.count, len(el.properties)
                )
            except ValueError as exc:
                raise CloudFormatError(
                    f"{path}: bad row in element {el.name!r} near line {header.text_lines + lineno + 1}: {exc}"
                ) from None
            out[el.name] = {name: arr[:, k] for k, (name, _) in enumerate(el.properties)}
        else:
            rows = {name: [] for name, _ in el.properties}
            for j, ln in enumerate(chunk):
                tok = ln.split()
                pos = 0
                for name, t in el.properties:
                    if isinstance(t, tuple):
                        k = int(tok[pos])
                        rows[name].append(np.array(tok[pos + 1:pos + 1 + k], dtype=np.int64))
                        pos += 1 + k
                    else:
                        rows[name].append(float(tok[pos]))
                        pos += 1
            out[el.name] = rows
        lineno += el.count
    return out


def _cloud_from_columns(cols: dict, path) -> PointCloud:
    for c in ("x", "y", "z"):
        if c not in cols:
            raise CloudFormatError(f"{path}: vertex element has no {c!r} property")
    pts = np.column_stack([np.asarray(cols[c], dtype=np.float64) for c in ("x", "y", "z")])
    bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
    if len(bad):
        raise CloudFormatError(f"{path}: non-finite coordinates at vertex {bad[0]}")
    normals = None
    if all(c in cols for c in ("nx", "ny", "nz")):
        normals = np.column_stack([np.asarray(cols[c], dtype=np.float64) for c in ("nx", "ny", "nz")])
        norms = np.linalg.norm(normals, axis=1)
        bad = np.flatnonzero(~np.isfinite(norms) | (norms == 0))
        if len(bad):
            raise CloudFormatError(f"{path}: invalid normal at vertex {bad[0]}")
        normals = normals / norms[:, None]
    return PointCloud(pts, normals)


def read_xyz(path) -> PointCloud:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) not in (3, 6):
                raise CloudFormatError(f"{path}:{lineno}: expected 3 or 6 values, got {len(tok)}")
            if width is None:
                width = len(tok)
            elif len(tok) != width:
                raise CloudFormatError(f"{path}:{lineno}: expected {width} values, got {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: not a number in {line.strip()!r}") from None
            if not np.all(np.isfinite(vals)):
                raise CloudFormatError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise CloudFormatError(f"{path}: no points")
    arr = np.asarray(rows, dtype=np.float64)
    cols = {"x": arr[:, 0], "y": arr[:, 1], "z": arr[:, 2]}
    if width == 6:
        cols.update(nx=arr[:, 3], ny=arr[:, 4], nz=arr[:, 5])
    return _cloud_from_columns(cols, path)


def read_cloud(path) -> PointCloud:
    """Load a .xyz or .ply point cloud; normals are renormalized when present."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        return read_xyz(path)
    if suffix == ".ply":
        doc = read_ply(path)
        if "vertex" not in doc:
            raise CloudFormatError(f"{path}: no vertex element")
        extra = [name for name in doc if name != "vertex"]
        if extra:
            log.warning("%s: ignoring non-vertex elements %s", path, extra)
        return _cloud_from_columns(doc["vertex"], path)
    raise CloudFormatError(f"{path}: unsupported extension {suffix!r} (expected .xyz or .ply)")


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices ``(V, 3)`` and triangles ``(F, 3)`` from a PLY mesh.

    Polygons with more than three corners are fan-triangulated.
    """
    doc = read_ply(path)
    if "vertex" not in doc or "face" not in doc:
        raise CloudFormatError(f"{path}: a mesh needs vertex and face elements")
    verts = _cloud_from_columns(doc["vertex"], path).points
    faces_prop = doc["face"]
    key = "vertex_indices" if "vertex_indices" in faces_prop else next(iter(faces_prop))
    polys = faces_prop[key]
    if isinstance(polys, np.ndarray) and polys.ndim == 2 and polys.shape[1] == 3:
        tris = polys.astype(np.int64)
    else:
        tris = []
        for poly in polys:
            poly = np.asarray(poly, dtype=np.int64)
            for k in range(1, len(poly) - 1):
                tris.append((poly[0], poly[k], poly[k + 1]))
        tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
        raise CloudFormatError(f"{path}: face index out of range")
    return verts, tris


def _vertex_columns(cloud) -> list[tuple[str, str, np.ndarray]]:
    cols = [(c, "f8", cloud.points[:, k]) for k, c in enumerate("xyz")]
    if getattr(cloud, "normals", None) is not None:
        cols += [(c, "f8", cloud.normals[:, k]) for k, c in enumerate(("nx", "ny", "nz"))]
    uv = getattr(cloud, "uv", None)
    if uv is not None:
        cols += [("u", "f8", uv[:, 0]), ("v", "f8", uv[:, 1])]
    residual = getattr(cloud, "residual", None)
    if residual is not None:
        cols.append(("residual", "f8", residual))
    patch_id = getattr(cloud, "patch_id", None)
    if patch_id is not None:
        cols.append(("patch_id", "i4", patch_id))
    return cols


_PLY_NAMES = {"f8": "double", "i4": "int"}


def write_cloud(cloud, path, binary: bool = True) -> None:
    """Write a PointCloud or DenseSample.

    PLY properties: x y z, then nx ny nz when normals exist; a DenseSample
    adds u v (texture coordinates), residual (its chart's RMS fit error)
    and an int patch_id. Floats are written as doubles so binary files
    round-trip exactly. ``.xyz`` output carries positions and normals only.
    """
    path = Path(path)
    n = len(cloud.points)
    if n == 0:
        raise CloudFormatError(f"{path}: refusing to write an empty cloud")
    if path.suffix.lower() == ".xyz":
        arr = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
        np.savetxt(path, arr, fmt="%.17g")
        return
    if path.suffix.lower() != ".ply":
        raise CloudFormatError(f"{path}: unsupported extension (expected .xyz or .ply)")
    cols = _vertex_columns(cloud)
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
              f"element vertex {n}"]
    header += [f"property {_PLY_NAMES[t]} {name}" for name, t, _ in cols]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            rec = np.empty(n, dtype=[(name, "<" + t) for name, t, _ in cols])
            for name, _, data in cols:
                rec[name] = data
            fh.write(rec.tobytes())
        else:
            fmts = ["%.9g" if t == "f8" else "%d" for _, t, _ in cols]
            table = np.empty((n, len(cols)), dtype=object)
            for k, (_, _, data) in enumerate(cols):
                table[:, k] = data
            lines = (" ".join(f % v for f, v in zip(fmts, row)) for row in table)
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
