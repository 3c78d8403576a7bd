"""Readers and writers for the pipeline's file formats.

Supported formats, deliberately narrow:

* NRRD volumes, 3-D, int16/float32, little-endian, raw or gzip payload,
  non-detached, LPS space. Any header field outside this subset is a
  hard error: readers reject rather than guess.
* STL surface meshes, binary and ASCII, coordinates in mm.
* Slicer markups fiducial CSV (FCSV) v4/v5; only id, x, y, z and label
  are consumed. Coordinates declared RAS are converted to LPS on demand.
"""

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError
from .volgrid import CtVolume, GridGeometry

# mm; STL vertices closer than this collapse to one index
_MERGE_TOL = 1e-9

HU_VALID_RANGE = (-1024.0, 4096.0)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle surface in physical mm."""

    vertices: np.ndarray  # (n, 3) float64
    triangles: np.ndarray  # (m, 3) int64

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        if not np.all(np.isfinite(v)):
            raise FormatError("mesh has non-finite vertex coordinates")
        if len(v) and len(v) < 3:
            raise FormatError(f"non-empty mesh needs at least 3 vertices, got {len(v)}")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise FormatError("triangle references a vertex index outside the vertex table")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def surface_area(self) -> float:
        """Total triangle area in mm^2."""
        if len(self.triangles) == 0:
            return 0.0
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        cross = np.cross(b - a, c - a)
        return float(0.5 * np.sum(np.sqrt(np.sum(cross * cross, axis=1))))


@dataclass(frozen=True, eq=False)
class FiducialSet:
    """Named 3-D points in physical mm, tagged with their anatomical frame."""

    points: tuple  # of (label, (3,) float64)
    frame: str  # "LPS" | "RAS"

    def __post_init__(self):
        if self.frame not in ("LPS", "RAS"):
            raise FormatError(f"unknown coordinate frame {self.frame!r}")
        seen = set()
        norm = []
        for label, pos in self.points:
            p = np.asarray(pos, dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(p)):
                raise FormatError(f"fiducial {label!r} has non-finite coordinates")
            if label in seen:
                raise FormatError(f"duplicate fiducial label {label!r}")
            seen.add(label)
            p.setflags(write=False)
            norm.append((str(label), p))
        object.__setattr__(self, "points", tuple(norm))

    def positions(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 3), dtype=np.float64)
        return np.array([p for _, p in self.points], dtype=np.float64)

    def labels(self) -> list:
        return [l for l, _ in self.points]


def to_lps(f: FiducialSet) -> FiducialSet:
    """Harmonize a fiducial set into LPS (negate x, y of RAS points)."""
    if f.frame == "LPS":
        return f
    flipped = tuple((label, np.array([-p[0], -p[1], p[2]])) for label, p in f.points)
    return FiducialSet(flipped, "LPS")


# ---------------------------------------------------------------------------
# NRRD
# ---------------------------------------------------------------------------

_NRRD_FIELDS = {
    "dimension", "type", "sizes", "encoding", "endian",
    "space", "space origin", "space directions", "kinds",
}
_NRRD_INT16 = {"int16", "short", "signed short", "short int", "int16_t"}
_NRRD_FLOAT32 = {"float", "float32"}
_LPS_NAMES = {"left-posterior-superior", "lps"}


def _parse_nrrd_vector(text: str, line: str) -> np.ndarray:
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise FormatError(f"malformed NRRD vector in header line {line!r}")
    try:
        return np.array([float(x) for x in text[1:-1].split(",")], dtype=np.float64)
    except ValueError:
        raise FormatError(f"malformed NRRD vector in header line {line!r}") from None


def read_nrrd(path, hu_range=HU_VALID_RANGE) -> CtVolume:
    """Read a 3-D scalar volume from the supported NRRD subset.

    ``hu_range`` bounds the loaded values (pass None to skip the check).
    """
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0 or not raw[:newline].rstrip(b"\r").startswith(b"NRRD"):
        raise FormatError(f"{path}: not an NRRD file (missing magic)")

    fields = {}
    pos = newline + 1
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: header not terminated by a blank line")
        line = raw[pos:end].rstrip(b"\r")
        pos = end + 1
        if line == b"":
            break  # payload starts here
        if line.startswith(b"#"):
            continue
        try:
            text = line.decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: non-ASCII header line {line!r}") from None
        if ":" not in text:
            raise FormatError(f"{path}: malformed header line {text!r}")
        key, value = text.split(":", 1)
        key = key.strip().lower()
        value = value.strip()
        if key not in _NRRD_FIELDS:
            raise FormatError(f"{path}: unsupported header field in line {text!r}")
        fields[key] = (value, text)

    def need(key: str) -> str:
        if key not in fields:
            raise FormatError(f"{path}: missing required NRRD field {key!r}")
        return fields[key][0]

    dim_value, dim_line = fields.get("dimension", ("", "dimension: <absent>"))
    if dim_value.strip() != "3":
        raise FormatError(f"{path}: unsupported dimension in header line {dim_line!r}")

    type_value, type_line = fields.get("type", ("", "type: <absent>"))
    tname = type_value.strip().lower()
    if tname in _NRRD_INT16:
        dtype = np.dtype("<i2")
    elif tname in _NRRD_FLOAT32:
        dtype = np.dtype("<f4")
    else:
        raise FormatError(f"{path}: unsupported type in header line {type_line!r}")

    enc_value, enc_line = fields.get("encoding", ("", "encoding: <absent>"))
    encoding = enc_value.strip().lower()
    if encoding not in ("raw", "gzip", "gz"):
        raise FormatError(f"{path}: unsupported encoding in header line {enc_line!r}")

    endian_value, endian_line = fields.get("endian", ("", "endian: <absent>"))
    if endian_value.strip().lower() != "little":
        raise FormatError(f"{path}: unsupported endianness in header line {endian_line!r}")

    if "space" in fields:
        space_value, space_line = fields["space"]
        if space_value.strip().lower() not in _LPS_NAMES:
            raise FormatError(f"{path}: unsupported space in header line {space_line!r}")
    if "kinds" in fields:
        kinds_value, kinds_line = fields["kinds"]
        if kinds_value.strip().lower().split() != ["domain", "domain", "domain"]:
            raise FormatError(f"{path}: unsupported kinds in header line {kinds_line!r}")

    try:
        sizes = [int(x) for x in need("sizes").split()]
    except ValueError:
        raise FormatError(f"{path}: malformed sizes in header line {fields['sizes'][1]!r}") from None
    if len(sizes) != 3 or any(s <= 0 for s in sizes):
        raise FormatError(f"{path}: sizes must be three positive integers, got {sizes}")

    origin = _parse_nrrd_vector(need("space origin"), fields["space origin"][1])
    if origin.size != 3:
        raise FormatError(f"{path}: space origin must have 3 components")

    dir_text = need("space directions")
    cols = []
    for chunk in dir_text.split(")"):
        chunk = chunk.strip()
        if not chunk:
            continue
        cols.append(_parse_nrrd_vector(chunk + ")", fields["space directions"][1]))
    if len(cols) != 3 or any(c.size != 3 for c in cols):
        raise FormatError(f"{path}: space directions must be three 3-vectors")
    # column j of the direction matrix is the physical step per index j
    step = np.stack(cols, axis=1)
    spacing = np.sqrt(np.sum(step * step, axis=0))
    if np.any(spacing <= 0):
        raise GeometryError(f"{path}: degenerate space direction (zero length)")
    direction = step / spacing
    gram = direction.T @ direction
    if not np.allclose(gram, np.eye(3), rtol=0.0, atol=1e-6):
        raise GeometryError(f"{path}: space directions are not orthogonal (tolerance 1e-6)")
    if not np.allclose(gram, np.eye(3), rtol=0.0, atol=1e-9):
        # within the documented 1e-6 but beyond the geometry invariant:
        # snap to the nearest orthonormal matrix (polar factor)
        u, _, vt = np.linalg.svd(direction)
        direction = u @ vt

    payload = raw[pos:]
    if encoding in ("gzip", "gz"):
        try:
            payload = gzip.decompress(payload)
        except OSError as exc:
            raise FormatError(f"{path}: corrupt gzip payload ({exc})") from exc
    expected = sizes[0] * sizes[1] * sizes[2] * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")

    # NRRD raster order: first axis fastest
    flat = np.frombuffer(payload, dtype=dtype)
    values = np.ascontiguousarray(flat.reshape(sizes, order="F"))
    if hu_range is not None:
        lo, hi = hu_range
        vmin, vmax = float(values.min()), float(values.max())
        if vmin < lo or vmax > hi:
            raise FormatError(f"{path}: values [{vmin}, {vmax}] outside valid HU range [{lo}, {hi}]")

    geom = GridGeometry(origin=origin, spacing=spacing, direction=direction, dims=sizes)
    return CtVolume(geom, values.astype(dtype.newbyteorder("="), copy=False))


def write_nrrd(vol: CtVolume, path, encoding: str = "gzip") -> None:
    """Write a volume in the supported NRRD subset.

    Round trip is bit-exact for values; geometry survives to better than
    1e-12 (floats are printed with shortest-repr precision). Output is
    byte-reproducible: no timestamps, gzip mtime pinned to 0.
    """
    if encoding not in ("raw", "gzip"):
        raise FormatError(f"unsupported NRRD encoding {encoding!r}")
    geom = vol.geometry
    if vol.values.dtype == np.int16:
        tname, dtype = "short", np.dtype("<i2")
    elif vol.values.dtype == np.int32:
        tname, dtype = "int", np.dtype("<i4")
    else:
        tname, dtype = "float", np.dtype("<f4")
    if tname == "int":
        # int32 volumes exist only in memory; the file subset is int16/float32
        if np.all(vol.values >= -(2 ** 15)) and np.all(vol.values < 2 ** 15):
            tname, dtype = "short", np.dtype("<i2")
        else:
            raise FormatError("int32 volume does not fit the int16 file subset")

    step = geom.direction * geom.spacing  # column j scaled by spacing j
    def vec(v):
        return "(" + ",".join(repr(float(x)) for x in v) + ")"

    header = (
        "NRRD0004\n"
        f"type: {tname}\n"
        "dimension: 3\n"
        "space: left-posterior-superior\n"
        f"sizes: {geom.dims[0]} {geom.dims[1]} {geom.dims[2]}\n"
        f"space directions: {vec(step[:, 0])} {vec(step[:, 1])} {vec(step[:, 2])}\n"
        "kinds: domain domain domain\n"
        "endian: little\n"
        f"encoding: {encoding}\n"
        f"space origin: {vec(geom.origin)}\n"
        "\n"
    )
    payload = np.asfortranarray(vol.values.astype(dtype, copy=False)).tobytes(order="F")
    if encoding == "gzip":
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    Path(path).write_bytes(header.encode("ascii") + payload)


# ---------------------------------------------------------------------------
# STL
# ---------------------------------------------------------------------------


def _merge_vertices(tri_vertices: np.ndarray) -> TriMesh:
    """Collapse duplicate corners (within 1e-9 mm) into shared indices."""
    flat = tri_vertices.reshape(-1, 3)
    if len(flat) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    keys = np.round(flat / _MERGE_TOL).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # keep first-seen coordinates so merging never moves a vertex
    order = np.argsort(first, kind="stable")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    vertices = flat[first[order]]
    triangles = rank[inverse].reshape(-1, 3)
    return TriMesh(vertices, triangles)


def _read_stl_ascii(text: str, path) -> TriMesh:
    tokens = []  # (line_number, [words])
    for n, line in enumerate(text.splitlines(), start=1):
        words = line.split()
        if words:
            tokens.append((n, words))
    if not tokens or tokens[0][1][0] != "solid":
        raise FormatError(f"{path}: line 1: expected 'solid'")
    i = 1
    tris = []

    def expect(keywords):
        nonlocal i
        if i >= len(tokens):
            raise FormatError(f"{path}: unexpected end of file, expected {' '.join(keywords)!r}")
        n, words = tokens[i]
        if words[: len(keywords)] != list(keywords):
            raise FormatError(f"{path}: line {n}: expected {' '.join(keywords)!r}, got {' '.join(words)!r}")
        i += 1
        return n, words

    while i < len(tokens):
        n, words = tokens[i]
        if words[0] == "endsolid":
            i += 1
            break
        n, words = expect(("facet", "normal"))
        if len(words) != 5:
            raise FormatError(f"{path}: line {n}: facet normal needs 3 components")
        expect(("outer", "loop"))
        corners = []
        for _ in range(3):
            n, words = expect(("vertex",))
            if len(words) != 4:
                raise FormatError(f"{path}: line {n}: vertex needs 3 coordinates")
            try:
                corners.append([float(w) for w in words[1:4]])
            except ValueError:
                raise FormatError(f"{path}: line {n}: non-numeric vertex coordinate") from None
        expect(("endloop",))
        expect(("endfacet",))
        tris.append(corners)
    else:
        raise FormatError(f"{path}: missing 'endsolid'")
    return _merge_vertices(np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3))


def _read_stl_binary(raw: bytes, path) -> TriMesh:
    if len(raw) < 84:
        raise FormatError(f"{path}: binary STL truncated at byte {len(raw)} (header needs 84)")
    (count,) = struct.unpack_from("<I", raw, 80)
    expected = 84 + 50 * count
    if len(raw) < expected:
        # report where the record stream breaks off
        complete = (len(raw) - 84) // 50
        offset = 84 + 50 * complete
        raise FormatError(
            f"{path}: binary STL claims {count} triangles but data ends at byte {len(raw)} "
            f"(truncated record at byte {offset})"
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after byte {expected}")
    rec = np.frombuffer(raw, dtype=np.dtype("(12,)<f4, <u2"), count=count, offset=84)
    tri_vertices = rec["f0"].reshape(-1, 4, 3)[:, 1:, :].astype(np.float64)
    return _merge_vertices(tri_vertices)


def read_stl(path) -> TriMesh:
    """Read a binary or ASCII STL mesh, merging duplicate vertices."""
    raw = Path(path).read_bytes()
    if raw[:5] == b"solid" and b"\x00" not in raw[:1024]:
        head = raw[:4096].decode("ascii", errors="ignore")
        if "facet" in head or "endsolid" in head:
            return _read_stl_ascii(raw.decode("ascii", errors="replace"), path)
    return _read_stl_binary(raw, path)


def write_stl(mesh: TriMesh, path) -> None:
    """Write a binary STL (deterministic: fixed header, zero attributes)."""
    count = len(mesh.triangles)
    rec = np.zeros(count, dtype=np.dtype("(12,)<f4, <u2"))
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.sqrt(np.sum(n * n, axis=1, keepdims=True))
    with np.errstate(invalid="ignore"):
        n = np.where(norm > 0, n / np.where(norm == 0, 1.0, norm), 0.0)
    quad = np.stack([n, a, b, c], axis=1).astype("<f4")
    rec["f0"] = quad.reshape(count, 12)
    header = b"vict surface mesh".ljust(80, b"\x00")
    Path(path).write_bytes(header + struct.pack("<I", count) + rec.tobytes())


# ---------------------------------------------------------------------------
# FCSV
# ---------------------------------------------------------------------------


def read_fcsv(path, default_frame: str = "RAS") -> FiducialSet:
    """Read a Slicer markups fiducial file.

    The frame comes from the ``# CoordinateSystem`` header line;
    ``default_frame`` applies when the file does not declare one (Slicer
    historically wrote RAS).
    """
    frame = None
    points = []
    with open(path, "r", newline="") as fh:
        rows = list(csv.reader(fh))
    for rownum, row in enumerate(rows, start=1):
        if not row:
            continue
        if row[0].lstrip().startswith("#"):
            text = ",".join(row)
            if "CoordinateSystem" in text:
                value = text.split("=", 1)[1].strip() if "=" in text else ""
                if value.upper() not in ("RAS", "LPS"):
                    raise FormatError(f"{path}: row {rownum}: unsupported CoordinateSystem {value!r}")
                frame = value.upper()
            continue
        if len(row) < 4:
            raise FormatError(f"{path}: row {rownum}: expected at least id,x,y,z")
        try:
            xyz = [float(row[1]), float(row[2]), float(row[3])]
        except ValueError:
            raise FormatError(f"{path}: row {rownum}: non-numeric coordinate") from None
        label = row[11].strip() if len(row) > 11 and row[11].strip() else row[0].strip()
        points.append((label, xyz))
    try:
        return FiducialSet(tuple(points), frame or default_frame)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
