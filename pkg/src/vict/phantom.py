"""Synthetic ground-truth factory for exercising the full pipeline.

A phantom is a uniform tissue block with air cavities carved into it, a
sequence of cumulative resections producing per-interval ground-truth
volumes, and for each interval a voxel-face ("cuberille") surface mesh
of the cavity plus a camera fiducial placed at the deepest interior
point. Landmark files are emitted in both the true frame and an
optionally perturbed frame so the registration stage has real work to
do. Generation is deterministic: the same spec always produces
bit-identical volumes, meshes and files.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, GeometryError
from .geomio import FiducialSet, TriMesh, write_stl
from .register import RigidTransform, apply_transform
from .volgrid import CtVolume, GridGeometry, continuous_index_to_physical
from . import rayvox, update, metrics

DEFAULT_TISSUE_HU = 700
DEFAULT_BACKGROUND_HU = -1000

_6CONN = ndimage.generate_binary_structure(3, 1)

CAMERA_LABEL = "camera"


@dataclass(frozen=True)
class Shape:
    """Sphere, ellipsoid or box; center and radii (half-sizes) in mm."""

    kind: str
    center: tuple
    radii: tuple

    def __post_init__(self):
        if self.kind not in ("sphere", "ellipsoid", "box"):
            raise FormatError(f"unknown shape kind {self.kind!r}")
        center = tuple(float(c) for c in self.center)
        radii = tuple(float(r) for r in self.radii)
        if len(center) != 3 or len(radii) != 3:
            raise FormatError("shape center and radii must have 3 components")
        if any(r <= 0 for r in radii):
            raise FormatError(f"shape radii must be positive, got {radii}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radii", radii)

    def contains(self, x, y, z):
        """Membership of broadcastable physical coordinates."""
        cx, cy, cz = self.center
        rx, ry, rz = self.radii
        if self.kind == "box":
            return (np.abs(x - cx) <= rx) & (np.abs(y - cy) <= ry) & (np.abs(z - cz) <= rz)
        return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        kind = d.get("type", "")
        if "radius" in d:
            radii = (d["radius"],) * 3
        else:
            radii = tuple(d.get("radii", ()))
        return cls(kind=kind, center=tuple(d.get("center", ())), radii=radii)

    def to_dict(self) -> dict:
        return {"type": self.kind, "center": list(self.center), "radii": list(self.radii)}


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to generate one phantom case."""

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    tissue_hu: int = DEFAULT_TISSUE_HU
    background_hu: int = DEFAULT_BACKGROUND_HU
    cavities: tuple = ()
    resections: tuple = ()  # one shape list per interval
    seed: int = 0
    perturb: RigidTransform | None = None
    visible_faces_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "cavities", tuple(self.cavities))
        object.__setattr__(self, "resections", tuple(tuple(iv) for iv in self.resections))
        if any(d <= 0 for d in self.dims) or any(s <= 0 for s in self.spacing):
            raise FormatError("phantom dims and spacing must be positive")
        if self.background_hu >= self.tissue_hu:
            raise FormatError("background_hu must be below tissue_hu")
        for shape in self.all_shapes():
            self._check_extent(shape)

    def all_shapes(self):
        yield from self.cavities
        for interval in self.resections:
            yield from interval

    def _check_extent(self, shape: Shape) -> None:
        # voxel extent reaches half a voxel beyond the outermost centers
        for c, r, n, s in zip(shape.center, shape.radii, self.dims, self.spacing):
            if c - r < -0.5 * s or c + r > (n - 0.5) * s:
                raise FormatError(f"shape {shape.to_dict()} sticks out of the grid extent")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(origin=(0.0, 0.0, 0.0), spacing=self.spacing, direction=np.eye(3), dims=self.dims)

    @property
    def interval_count(self) -> int:
        return len(self.resections)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        perturb = d.get("perturb")
        if perturb is not None:
            perturb = RigidTransform.from_matrix(perturb["matrix"])
        return cls(
            dims=tuple(d["dims"]),
            spacing=tuple(d.get("spacing", (1.0, 1.0, 1.0))),
            tissue_hu=int(d.get("tissue_hu", DEFAULT_TISSUE_HU)),
            background_hu=int(d.get("background_hu", DEFAULT_BACKGROUND_HU)),
            cavities=tuple(Shape.from_dict(s) for s in d.get("cavities", ())),
            resections=tuple(tuple(Shape.from_dict(s) for s in iv) for iv in d.get("resections", ())),
            seed=int(d.get("seed", 0)),
            perturb=perturb,
            visible_faces_only=bool(d.get("visible_faces_only", False)),
        )

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "tissue_hu": self.tissue_hu,
            "background_hu": self.background_hu,
            "cavities": [s.to_dict() for s in self.cavities],
            "resections": [[s.to_dict() for s in iv] for iv in self.resections],
            "seed": self.seed,
            "perturb": None if self.perturb is None else {"matrix": self.perturb.matrix().tolist()},
            "visible_faces_only": self.visible_faces_only,
        }


def load_spec(path) -> PhantomSpec:
    with open(path) as fh:
        return PhantomSpec.from_dict(json.load(fh))


def _center_coords(spec: PhantomSpec):
    """Broadcastable physical coordinates of all voxel centers."""
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    x = (np.arange(nx, dtype=np.float64) * sx).reshape(nx, 1, 1)
    y = (np.arange(ny, dtype=np.float64) * sy).reshape(1, ny, 1)
    z = (np.arange(nz, dtype=np.float64) * sz).reshape(1, 1, nz)
    return x, y, z


def _shapes_mask(spec: PhantomSpec, shapes) -> np.ndarray:
    x, y, z = _center_coords(spec)
    out = np.zeros(spec.dims, dtype=bool)
    for shape in shapes:
        out |= shape.contains(x, y, z)
    return out


def make_pct(spec: PhantomSpec) -> CtVolume:
    """Uniform tissue block with the baseline cavities carved to air."""
    air = _shapes_mask(spec, spec.cavities)
    values = np.where(air, np.int16(spec.background_hu), np.int16(spec.tissue_hu))
    vol = CtVolume(spec.geometry, values)
    for interval in spec.resections:
        for shape in interval:
            x, y, z = _center_coords(spec)
            if not np.any(shape.contains(x, y, z) & ~air):
                raise FormatError(f"resection shape {shape.to_dict()} does not intersect tissue")
    return vol


def carved_mask(spec: PhantomSpec, k: int) -> np.ndarray:
    """Voxels removed by resection intervals 1..k (cumulative)."""
    if not 1 <= k <= spec.interval_count:
        raise FormatError(f"interval {k} out of range 1..{spec.interval_count}")
    shapes = [s for interval in spec.resections[:k] for s in interval]
    return _shapes_mask(spec, shapes)


def make_interval_gt(spec: PhantomSpec, k: int) -> CtVolume:
    """Ground-truth CT after intervals 1..k have been resected."""
    pct = make_pct(spec)
    carved = carved_mask(spec, k)
    return CtVolume(spec.geometry, np.where(carved, np.int16(spec.background_hu), pct.values))


def _cuberille_mesh(cavity: np.ndarray, geom: GridGeometry) -> tuple:
    """Triangulate the exposed voxel faces of a cavity mask.

    Returns (corner_keys, triangles) where corner_keys are integer
    half-index coordinates (continuous index times 2), deduplicated.
    Two triangles per face, wound outward from the cavity.
    """
    axes = ((1, 2), (0, 2), (0, 1))
    corner_rows = []
    for axis in range(3):
        for sign in (1, -1):
            shifted = np.zeros_like(cavity)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if sign == 1:
                src[axis] = slice(1, None)
                dst[axis] = slice(None, -1)
            else:
                src[axis] = slice(None, -1)
                dst[axis] = slice(1, None)
            shifted[tuple(dst)] = cavity[tuple(src)]
            exposed = cavity & ~shifted
            idx = np.argwhere(exposed)
            if len(idx) == 0:
                continue
            base = 2 * idx
            base[:, axis] += sign
            b, c = axes[axis]
            e_b = np.zeros(3, dtype=np.int64)
            e_c = np.zeros(3, dtype=np.int64)
            e_b[b] = 1
            e_c[c] = 1
            c00 = base - e_b - e_c
            c10 = base + e_b - e_c
            c11 = base + e_b + e_c
            c01 = base - e_b + e_c
            if (sign == 1) == (axis != 1):
                tri1 = np.stack([c00, c10, c11], axis=1)
                tri2 = np.stack([c00, c11, c01], axis=1)
            else:
                tri1 = np.stack([c00, c11, c10], axis=1)
                tri2 = np.stack([c00, c01, c11], axis=1)
            corner_rows.append(np.concatenate([tri1, tri2], axis=0))
    if not corner_rows:
        return np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    tris_corners = np.concatenate(corner_rows, axis=0)  # (m, 3, 3) int keys
    flat = tris_corners.reshape(-1, 3)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1, 3)


def _cavity_and_camera(spec: PhantomSpec, k: int):
    gt = make_interval_gt(spec, k)
    air = gt.values == spec.background_hu
    if not air.any():
        raise GeometryError(f"interval {k} has no cavity to reconstruct")
    labels, n = ndimage.label(air, structure=_6CONN)
    dt = ndimage.distance_transform_edt(air, sampling=spec.spacing)
    cam_idx = np.unravel_index(int(np.argmax(dt)), dt.shape)
    if n != 1:
        raise GeometryError(f"interval {k} cavity is disconnected ({n} components) at the camera")
    cavity = labels == labels[cam_idx]
    camera = continuous_index_to_physical(spec.geometry, np.array(cam_idx, dtype=np.float64))
    return cavity, camera


def _filter_visible_faces(corners, triangles, cavity, camera, spec: PhantomSpec):
    """Keep triangles whose centroid is reachable from the camera through air."""
    geom = spec.geometry
    verts = continuous_index_to_physical(geom, corners.astype(np.float64) / 2.0)
    centroids = verts[triangles].mean(axis=1)
    w = centroids - camera
    ell = np.sqrt(np.sum(w * w, axis=1))
    step = 0.4 * min(spec.spacing)
    keep = np.ones(len(triangles), dtype=bool)
    for i in range(len(triangles)):
        # stop one voxel short of the face; the face's own voxel is air
        n = max(0, int((ell[i] - min(spec.spacing)) / step))
        for kk in range(1, n + 1):
            p = camera + (kk * step / ell[i]) * w[i]
            u = (p - geom.origin) @ geom.direction / geom.spacing
            ijk = np.floor(u + 0.5).astype(np.int64)
            if np.any(ijk < 0) or np.any(ijk >= geom.dims):
                keep[i] = False
                break
            if not cavity[ijk[0], ijk[1], ijk[2]]:
                keep[i] = False
                break
    tris = triangles[keep]
    used = np.unique(tris)
    remap = np.full(len(corners), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return corners[used], remap[tris]


def _landmark_points(spec: PhantomSpec) -> np.ndarray:
    """Six fixed, non-coplanar feature points inset from the grid corners."""
    f = np.array(
        [
            [0.1, 0.1, 0.1],
            [0.9, 0.1, 0.1],
            [0.1, 0.9, 0.1],
            [0.1, 0.1, 0.9],
            [0.9, 0.9, 0.1],
            [0.9, 0.1, 0.9],
        ]
    )
    idx = f * (np.asarray(spec.dims, dtype=np.float64) - 1.0)
    return continuous_index_to_physical(spec.geometry, idx)


def make_recon(spec: PhantomSpec, k: int):
    """Reconstruction inputs for interval k.

    Returns (mesh, camera, landmarks_src, landmarks_dst). The mesh and
    camera are expressed in the perturbed frame when spec.perturb is
    set; landmarks_dst stays in the true (CT) frame.
    """
    cavity, camera = _cavity_and_camera(spec, k)
    corners, triangles = _cuberille_mesh(cavity, spec.geometry)
    if spec.visible_faces_only:
        corners, triangles = _filter_visible_faces(corners, triangles, cavity, camera, spec)
    verts = continuous_index_to_physical(spec.geometry, corners.astype(np.float64) / 2.0)
    mesh = TriMesh(verts, triangles)

    true_points = _landmark_points(spec)
    labels = [f"L{i + 1}" for i in range(len(true_points))]
    landmarks_dst = FiducialSet(tuple(zip(labels, true_points)), "LPS")
    perturb = spec.perturb or RigidTransform.identity()
    landmarks_src = apply_transform(perturb, landmarks_dst)
    mesh = apply_transform(perturb, mesh)
    camera_set = FiducialSet(((CAMERA_LABEL, perturb.rotation @ camera + perturb.translation),), "LPS")
    return mesh, camera_set, landmarks_src, landmarks_dst


def _write_fcsv(fids: FiducialSet, path) -> None:
    # Slicer markups layout; kept here because geomio only reads FCSV
    lines = [
        "# Markups fiducial file version = 4.11",
        f"# CoordinateSystem = {fids.frame}",
        "# columns = id,x,y,z,ow,ox,oy,oz,vis,sel,lock,label,desc,associatedNodeID",
    ]
    for i, (label, p) in enumerate(fids.points):
        x, y, z = (repr(float(c)) for c in p)
        lines.append(f"F_{i},{x},{y},{z},0.0,0.0,0.0,1.0,1,1,0,{label},,")
    Path(path).write_text("\n".join(lines) + "\n")


def default_manifest_params(spec: PhantomSpec) -> dict:
    """Pipeline parameters suited to phantom cuberille meshes.

    Cuberille meshes carry a vertex on every exposed face corner, so the
    ray scaffold is already dense; no extra dilation is needed and a
    one-voxel closing seals sampling pinholes.
    """
    return {
        "step_mm": rayvox.default_step(spec.geometry),
        "dilation_radius": 0,
        "closing_radius": 1,
        "fill_holes": True,
        "tau_hu": update.DEFAULT_TAU_HU,
        "air_hu": update.DEFAULT_AIR_HU,
        "roi_margin": metrics.DEFAULT_ROI_MARGIN,
    }


def emit(spec: PhantomSpec, outdir) -> dict:
    """Write the full phantom case and return its pipeline manifest."""
    from .geomio import write_nrrd  # local import keeps module load light

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_nrrd(make_pct(spec), outdir / "pct.nrrd")

    intervals = []
    gt_files = []
    landmarks_src = landmarks_dst = None
    for k in range(1, spec.interval_count + 1):
        write_nrrd(make_interval_gt(spec, k), outdir / f"gt_{k}.nrrd")
        mesh, camera, landmarks_src, landmarks_dst = make_recon(spec, k)
        write_stl(mesh, outdir / f"recon_{k}.stl")
        _write_fcsv(camera, outdir / f"camera_{k}.fcsv")
        intervals.append({"recon_stl": f"recon_{k}.stl", "camera_fcsv": f"camera_{k}.fcsv"})
        gt_files.append(f"gt_{k}.nrrd")
    if landmarks_src is None:
        raise FormatError("phantom spec has no resection intervals to emit")
    _write_fcsv(landmarks_src, outdir / "landmarks_src.fcsv")
    _write_fcsv(landmarks_dst, outdir / "landmarks_dst.fcsv")

    manifest = {
        "pct": "pct.nrrd",
        "intervals": intervals,
        "landmarks_src": "landmarks_src.fcsv",
        "landmarks_dst": "landmarks_dst.fcsv",
        "params": default_manifest_params(spec),
        "gt": gt_files,
        "phantom_spec": spec.to_dict(),
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest
