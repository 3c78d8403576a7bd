"""Virtual intraoperative CT updating.

Given a preoperative CT, a registered intraoperative surface
reconstruction (mesh + camera origin) and paired anatomical landmarks,
produce an updated HU-valued CT in the native preoperative grid in
which resected tissue is replaced by air, plus evaluation metrics
against ground-truth interval CT.
"""

from .errors import FormatError, GeometryError, RegistrationError, VictError
from .geomio import FiducialSet, TriMesh, read_fcsv, read_nrrd, read_stl, to_lps, write_nrrd, write_stl
from .metrics import MetricsReport, RoiBox, evaluate, overlap, roi_from_mask, surface_distances, surface_extract
from .phantom import PhantomSpec, Shape, make_interval_gt, make_pct, make_recon
from .rayvox import RayVoxParams, build_recon_mask, cast_rays, solidify
from .register import LandmarkPairs, RigidTransform, apply_transform, fit_rigid, fre_against, pair_landmarks
from .update import UpdateParams, apply_update, sequential_update, update_volume, vict_mask
from .volgrid import (
    CtVolume,
    GridGeometry,
    VoxelMask,
    index_to_physical,
    physical_to_index,
    threshold_mask,
)

__version__ = "0.1.0"

__all__ = [
    "CtVolume",
    "FiducialSet",
    "FormatError",
    "GeometryError",
    "GridGeometry",
    "LandmarkPairs",
    "MetricsReport",
    "PhantomSpec",
    "RayVoxParams",
    "RegistrationError",
    "RigidTransform",
    "RoiBox",
    "Shape",
    "TriMesh",
    "UpdateParams",
    "VictError",
    "VoxelMask",
    "apply_transform",
    "apply_update",
    "build_recon_mask",
    "cast_rays",
    "evaluate",
    "fit_rigid",
    "fre_against",
    "index_to_physical",
    "make_interval_gt",
    "make_pct",
    "make_recon",
    "overlap",
    "pair_landmarks",
    "physical_to_index",
    "read_fcsv",
    "read_nrrd",
    "read_stl",
    "roi_from_mask",
    "sequential_update",
    "solidify",
    "surface_distances",
    "surface_extract",
    "threshold_mask",
    "to_lps",
    "update_volume",
    "vict_mask",
    "write_nrrd",
    "write_stl",
]
