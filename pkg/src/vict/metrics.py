"""Overlap and surface-distance metrics inside a reconstruction-defined ROI.

Masks are compared within the axis-aligned bounding box of the
reconstruction mask plus a margin. Surface voxels are mask voxels with
an unset 6-neighbor (or sitting on the ROI/grid boundary). Distances
between surfaces are Euclidean in index space and converted to mm with
the mean voxel spacing; an alternative per-axis mode measures true
anisotropic Euclidean distances instead.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GeometryError
from .volgrid import CtVolume, VoxelMask, threshold_mask
from .update import DEFAULT_TAU_HU

DEFAULT_ROI_MARGIN = 3

MEAN_SPACING_MODE = "mean-spacing"
PER_AXIS_MODE = "per-axis"


@dataclass(frozen=True)
class RoiBox:
    """Inclusive index-space bounding box."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(x) for x in self.lo))
        object.__setattr__(self, "hi", tuple(int(x) for x in self.hi))
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise GeometryError(f"empty ROI box {self.lo}..{self.hi}")

    def slices(self) -> tuple:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def shifted(self, offset) -> "RoiBox":
        off = tuple(int(o) for o in offset)
        return RoiBox(tuple(l + o for l, o in zip(self.lo, off)), tuple(h + o for h, o in zip(self.hi, off)))


@dataclass(frozen=True)
class MetricsReport:
    """Overlap + surface-distance results with their context."""

    dsc: float
    jaccard: float
    hd95: float
    hd100: float
    chamfer: float
    msd: float
    rmsd: float
    roi: RoiBox
    voxel_counts: tuple  # (a_only, b_only, both) inside the ROI
    mean_spacing: float
    spacing_mode: str = MEAN_SPACING_MODE

    def to_dict(self) -> dict:
        return {
            "dsc": self.dsc,
            "jaccard": self.jaccard,
            "hd95_mm": self.hd95,
            "hd100_mm": self.hd100,
            "chamfer_mm": self.chamfer,
            "msd_mm": self.msd,
            "rmsd_mm": self.rmsd,
            "roi": {"lo": list(self.roi.lo), "hi": list(self.roi.hi)},
            "voxel_counts": {
                "a_only": self.voxel_counts[0],
                "b_only": self.voxel_counts[1],
                "both": self.voxel_counts[2],
            },
            "mean_spacing_mm": self.mean_spacing,
            "spacing_mode": self.spacing_mode,
        }


def roi_from_mask(m_rec: VoxelMask, margin: int = DEFAULT_ROI_MARGIN) -> RoiBox:
    """Bounding box of set voxels, padded by margin, clipped to the grid."""
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    idx = np.nonzero(m_rec.bits)
    if idx[0].size == 0:
        raise GeometryError("cannot build an ROI from an empty mask")
    dims = m_rec.geometry.dims
    lo = tuple(max(0, int(ax.min()) - margin) for ax in idx)
    hi = tuple(min(int(d) - 1, int(ax.max()) + margin) for ax, d in zip(idx, dims))
    return RoiBox(lo, hi)


def overlap(a: VoxelMask, b: VoxelMask, roi: RoiBox):
    """(dsc, jaccard) of the two masks restricted to the ROI.

    Both-empty compares as perfect agreement (1.0, 1.0).
    """
    if a.geometry != b.geometry:
        raise GeometryError("overlap inputs live on different grids")
    sl = roi.slices()
    ca = a.bits[sl]
    cb = b.bits[sl]
    na = int(np.count_nonzero(ca))
    nb = int(np.count_nonzero(cb))
    both = int(np.count_nonzero(ca & cb))
    if na + nb == 0:
        return 1.0, 1.0
    dsc = 2.0 * both / (na + nb)
    jaccard = both / (na + nb - both)
    return dsc, jaccard


def surface_extract(m: VoxelMask, roi: RoiBox) -> np.ndarray:
    """Indices (n, 3) of ROI voxels exposed to background or the ROI edge."""
    crop = m.bits[roi.slices()]
    return _surface_indices(crop) + np.asarray(roi.lo, dtype=np.int64)


def _surface_indices(crop: np.ndarray) -> np.ndarray:
    # zero padding makes ROI-edge voxels count as exposed
    padded = np.pad(crop, 1)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(crop & ~interior)


def _surface_crop(crop: np.ndarray) -> np.ndarray:
    surf = np.zeros_like(crop)
    idx = _surface_indices(crop)
    surf[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return surf


def surface_distances(a: VoxelMask, b: VoxelMask, roi: RoiBox, spacing=None, spacing_mode: str = MEAN_SPACING_MODE) -> dict:
    """Symmetric surface-distance statistics between two masks in an ROI.

    Pools the two directed nearest-surface distance multisets and
    reports mean (msd), RMS (rmsd), max (hd100) and 95th percentile
    (hd95, linear interpolation between order statistics); chamfer is
    the average of the two directed means. In mean-spacing mode the
    distances are index-space Euclidean scaled by the average spacing.
    """
    if a.geometry != b.geometry:
        raise GeometryError("surface distance inputs live on different grids")
    if spacing is None:
        spacing = a.geometry.spacing
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    sl = roi.slices()
    surf_a = _surface_crop(a.bits[sl])
    surf_b = _surface_crop(b.bits[sl])
    if not surf_a.any() or not surf_b.any():
        empty = " and ".join(s for s, ok in (("first", surf_a.any()), ("second", surf_b.any())) if not ok)
        raise GeometryError(f"{empty} mask has an empty surface inside the ROI")

    if spacing_mode == MEAN_SPACING_MODE:
        sampling = (1.0, 1.0, 1.0)
        scale = float(np.mean(spacing))
    elif spacing_mode == PER_AXIS_MODE:
        sampling = tuple(spacing)
        scale = 1.0
    else:
        raise ValueError(f"unknown spacing mode {spacing_mode!r}")

    # distance map to each surface, sampled at the other surface's voxels
    dt_to_b = ndimage.distance_transform_edt(~surf_b, sampling=sampling)
    dt_to_a = ndimage.distance_transform_edt(~surf_a, sampling=sampling)
    d_ab = dt_to_b[surf_a] * scale
    d_ba = dt_to_a[surf_b] * scale
    pooled = np.concatenate([d_ab, d_ba])

    return {
        "msd": float(np.mean(pooled)),
        "rmsd": float(np.sqrt(np.mean(pooled * pooled))),
        "hd100": float(np.max(pooled)),
        "hd95": float(np.percentile(pooled, 95)),
        "chamfer": float(0.5 * (np.mean(d_ab) + np.mean(d_ba))),
    }


def evaluate(
    vict: CtVolume,
    gt: CtVolume,
    m_rec: VoxelMask,
    tau: float = DEFAULT_TAU_HU,
    margin: int = DEFAULT_ROI_MARGIN,
    spacing_mode: str = MEAN_SPACING_MODE,
) -> MetricsReport:
    """Compare an updated volume against ground truth near the reconstruction.

    Both volumes are thresholded at tau; mask a is derived from the
    updated volume, mask b from ground truth.
    """
    if not (vict.geometry == gt.geometry == m_rec.geometry):
        raise GeometryError("evaluation inputs live on different grids")
    roi = roi_from_mask(m_rec, margin)
    a = threshold_mask(vict, tau)
    b = threshold_mask(gt, tau)
    dsc, jaccard = overlap(a, b, roi)
    dists = surface_distances(a, b, roi, spacing_mode=spacing_mode)
    sl = roi.slices()
    ca, cb = a.bits[sl], b.bits[sl]
    both = int(np.count_nonzero(ca & cb))
    counts = (int(np.count_nonzero(ca)) - both, int(np.count_nonzero(cb)) - both, both)
    return MetricsReport(
        dsc=dsc,
        jaccard=jaccard,
        hd95=dists["hd95"],
        hd100=dists["hd100"],
        chamfer=dists["chamfer"],
        msd=dists["msd"],
        rmsd=dists["rmsd"],
        roi=roi,
        voxel_counts=counts,
        mean_spacing=vict.geometry.mean_spacing,
        spacing_mode=spacing_mode,
    )
