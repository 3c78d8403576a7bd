"""Voxel-wise CT updating: delete anatomy contradicted by the reconstruction.

Occupancy present in the thresholded CT but not supported by the
reconstruction mask is resected: those voxels are reassigned an
air-equivalent HU value. Every other voxel keeps its original intensity
bit-for-bit, and the grid metadata is copied verbatim, so the output is
a full HU-valued volume in the native preoperative grid.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .volgrid import CtVolume, VoxelMask, threshold_mask

DEFAULT_TAU_HU = -300.0
DEFAULT_AIR_HU = -1000


@dataclass(frozen=True)
class UpdateParams:
    """Threshold and replacement intensity for the update rule."""

    tau: float = DEFAULT_TAU_HU
    air_hu: int = DEFAULT_AIR_HU

    def __post_init__(self):
        # a "removed" voxel must not re-enter the anatomy mask
        if self.air_hu > self.tau:
            raise ValueError(f"air_hu ({self.air_hu}) must be <= tau ({self.tau})")


def vict_mask(m_pct: VoxelMask, m_rec: VoxelMask) -> VoxelMask:
    """Occupancy that survives the update: in the CT mask, not in the recon."""
    if m_pct.geometry != m_rec.geometry:
        raise GeometryError("CT mask and reconstruction mask live on different grids")
    return VoxelMask(m_pct.geometry, m_pct.bits & ~m_rec.bits)


def apply_update(pct: CtVolume, m_vict: VoxelMask, params: UpdateParams) -> CtVolume:
    """Keep original HU where the mask survives, air elsewhere."""
    if pct.geometry != m_vict.geometry:
        raise GeometryError("volume and mask live on different grids")
    air = np.asarray(params.air_hu).astype(pct.values.dtype)
    if float(air) != float(params.air_hu):
        raise ValueError(f"air_hu {params.air_hu} not representable in volume dtype {pct.values.dtype}")
    return CtVolume(pct.geometry, np.where(m_vict.bits, pct.values, air))


def update_volume(pct: CtVolume, m_rec: VoxelMask, params: UpdateParams) -> CtVolume:
    """One full update step: threshold, subtract reconstruction, remap."""
    return apply_update(pct, vict_mask(threshold_mask(pct, params.tau), m_rec), params)


def sequential_update(pct: CtVolume, recon_masks, params: UpdateParams):
    """Updated volume per interval, rebasing each on the original CT.

    Interval k uses the union of reconstruction masks 1..k against the
    original thresholded CT, so resections accumulate monotonically and
    threshold artifacts never compound.
    """
    recon_masks = list(recon_masks)
    if not recon_masks:
        raise ValueError("need at least one reconstruction mask")
    m_pct = threshold_mask(pct, params.tau)
    out = []
    cumulative = None
    for mask in recon_masks:
        cumulative = mask if cumulative is None else (cumulative | mask)
        out.append(apply_update(pct, vict_mask(m_pct, cumulative), params))
    return out
