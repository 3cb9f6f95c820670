"""Volumetric data model, coordinate geometry, patch cropping and
foreground detection.

Axis order is (z, y, x) everywhere: array indices, spacings, offsets and
patch shapes all follow it.  Voxel coordinates are real-valued so that
sub-voxel agent positions can be represented; world coordinates are in mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateVolumeError, GeometryError

# Default air thresholds: raw CT-like units vs volumes normalized to [0, 1].
AIR_THRESHOLD_RAW = -500.0
AIR_THRESHOLD_NORMALIZED = 0.05


def _as_vec3(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must be a 3-vector, got shape {arr.shape}")
    return arr


def _check_spacing(spacing) -> np.ndarray:
    s = _as_vec3(spacing, "spacing")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise GeometryError(f"spacing must be positive and finite, got {s}")
    return s


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with per-axis physical spacing in mm.

    ``data`` is indexed (z, y, x); ``spacing`` is mm per voxel along the
    same axes.  Immutable after construction; all operations on volumes
    are pure.
    """

    data: np.ndarray
    spacing: np.ndarray
    intensity_unit: str = "raw"  # "raw" | "normalized"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GeometryError(f"volume data must be 3D, got shape {data.shape}")
        spacing = _check_spacing(self.spacing)
        if self.intensity_unit not in ("raw", "normalized"):
            raise GeometryError(f"unknown intensity unit {self.intensity_unit!r}")
        if self.intensity_unit == "normalized":
            lo, hi = float(data.min()), float(data.max())
            if lo < -1e-6 or hi > 1 + 1e-6:
                raise GeometryError(
                    f"normalized intensities must lie in [0, 1], got [{lo}, {hi}]"
                )
        data.setflags(write=False)
        spacing.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical extent along (z, y, x), mm."""
        return (np.array(self.shape, dtype=np.float64) - 1) * self.spacing

    @property
    def diagonal_mm(self) -> float:
        return float(np.linalg.norm(self.extent_mm))

    def min_intensity(self) -> float:
        return float(self.data.min())


@dataclass(frozen=True)
class Patch:
    """A fixed-size (D, H, W) crop with its (possibly sub-voxel) center.

    ``center`` is the requested crop center in voxel coordinates of the
    source volume, kept unrounded; ``source_spacing`` is the source
    volume's spacing in mm.
    """

    data: np.ndarray
    center: np.ndarray
    source_spacing: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        center = _as_vec3(self.center, "patch center")
        spacing = _check_spacing(self.source_spacing)
        data.setflags(write=False)
        center.setflags(write=False)
        spacing.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "source_spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def center_world(self) -> np.ndarray:
        return voxel_to_world(self.center, self.source_spacing)


@dataclass(frozen=True)
class BBox3D:
    """Axis-aligned box in world mm, corners ordered (z, y, x)."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = _as_vec3(self.min_corner, "min_corner")
        hi = _as_vec3(self.max_corner, "max_corner")
        if np.any(lo > hi + 1e-12):
            raise GeometryError(f"box corners inverted: {lo} > {hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def size(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    def volume(self) -> float:
        return float(np.prod(self.size))


def voxel_to_world(p, spacing) -> np.ndarray:
    """Map a voxel coordinate to world mm: elementwise p * spacing."""
    point = _as_vec3(p, "point")
    s = _check_spacing(spacing)
    if not np.all(np.isfinite(point)):
        raise GeometryError(f"non-finite voxel point {point}")
    return point * s


def world_to_voxel(w, spacing) -> np.ndarray:
    """Inverse of :func:`voxel_to_world`."""
    point = _as_vec3(w, "point")
    s = _check_spacing(spacing)
    if not np.all(np.isfinite(point)):
        raise GeometryError(f"non-finite world point {point}")
    return point / s


def crop_patch(vol: Volume, center, shape) -> Patch:
    """Crop a ``shape``-sized patch centered at ``round(center)``.

    Regions outside the volume are filled with the volume's minimum
    intensity, so any center (even fully outside the grid) is valid.
    The recorded patch center is the requested, unrounded center.
    """
    center = _as_vec3(center, "center")
    if not np.all(np.isfinite(center)):
        raise GeometryError(f"non-finite crop center {center}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise GeometryError(f"bad patch shape {shape}")

    fill = vol.min_intensity()
    out = np.full(shape, fill, dtype=np.float32)
    c = np.round(center).astype(np.int64)
    start = c - np.array(shape) // 2
    stop = start + np.array(shape)

    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(stop, vol.shape)
    if np.all(src_lo < src_hi):
        dst_lo = src_lo - start
        dst_hi = dst_lo + (src_hi - src_lo)
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = vol.data[
            src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
        ]
    return Patch(data=out, center=center, source_spacing=vol.spacing)


def foreground_mask(vol: Volume, air_threshold: float | None = None) -> np.ndarray:
    """Boolean mask of non-air voxels (intensity > threshold).

    Raises :class:`DegenerateVolumeError` if no voxel qualifies.
    """
    if air_threshold is None:
        air_threshold = (
            AIR_THRESHOLD_NORMALIZED
            if vol.intensity_unit == "normalized"
            else AIR_THRESHOLD_RAW
        )
    mask = vol.data > air_threshold
    if not mask.any():
        raise DegenerateVolumeError(
            f"no voxel above air threshold {air_threshold}"
        )
    return mask


def normalize_intensity(vol: Volume, window: tuple[float, float]) -> Volume:
    """Clip to ``window`` and rescale to [0, 1]."""
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise GeometryError(f"bad intensity window ({lo}, {hi})")
    data = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume(data=data, spacing=vol.spacing, intensity_unit="normalized")


def resample(vol: Volume, target_spacing) -> Volume:
    """Trilinear resampling to a new per-axis spacing.

    The output grid covers the input's physical extent; voxel i of the
    output samples the input at world position i * target_spacing.
    """
    target = _check_spacing(target_spacing)
    in_shape = np.array(vol.shape, dtype=np.float64)
    out_shape = np.maximum(
        np.round((in_shape - 1) * vol.spacing / target) + 1, 1
    ).astype(np.int64)

    grids = np.meshgrid(
        *(np.arange(n, dtype=np.float64) for n in out_shape), indexing="ij"
    )
    coords = [g * target[i] / vol.spacing[i] for i, g in enumerate(grids)]
    data = ndimage.map_coordinates(
        vol.data.astype(np.float64), coords, order=1, mode="nearest"
    )
    return Volume(
        data=np.clip(data, vol.data.min(), vol.data.max()).astype(np.float32),
        spacing=target,
        intensity_unit=vol.intensity_unit,
    )
