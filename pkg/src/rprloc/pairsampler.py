"""Training-pair sampling for the coarse and fine stages.

A pair is a (query, support) patch couple from one volume together with
the exact physical offset between their centers.  Coarse pairs span the
whole volume; fine pairs keep the support center inside a per-axis
[-r, r] mm cube around the query center.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volgrid import Patch, Volume, crop_patch, foreground_mask, voxel_to_world


@dataclass(frozen=True)
class StageConfig:
    stage: str  # "coarse" | "fine"
    r: float  # mm, offset bound of the stage
    patch_shape: tuple[int, int, int]
    # Coarse pairs whose offset exceeds r are resampled by default;
    # "saturate" keeps them (the tanh bound absorbs the excess).
    out_of_range: str = "reject"

    def __post_init__(self):
        if self.stage not in ("coarse", "fine"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not self.r > 0:
            raise ConfigError(f"stage radius must be positive, got {self.r}")
        if self.out_of_range not in ("reject", "saturate"):
            raise ConfigError(f"unknown out_of_range policy {self.out_of_range!r}")


@dataclass(frozen=True)
class OffsetSample:
    query: Patch
    support: Patch
    gt_offset: np.ndarray  # mm, (z, y, x)
    stage: str


def ground_truth_offset(c_q, c_s, spacing) -> np.ndarray:
    """Physical offset from the query center to the support center:
    (c_s - c_q) elementwise-scaled by the spacing, in mm."""
    return voxel_to_world(c_s, spacing) - voxel_to_world(c_q, spacing)


def _uniform_center(vol: Volume, rng: np.random.Generator) -> np.ndarray:
    # Centers range over the full grid; a border center pads at most half
    # of the patch extent along any axis.
    hi = np.array(vol.shape, dtype=np.float64) - 1
    return rng.uniform(np.zeros(3), hi)


def sample_coarse_pair(
    vol: Volume, cfg: StageConfig, rng: np.random.Generator
) -> OffsetSample:
    """Both centers uniform over the volume; offsets beyond r handled per
    the configured out-of-range policy."""
    if cfg.stage != "coarse":
        raise ConfigError(f"coarse sampler called with stage {cfg.stage!r}")
    if cfg.r < np.max(vol.extent_mm) and cfg.out_of_range == "reject":
        warnings.warn(
            f"coarse radius {cfg.r} mm does not cover the volume extent "
            f"{vol.extent_mm}; rejection will clip the offset distribution",
            stacklevel=2,
        )
    for _ in range(10_000):
        c_q = _uniform_center(vol, rng)
        c_s = _uniform_center(vol, rng)
        offset = ground_truth_offset(c_q, c_s, vol.spacing)
        if cfg.out_of_range == "saturate" or np.all(np.abs(offset) <= cfg.r):
            break
    return OffsetSample(
        query=crop_patch(vol, c_q, cfg.patch_shape),
        support=crop_patch(vol, c_s, cfg.patch_shape),
        gt_offset=offset,
        stage="coarse",
    )


def sample_fine_pair(
    vol: Volume, cfg: StageConfig, rng: np.random.Generator
) -> OffsetSample:
    """Query uniform over the volume; support drawn per-axis uniformly
    within r mm of the query, so |offset| <= r by construction."""
    if cfg.stage != "fine":
        raise ConfigError(f"fine sampler called with stage {cfg.stage!r}")
    c_q = _uniform_center(vol, rng)
    delta_vox = rng.uniform(-cfg.r, cfg.r, 3) / vol.spacing
    c_s = c_q + delta_vox
    return OffsetSample(
        query=crop_patch(vol, c_q, cfg.patch_shape),
        support=crop_patch(vol, c_s, cfg.patch_shape),
        gt_offset=ground_truth_offset(c_q, c_s, vol.spacing),
        stage="fine",
    )


def sample_pair(vol: Volume, cfg: StageConfig, rng) -> OffsetSample:
    if cfg.stage == "coarse":
        return sample_coarse_pair(vol, cfg, rng)
    return sample_fine_pair(vol, cfg, rng)


def sample_init_position(
    vol: Volume, rng: np.random.Generator, air_threshold: float | None = None
) -> np.ndarray:
    """A uniformly random foreground (non-air) voxel position."""
    mask = foreground_mask(vol, air_threshold)
    flat = np.flatnonzero(mask)
    pick = flat[rng.integers(flat.size)]
    return np.array(np.unravel_index(pick, mask.shape), dtype=np.float64)


def worker_rngs(seed: int, n_workers: int) -> list[np.random.Generator]:
    """Deterministically split one run seed into independent streams."""
    seq = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in seq.spawn(n_workers)]
