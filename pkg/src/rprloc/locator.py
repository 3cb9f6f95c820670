"""One-shot inference: agent movement by predicted offsets, coarse-to-fine
multi-step localization, multi-run ensembles, and organ bounding-box
detection via extreme or diagonal points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateMaskError, GeometryError
from .pairsampler import sample_init_position
from .volgrid import BBox3D, Patch, Volume, crop_patch, voxel_to_world

EXTREME_POINT_NAMES = ("z_min", "z_max", "y_min", "y_max", "x_min", "x_max")
DIAGONAL_POINT_NAMES = ("d_min", "d_max")


class PerfectProjectionStub:
    """Ideal projection model: the latent of a patch is its true world
    position, so a single step lands exactly on the support landmark.

    Used to exercise agent movement and box assembly in isolation from
    learning quality.
    """

    def __init__(self, patch_shape=(16, 32, 32), r: float = np.inf):
        self.patch_shape = tuple(patch_shape)
        self.r = r
        self.stage = "stub"
        self.provenance = {"config_hash": "perfect-stub"}

    def project(self, patch: Patch) -> np.ndarray:
        return voxel_to_world(patch.center, patch.source_spacing)

    def project_batch(self, patches: list[Patch]) -> np.ndarray:
        return np.stack([self.project(p) for p in patches])

    def offset_from_latents(self, p_q, p_s) -> np.ndarray:
        delta = np.asarray(p_s, dtype=np.float64) - np.asarray(p_q, dtype=np.float64)
        if np.isfinite(self.r):
            delta = np.clip(delta, -self.r, self.r)
        return delta

    def predict_offset(self, query: Patch, support: Patch) -> np.ndarray:
        return self.offset_from_latents(self.project(query), self.project(support))


@dataclass(frozen=True)
class SupportAnnotation:
    """A single annotated support volume with named landmark positions
    (voxel coordinates)."""

    volume: Volume
    landmarks: dict[str, np.ndarray]

    def __post_init__(self):
        for name, pos in self.landmarks.items():
            p = np.asarray(pos, dtype=np.float64)
            if np.any(p < 0) or np.any(p > np.array(self.volume.shape) - 1):
                raise GeometryError(
                    f"landmark {name!r} at {p} lies outside the support volume"
                )
            object.__getattribute__(self, "landmarks")[name] = p

    @classmethod
    def from_organ_mask(
        cls, volume: Volume, mask: np.ndarray, strategy: str
    ) -> "SupportAnnotation":
        """Derive per-point landmarks from an organ mask."""
        spacing = volume.spacing
        if strategy == "extreme":
            points = extract_extreme_points(mask, spacing).points
        elif strategy == "diagonal":
            d_min, d_max = extract_diagonal_points(mask, spacing)
            points = {"d_min": d_min, "d_max": d_max}
        else:
            raise ConfigError(f"unknown strategy {strategy!r}")
        landmarks = {name: world / spacing for name, world in points.items()}
        return cls(volume=volume, landmarks=landmarks)


@dataclass
class LocalizationResult:
    landmark: str
    final_world: np.ndarray  # mm; mean of per-run finals
    per_run_worlds: list[np.ndarray]
    trajectories: list[list[np.ndarray]]  # per run, voxel positions
    models: tuple[str, str | None]
    wall_time: float


@dataclass(frozen=True)
class ExtremePointSet:
    """Six organ-surface points with extremal coordinates, world mm."""

    points: dict[str, np.ndarray]

    def __post_init__(self):
        missing = set(EXTREME_POINT_NAMES) - set(self.points)
        if missing:
            raise GeometryError(f"extreme point set missing {sorted(missing)}")
        for axis, (lo, hi) in enumerate(
            [("z_min", "z_max"), ("y_min", "y_max"), ("x_min", "x_max")]
        ):
            if self.points[lo][axis] > self.points[hi][axis] + 1e-9:
                raise GeometryError(
                    f"{lo}/{hi} inverted along axis {axis}: "
                    f"{self.points[lo][axis]} > {self.points[hi][axis]}"
                )


def _model_id(model) -> str:
    return model.provenance.get("config_hash", "untracked")


def locate_step(model, test_vol: Volume, current, support_patch: Patch) -> np.ndarray:
    """One agent move: crop the query at the current position, predict the
    offset in mm, convert to voxels and advance, clamped to the grid."""
    current = np.asarray(current, dtype=np.float64)
    query = crop_patch(test_vol, current, model.patch_shape)
    offset_mm = model.predict_offset(query, support_patch)
    new = current + offset_mm / test_vol.spacing
    return np.clip(new, 0, np.array(test_vol.shape, dtype=np.float64) - 1)


def _run_agents(
    mc,
    mf,
    test_vol: Volume,
    support_patches: dict[str, Patch],
    inits: np.ndarray,
    steps_coarse: int,
) -> list[list[np.ndarray]]:
    """Advance a batch of agents through the coarse (and optional fine)
    schedule; returns one trajectory per agent.

    Support patches are projected once per model and reused by every run
    and step.
    """
    bounds = np.array(test_vol.shape, dtype=np.float64) - 1
    positions = np.array(inits, dtype=np.float64)
    trajectories = [[p.copy()] for p in positions]

    schedule = [(mc, steps_coarse)]
    if mf is not None:
        schedule.append((mf, 1))
    for model, steps in schedule:
        p_support = model.project(support_patches[model.stage])
        for _ in range(steps):
            patches = [
                crop_patch(test_vol, pos, model.patch_shape) for pos in positions
            ]
            p_query = model.project_batch(patches)
            offsets = model.offset_from_latents(p_query, p_support)
            positions = np.clip(
                positions + offsets / test_vol.spacing, 0, bounds
            )
            for traj, pos in zip(trajectories, positions):
                traj.append(pos.copy())
    return trajectories


def _support_patches(mc, mf, support: SupportAnnotation, name) -> dict[str, Patch]:
    center = support.landmarks[name]
    patches = {mc.stage: crop_patch(support.volume, center, mc.patch_shape)}
    if mf is not None:
        patches[mf.stage] = crop_patch(support.volume, center, mf.patch_shape)
    return patches


def locate_ensemble(
    mc,
    mf,
    test_vol: Volume,
    support: SupportAnnotation,
    name: str,
    steps_coarse: int = 1,
    K: int = 1,
    rng: np.random.Generator | None = None,
    inits: np.ndarray | None = None,
) -> LocalizationResult:
    """Locate one landmark K times from random non-air initializations and
    average the final positions."""
    if K < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {K}")
    if name not in support.landmarks:
        raise KeyError(f"landmark {name!r} not in support annotation")
    if rng is None:
        rng = np.random.default_rng()
    t0 = time.perf_counter()
    if inits is None:
        inits = np.stack(
            [sample_init_position(test_vol, rng) for _ in range(K)]
        )
    else:
        inits = np.asarray(inits, dtype=np.float64).reshape(K, 3)

    patches = _support_patches(mc, mf, support, name)
    trajectories = _run_agents(mc, mf, test_vol, patches, inits, steps_coarse)
    per_run = [voxel_to_world(t[-1], test_vol.spacing) for t in trajectories]
    return LocalizationResult(
        landmark=name,
        final_world=np.mean(per_run, axis=0),
        per_run_worlds=per_run,
        trajectories=trajectories,
        models=(_model_id(mc), _model_id(mf) if mf is not None else None),
        wall_time=time.perf_counter() - t0,
    )


def locate_landmark(
    mc,
    mf,
    test_vol: Volume,
    support: SupportAnnotation,
    name: str,
    steps_coarse: int = 1,
    rng: np.random.Generator | None = None,
) -> LocalizationResult:
    """Single-run localization: steps_coarse coarse moves, then exactly one
    fine move when a fine model is given."""
    return locate_ensemble(
        mc, mf, test_vol, support, name, steps_coarse=steps_coarse, K=1, rng=rng
    )


def extract_extreme_points(mask: np.ndarray, spacing) -> ExtremePointSet:
    """The six mask voxels with extremal coordinates along each axis.

    Ties on a flat face are broken toward the mask centroid in the
    orthogonal plane, then lexicographically.
    """
    coords = np.argwhere(np.asarray(mask, dtype=bool))
    if coords.size == 0:
        raise DegenerateMaskError("cannot extract extreme points of an empty mask")
    spacing = np.asarray(spacing, dtype=np.float64)
    centroid = coords.mean(axis=0) * spacing

    points = {}
    for axis, axis_name in enumerate("zyx"):
        for mode in ("min", "max"):
            value = coords[:, axis].min() if mode == "min" else coords[:, axis].max()
            cands = coords[coords[:, axis] == value]
            others = [a for a in range(3) if a != axis]
            d2 = (
                (cands[:, others] * spacing[others] - centroid[others]) ** 2
            ).sum(axis=1)
            best = cands[np.lexsort((cands[:, 2], cands[:, 1], cands[:, 0], d2))][0]
            points[f"{axis_name}_{mode}"] = best.astype(np.float64) * spacing
    return ExtremePointSet(points=points)


def extract_diagonal_points(mask: np.ndarray, spacing) -> tuple[np.ndarray, np.ndarray]:
    """The two corners of the mask's tight axis-aligned bounding box in
    world mm (not necessarily on the mask itself)."""
    coords = np.argwhere(np.asarray(mask, dtype=bool))
    if coords.size == 0:
        raise DegenerateMaskError("cannot extract diagonal points of an empty mask")
    spacing = np.asarray(spacing, dtype=np.float64)
    return (
        coords.min(axis=0).astype(np.float64) * spacing,
        coords.max(axis=0).astype(np.float64) * spacing,
    )


def assemble_bbox(points) -> BBox3D:
    """Build the box from located points.

    Extreme mode uses only the defining coordinate of each point; diagonal
    mode spans the two corners.  Inverted extents raise a geometry error.
    """
    if isinstance(points, ExtremePointSet):
        p = points.points
        lo = np.array([p["z_min"][0], p["y_min"][1], p["x_min"][2]])
        hi = np.array([p["z_max"][0], p["y_max"][1], p["x_max"][2]])
    else:
        lo, hi = (np.asarray(c, dtype=np.float64) for c in points)
    if np.any(lo > hi + 1e-9):
        raise GeometryError(f"inverted box extents: {lo} > {hi}")
    return BBox3D(min_corner=lo, max_corner=hi)


def mask_bbox(mask: np.ndarray, spacing) -> BBox3D:
    """Tight bounding box of a mask in world mm."""
    return assemble_bbox(extract_diagonal_points(mask, spacing))


def detect_organ(
    mc,
    mf,
    test_vol: Volume,
    support_volume: Volume,
    support_mask: np.ndarray,
    strategy: str = "extreme",
    K: int = 1,
    steps_coarse: int = 1,
    rng: np.random.Generator | None = None,
) -> tuple[BBox3D, dict[str, LocalizationResult]]:
    """Locate an organ's bounding box by independently localizing its
    extreme (or diagonal) points and assembling the box.

    Located min/max coordinates are ordered before assembly, since a noisy
    model can produce slightly inverted extents.
    """
    support = SupportAnnotation.from_organ_mask(support_volume, support_mask, strategy)
    results = {
        name: locate_ensemble(
            mc, mf, test_vol, support, name, steps_coarse=steps_coarse, K=K, rng=rng
        )
        for name in support.landmarks
    }
    if strategy == "extreme":
        finals = {name: res.final_world for name, res in results.items()}
        lo = np.array(
            [finals["z_min"][0], finals["y_min"][1], finals["x_min"][2]]
        )
        hi = np.array(
            [finals["z_max"][0], finals["y_max"][1], finals["x_max"][2]]
        )
    else:
        lo = results["d_min"].final_world
        hi = results["d_max"].final_world
    box = BBox3D(
        min_corner=np.minimum(lo, hi), max_corner=np.maximum(lo, hi)
    )
    return box, results
