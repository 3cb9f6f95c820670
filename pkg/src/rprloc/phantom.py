"""Procedural 3D phantom generator.

Produces desk-scale annotated volumes whose pseudo-organs (jittered,
warped ellipsoids) keep a consistent relative arrangement across cases,
over a noisy body background inside an air shell.  Generation is fully
deterministic given (spec, case seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .volgrid import Volume
from . import volio

MANIFEST_NAME = "manifest.json"
_SPLIT_SEED_BASE = {"train": 0, "val": 10_000, "test": 20_000}


@dataclass(frozen=True)
class OrganSpec:
    name: str
    base_center: tuple[float, float, float]  # fractional (z, y, x) in (0, 1)
    base_radii: tuple[float, float, float]  # mm
    intensity: float


@dataclass(frozen=True)
class JitterSpec:
    center_sd: float = 3.0  # mm
    radii_sd: float = 1.0  # mm
    global_warp: float = 0.08  # fractional radial perturbation amplitude


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple[int, int, int] = (64, 96, 96)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    organs: tuple[OrganSpec, ...] = (
        # Base centers are strictly ordered along every axis so the
        # cross-case rank of organ centroids survives jitter.
        OrganSpec("stem", (0.35, 0.42, 0.46), (12.0, 16.0, 16.0), 0.85),
        OrganSpec("pod_left", (0.42, 0.48, 0.28), (10.0, 12.0, 12.0), 0.70),
        OrganSpec("pod_right", (0.50, 0.56, 0.72), (10.0, 12.0, 12.0), 0.60),
        OrganSpec("keel", (0.65, 0.64, 0.54), (14.0, 12.0, 18.0), 0.45),
    )
    jitter: JitterSpec = JitterSpec()
    seed: int = 0

    def __post_init__(self):
        for organ in self.organs:
            if not all(0.0 < c < 1.0 for c in organ.base_center):
                raise ConfigError(
                    f"organ {organ.name!r}: fractional center must lie in (0, 1)"
                )
        if len({o.name for o in self.organs}) != len(self.organs):
            raise ConfigError("organ names must be unique")
        if len({o.intensity for o in self.organs}) != len(self.organs):
            raise ConfigError("organ intensities must be distinct")

    def organ_names(self) -> list[str]:
        return [o.name for o in self.organs]

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class PhantomCase:
    volume: Volume
    masks: dict[str, np.ndarray]
    provenance: dict


def generate_case(spec: PhantomSpec, case_seed: int) -> PhantomCase:
    """Render one phantom case, deterministic in (spec, case_seed)."""
    rng = np.random.default_rng([spec.seed, int(case_seed)])
    shape = np.array(spec.grid_shape, dtype=np.int64)
    spacing = np.array(spec.spacing, dtype=np.float64)

    vol = np.zeros(tuple(shape), dtype=np.float32)
    body = _body_mask(shape)
    # The background texture is a fixed field of the spec, shared by every
    # case: like real anatomy, local texture is consistent across subjects
    # and therefore indicative of position.  Per-case variation comes from
    # the jittered organs; at zero jitter the normal draws below are all
    # exactly zero, so cases are voxel-identical across seeds.
    background_rng = np.random.default_rng([spec.seed, 0xBA5E])
    # Two texture scales: a broad component for coarse position cues and a
    # finer one so nearby locations stay distinguishable.
    background = (
        0.22
        + 2.4 * ndimage.gaussian_filter(
            background_rng.standard_normal(tuple(shape)), sigma=4.0
        )
        + 1.2 * ndimage.gaussian_filter(
            background_rng.standard_normal(tuple(shape)), sigma=1.5
        )
    )
    vol[body] = np.clip(background, 0.05, 0.40)[body].astype(np.float32)

    damped: list[str] = []
    masks: dict[str, np.ndarray] = {}
    for organ in spec.organs:
        mask, was_damped = _render_organ(vol, organ, spec, rng, shape, spacing)
        masks[organ.name] = mask
        if was_damped:
            damped.append(organ.name)

    # Later organs may overwrite earlier ones; masks are exactly the voxels
    # still carrying each organ's intensity.
    for organ in spec.organs:
        masks[organ.name] &= vol == np.float32(organ.intensity)

    volume = Volume(data=vol, spacing=spacing, intensity_unit="normalized")
    provenance = {
        "case_seed": int(case_seed),
        "spec_hash": spec.spec_hash(),
        "damped_jitter": damped,
    }
    return PhantomCase(volume=volume, masks=masks, provenance=provenance)


def _body_mask(shape: np.ndarray) -> np.ndarray:
    # Superellipsoid body: fills most of the grid (like an air-cropped
    # scan) while keeping a thin all-air shell at the borders.
    grids = np.meshgrid(
        *(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"
    )
    center = (shape - 1) / 2.0
    semi = 0.48 * (shape - 1)
    d8 = sum(((g - c) / s) ** 8 for g, c, s in zip(grids, center, semi))
    return d8 <= 1.0


def _render_organ(vol, organ, spec, rng, shape, spacing):
    """Paint one jittered, warped ellipsoid; returns (mask, damping flag)."""
    center_off = rng.normal(0.0, spec.jitter.center_sd, 3) / spacing
    radii_off = rng.normal(0.0, spec.jitter.radii_sd, 3)
    warp_mat = rng.standard_normal((3, 3))
    warp_mat = (warp_mat + warp_mat.T) / 2.0

    base_center = np.array(organ.base_center) * (shape - 1)
    damped = False
    for attempt in range(6):
        scale = 0.5**attempt
        center = base_center + center_off * scale
        radii = np.maximum(np.array(organ.base_radii) + radii_off * scale, 3.0)
        mask = _ellipsoid_mask(
            center, radii, spec.jitter.global_warp, warp_mat, shape, spacing
        )
        radius_vox = radii * (1 + spec.jitter.global_warp) / spacing
        inside = np.all(center - radius_vox >= 0) and np.all(
            center + radius_vox <= shape - 1
        )
        if mask.any() and inside:
            vol[mask] = np.float32(organ.intensity)
            return mask, damped
        damped = True
    raise ConfigError(
        f"organ {organ.name!r} cannot be placed inside the grid even with "
        f"fully damped jitter; check spec geometry"
    )


def _ellipsoid_mask(center, radii, warp, warp_mat, shape, spacing):
    radius_vox = radii * (1 + warp) / spacing
    lo = np.maximum(np.floor(center - radius_vox).astype(np.int64) - 1, 0)
    hi = np.minimum(np.ceil(center + radius_vox).astype(np.int64) + 2, shape)
    mask = np.zeros(tuple(shape), dtype=bool)
    if np.any(lo >= hi):
        return mask

    grids = np.meshgrid(
        *(np.arange(lo[i], hi[i], dtype=np.float64) for i in range(3)),
        indexing="ij",
    )
    u = np.stack(
        [(g - c) * s / r for g, c, s, r in zip(grids, center, spacing, radii)]
    )
    dist = np.sqrt((u**2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(dist > 0, u / dist, 0.0)
    quad = np.einsum("i...,ij,j...->...", n, warp_mat, n)
    boundary = np.clip(1.0 + warp * quad / 2.0, 1 - warp, 1 + warp)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = dist <= boundary
    return mask


def split_case_seeds(n_train: int, n_val: int, n_test: int) -> dict[str, list[int]]:
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for split, n in counts.items():
        if n < 1:
            raise ConfigError(f"split {split!r} needs at least 1 case, got {n}")
    return {
        split: [_SPLIT_SEED_BASE[split] + i for i in range(n)]
        for split, n in counts.items()
    }


def generate_dataset(
    spec: PhantomSpec,
    n_train: int,
    n_val: int,
    n_test: int,
    out_dir: str | Path,
    overwrite: bool = False,
) -> dict:
    """Write a full train/val/test phantom dataset plus its manifest.

    Case seeds are disjoint across splits; regeneration from the same spec
    is bit-exact.  Refuses to write into an existing populated directory
    unless ``overwrite`` is set.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise DataError(
            f"output directory {out_dir} is not empty; pass overwrite=True"
        )
    seeds = split_case_seeds(n_train, n_val, n_test)

    cases = []
    for split, case_seeds in seeds.items():
        for case_seed in case_seeds:
            case = generate_case(spec, case_seed)
            case_id = f"{split}_{case_seed:05d}"
            vol_rel = f"volumes/{case_id}.raw"
            volio.save_volume(case.volume, out_dir / vol_rel)
            mask_rels = {}
            for name, mask in case.masks.items():
                rel = f"masks/{case_id}_{name}.raw"
                volio.save_mask(mask, case.volume.spacing, out_dir / rel)
                mask_rels[name] = rel
            cases.append(
                {
                    "case_id": case_id,
                    "split": split,
                    "case_seed": case_seed,
                    "volume": vol_rel,
                    "masks": mask_rels,
                    "provenance": case.provenance,
                }
            )

    manifest = {
        "format_version": 1,
        "spec": asdict(spec),
        "spec_hash": spec.spec_hash(),
        "splits": {
            split: [c["case_id"] for c in cases if c["split"] == split]
            for split in seeds
        },
        "cases": cases,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )
    return manifest


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def spec_from_manifest(manifest: dict) -> PhantomSpec:
    raw = manifest["spec"]
    return PhantomSpec(
        grid_shape=tuple(raw["grid_shape"]),
        spacing=tuple(raw["spacing"]),
        organs=tuple(
            OrganSpec(
                o["name"],
                tuple(o["base_center"]),
                tuple(o["base_radii"]),
                o["intensity"],
            )
            for o in raw["organs"]
        ),
        jitter=JitterSpec(**raw["jitter"]),
        seed=raw["seed"],
    )


def case_entries(manifest: dict, split: str) -> list[dict]:
    ids = set(manifest["splits"][split])
    return [c for c in manifest["cases"] if c["case_id"] in ids]


def load_case(dataset_dir: str | Path, entry: dict) -> PhantomCase:
    root = Path(dataset_dir)
    volume = volio.load_volume(root / entry["volume"])
    masks = {}
    for name, rel in entry["masks"].items():
        mask, _ = volio.load_mask(root / rel)
        masks[name] = mask
    return PhantomCase(volume=volume, masks=masks, provenance=entry["provenance"])


def load_split_volumes(dataset_dir: str | Path, split: str) -> list[Volume]:
    manifest = load_manifest(dataset_dir)
    return [
        volio.load_volume(Path(dataset_dir) / e["volume"])
        for e in case_entries(manifest, split)
    ]
