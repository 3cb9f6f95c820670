"""Volume and mask readers/writers.

Native phantom format: a raw little-endian array file next to a JSON
sidecar manifest holding shape, spacing and intensity unit.  Volumes are
float32, masks uint8.  A reader for NIfTI-style medical volumes is
provided as an optional adapter (requires ``nibabel``); spacing is taken
from the affine header.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError, GeometryError
from .volgrid import Volume

_FORMAT_VERSION = 1


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_volume(vol: Volume, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vol.data.astype("<f4").tofile(path)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "dtype": "<f4",
        "shape": list(vol.shape),
        "spacing_mm": [float(s) for s in vol.spacing],
        "intensity_unit": vol.intensity_unit,
    }
    _sidecar(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    manifest = _read_manifest(path)
    if manifest.get("dtype") != "<f4":
        raise DataError(f"{path}: unsupported volume dtype {manifest.get('dtype')}")
    data = _read_raw(path, manifest, np.dtype("<f4"))
    return Volume(
        data=data,
        spacing=np.array(manifest["spacing_mm"], dtype=np.float64),
        intensity_unit=manifest.get("intensity_unit", "raw"),
    )


def save_mask(mask: np.ndarray, spacing, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise GeometryError(f"mask must be 3D, got shape {mask.shape}")
    mask.astype(np.uint8).tofile(path)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "dtype": "u1",
        "shape": list(mask.shape),
        "spacing_mm": [float(s) for s in np.asarray(spacing, dtype=np.float64)],
    }
    _sidecar(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_mask(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (boolean mask, spacing)."""
    path = Path(path)
    manifest = _read_manifest(path)
    if manifest.get("dtype") != "u1":
        raise DataError(f"{path}: unsupported mask dtype {manifest.get('dtype')}")
    data = _read_raw(path, manifest, np.dtype("u1"))
    return data.astype(bool), np.array(manifest["spacing_mm"], dtype=np.float64)


def load_medical_volume(path: str | Path) -> Volume:
    """Adapter for compressed medical volumes (.nii/.nii.gz) via nibabel.

    Spacing is extracted from the affine; data is reordered to (z, y, x).
    """
    try:
        import nibabel as nib
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DataError(
            "reading medical volume formats requires the optional 'nibabel' "
            "dependency; install it or convert to the native raw+JSON format"
        ) from exc
    img = nib.load(str(path))  # pragma: no cover
    data = np.asanyarray(img.dataobj).astype(np.float32)  # pragma: no cover
    zooms = img.header.get_zooms()[:3]  # pragma: no cover
    # nibabel returns (x, y, z); flip to axial-first (z, y, x).
    return Volume(  # pragma: no cover
        data=np.transpose(data, (2, 1, 0)),
        spacing=np.array(zooms[::-1], dtype=np.float64),
    )


def _read_manifest(path: Path) -> dict:
    side = _sidecar(path)
    if not path.exists() or not side.exists():
        raise DataError(f"missing volume file or sidecar manifest for {path}")
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt sidecar manifest {side}: {exc}") from exc


def _read_raw(path: Path, manifest: dict, dtype: np.dtype) -> np.ndarray:
    shape = tuple(int(s) for s in manifest["shape"])
    data = np.fromfile(path, dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise DataError(
            f"{path}: raw size {data.size} does not match manifest shape {shape}"
        )
    return data.reshape(shape)
