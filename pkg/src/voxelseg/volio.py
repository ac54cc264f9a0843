"""Volume and exam data model plus the on-disk exam-bundle format.

An exam bundle is a directory holding ``meta.json`` and one raw
little-endian float32 file per volume (voxel order slice, row, col).
Masks are raw uint8 files with a small JSON sidecar.

Index convention everywhere in the package: ``(slice, row, col)``, the
slice axis being the sagittal through-plane axis.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

META_NAME = "meta.json"
_F32 = np.dtype("<f4")


class VolioError(Exception):
    """Base class for exam IO errors; ``code`` identifies the failure kind."""

    code = "volio_error"


class MissingFileError(VolioError):
    code = "missing_file"


class DimensionMismatchError(VolioError):
    code = "dimension_mismatch"


class NonMonotoneTimeError(VolioError):
    code = "non_monotone_time"


class NonFiniteError(VolioError):
    code = "non_finite"


class InvalidBundleError(VolioError):
    code = "invalid_bundle"


class UnwritablePathError(VolioError):
    code = "unwritable_path"


def _as_triple(values, kind=float) -> tuple:
    out = tuple(kind(v) for v in values)
    if len(out) != 3:
        raise InvalidBundleError(f"expected 3 components, got {len(out)}")
    return out


@dataclass(eq=False)
class Volume:
    """A 3D float32 scalar field with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvalidBundleError(f"volume must be 3D and non-empty, got shape {self.data.shape}")
        self.spacing = _as_triple(self.spacing)
        if min(self.spacing) <= 0:
            raise InvalidBundleError(f"spacing must be positive, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("volume contains non-finite values")

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.dims == other.dims
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(eq=False)
class SegmentationMask:
    """Binary voxel labeling, optionally restricted to one slice.

    ``source`` is one of ``"model"``, ``"consensus"``, ``"ground_truth"`` or
    ``"radiologist:<id>"``.
    """

    data: np.ndarray
    slice_index: Optional[int] = None
    source: str = "ground_truth"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise InvalidBundleError(f"mask must be 3D, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            vals = np.unique(arr)
            if not np.isin(vals, (0, 1)).all():
                raise InvalidBundleError("mask values must be 0 or 1")
        self.data = np.ascontiguousarray(arr, dtype=np.uint8)
        if self.slice_index is not None:
            self.slice_index = int(self.slice_index)
            if not 0 <= self.slice_index < arr.shape[0]:
                raise InvalidBundleError(f"slice_index {self.slice_index} outside {arr.shape[0]} slices")
            off = self.data.copy()
            off[self.slice_index] = 0
            if off.any():
                raise InvalidBundleError("2D mask has positive voxels outside its slice")

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    @property
    def rater_id(self) -> Optional[str]:
        if self.source.startswith("radiologist:"):
            return self.source.split(":", 1)[1]
        return None

    def slice2d(self, index: Optional[int] = None) -> np.ndarray:
        """Return the boolean 2D plane at ``index`` (default: own slice)."""
        k = self.slice_index if index is None else index
        if k is None:
            raise InvalidBundleError("mask has no slice index")
        return self.data[k].astype(bool)

    def __eq__(self, other):
        if not isinstance(other, SegmentationMask):
            return NotImplemented
        return (
            self.slice_index == other.slice_index
            and self.source == other.source
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class ExamBundle:
    """One breast exam: pre-contrast T1, post-contrast series, optional T2."""

    t1: Volume
    t1c_series: list
    t2: Optional[Volume] = None
    scanner_id: str = "unknown"
    laterality: str = "left"
    exam_id: str = "exam"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t1c_series = [(v, float(t)) for v, t in self.t1c_series]
        if not self.t1c_series:
            raise InvalidBundleError("exam needs at least one post-contrast volume")
        if self.laterality not in ("left", "right"):
            raise InvalidBundleError(f"laterality must be left or right, got {self.laterality!r}")
        dims = self.t1.dims
        for v in self.volumes().values():
            if v.dims != dims:
                raise DimensionMismatchError(f"volume dims {v.dims} differ from t1 dims {dims}")
        times = self.times
        if any(b <= a for a, b in zip(times, times[1:])):
            raise NonMonotoneTimeError(f"acquisition times not strictly increasing: {times}")

    @property
    def dims(self) -> tuple:
        return self.t1.dims

    @property
    def spacing(self) -> tuple:
        return self.t1.spacing

    @property
    def times(self) -> list:
        return [t for _, t in self.t1c_series]

    @property
    def t1c(self) -> Volume:
        """First post-contrast volume."""
        return self.t1c_series[0][0]

    def volumes(self) -> dict:
        vols = {"t1": self.t1}
        for i, (v, _) in enumerate(self.t1c_series):
            vols[f"t1c_{i}"] = v
        if self.t2 is not None:
            vols["t2"] = self.t2
        return vols

    def map_volumes(self, fn) -> "ExamBundle":
        """Apply ``fn`` to every volume, returning a new bundle."""
        return ExamBundle(
            t1=fn(self.t1),
            t1c_series=[(fn(v), t) for v, t in self.t1c_series],
            t2=None if self.t2 is None else fn(self.t2),
            scanner_id=self.scanner_id,
            laterality=self.laterality,
            exam_id=self.exam_id,
            notes=dict(self.notes),
        )

    def __eq__(self, other):
        if not isinstance(other, ExamBundle):
            return NotImplemented
        mine, theirs = self.volumes(), other.volumes()
        return (
            mine.keys() == theirs.keys()
            and all(mine[k] == theirs[k] for k in mine)
            and self.times == other.times
            and (self.scanner_id, self.laterality, self.exam_id) == (other.scanner_id, other.laterality, other.exam_id)
            and self.notes == other.notes
        )


def _write_raw(arr: np.ndarray, path: Path, dtype) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_raw(path: Path, dtype, dims) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing volume file {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=dtype)
    n = int(np.prod(dims))
    if raw.size != n:
        raise DimensionMismatchError(f"{path.name}: meta declares {tuple(dims)} ({n} values), file holds {raw.size}")
    return raw.reshape(dims).copy()


def write_exam(bundle: ExamBundle, path) -> None:
    """Write ``bundle`` to directory ``path`` (created if needed)."""
    path = Path(path)
    for name, v in bundle.volumes().items():
        if not np.isfinite(v.data).all():
            raise NonFiniteError(f"volume {name} contains non-finite values")
    try:
        path.mkdir(parents=True, exist_ok=True)
        if not os.access(path, os.W_OK):
            raise PermissionError(str(path))
        files = {}
        for name, v in bundle.volumes().items():
            fname = f"{name}.f32"
            _write_raw(v.data, path / fname, _F32)
            files[name] = fname
        if bundle.t2 is None:
            files["t2"] = None
        meta = {
            "dims": list(bundle.dims),
            "spacing_mm": list(bundle.spacing),
            "volumes": files,
            "times_min": bundle.times,
            "scanner_id": bundle.scanner_id,
            "laterality": bundle.laterality,
            "exam_id": bundle.exam_id,
        }
        if bundle.notes:
            meta["notes"] = bundle.notes
        (path / META_NAME).write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise UnwritablePathError(f"cannot write exam to {path}: {exc}") from exc


def read_exam(path) -> ExamBundle:
    """Load an exam bundle directory written by :func:`write_exam`."""
    path = Path(path)
    meta_path = path / META_NAME
    if not meta_path.is_file():
        raise MissingFileError(f"missing {META_NAME} in {path}")
    try:
        meta = json.loads(meta_path.read_text())
        dims = [int(d) for d in meta["dims"]]
        spacing = meta["spacing_mm"]
        files = meta["volumes"]
        times = [float(t) for t in meta["times_min"]]
    except (KeyError, ValueError, TypeError) as exc:
        raise InvalidBundleError(f"malformed meta in {path}: {exc}") from exc
    if any(b <= a for a, b in zip(times, times[1:])):
        raise NonMonotoneTimeError(f"acquisition times not strictly increasing: {times}")

    def load(name):
        data = _read_raw(path / files[name], _F32, dims)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{name} contains non-finite values")
        return Volume(data, spacing)

    posts = sorted((k for k in files if k.startswith("t1c_")), key=lambda k: int(k.split("_")[1]))
    if len(posts) != len(times):
        raise InvalidBundleError(f"{len(posts)} post-contrast files but {len(times)} timestamps")
    return ExamBundle(
        t1=load("t1"),
        t1c_series=[(load(k), t) for k, t in zip(posts, times)],
        t2=load("t2") if files.get("t2") else None,
        scanner_id=meta.get("scanner_id", "unknown"),
        laterality=meta.get("laterality", "left"),
        exam_id=meta.get("exam_id", path.name),
        notes=meta.get("notes", {}),
    )


def write_mask(mask: SegmentationMask, path) -> None:
    """Write ``mask`` as ``<path>.u8`` plus a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_raw(mask.data, path.with_suffix(".u8"), np.uint8)
    side = {"dims": list(mask.dims), "slice_index": mask.slice_index, "source": mask.source}
    path.with_suffix(".json").write_text(json.dumps(side))


def read_mask(path) -> SegmentationMask:
    path = Path(path)
    side_path = path.with_suffix(".json")
    if not side_path.is_file():
        raise MissingFileError(f"missing mask sidecar {side_path}")
    side = json.loads(side_path.read_text())
    data = _read_raw(path.with_suffix(".u8"), np.uint8, side["dims"])
    return SegmentationMask(data, side.get("slice_index"), side.get("source", "ground_truth"))


def write_volume(v: Volume, path) -> None:
    """Write a single float volume as ``<path>.f32`` with a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_raw(v.data, path.with_suffix(".f32"), _F32)
    path.with_suffix(".json").write_text(json.dumps({"dims": list(v.dims), "spacing_mm": list(v.spacing)}))


def read_volume(path) -> Volume:
    path = Path(path)
    side_path = path.with_suffix(".json")
    if not side_path.is_file():
        raise MissingFileError(f"missing volume sidecar {side_path}")
    side = json.loads(side_path.read_text())
    data = _read_raw(path.with_suffix(".f32"), _F32, side["dims"])
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{path} contains non-finite values")
    return Volume(data, side["spacing_mm"])


def crop(volume: Volume, origin: Sequence[int], size: Sequence[int]) -> Volume:
    """Copy the box ``[origin, origin + size)`` out of ``volume``.

    The caller is responsible for any padding; boxes reaching outside the
    volume raise ``IndexError``.
    """
    origin = _as_triple(origin, int)
    size = _as_triple(size, int)
    for o, s, d in zip(origin, size, volume.dims):
        if o < 0 or s < 1 or o + s > d:
            raise IndexError(f"crop box origin={origin} size={size} outside dims {volume.dims}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return Volume(volume.data[sl].copy(), volume.spacing)


def embed(target: Volume, patch: Volume, origin: Sequence[int]) -> Volume:
    """Return a copy of ``target`` with ``patch`` written at ``origin``."""
    origin = _as_triple(origin, int)
    for o, s, d in zip(origin, patch.dims, target.dims):
        if o < 0 or o + s > d:
            raise IndexError(f"patch at {origin} with dims {patch.dims} outside {target.dims}")
    out = target.data.copy()
    out[tuple(slice(o, o + s) for o, s in zip(origin, patch.dims))] = patch.data
    return Volume(out, target.spacing)
