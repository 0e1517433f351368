"""4D volume container, raw+sidecar file format and geometry transforms.

Index order is (t, z, y, x), row-major, everywhere.

File pair for a volume named ``case``::

    case.raw        T*Z*Y*X little-endian float32 samples, row-major (t, z, y, x)
    case.meta.json  {"shape": [T, Z, Y, X], "spacing": [...] | null,
                     "intensity_range": [lo, hi] | null, "normalized": bool,
                     "dtype": "<f4"}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RAW_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class VolumeMeta:
    shape: tuple[int, int, int, int]
    spacing: tuple[float, ...] | None = None
    intensity_range: tuple[float, float] | None = None
    normalized: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "shape": list(self.shape),
            "spacing": None if self.spacing is None else list(self.spacing),
            "intensity_range": None if self.intensity_range is None else list(self.intensity_range),
            "normalized": self.normalized,
            "dtype": RAW_DTYPE.str,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "VolumeMeta":
        try:
            doc = json.loads(text)
            shape = tuple(int(s) for s in doc["shape"])
            spacing = doc.get("spacing")
            irange = doc.get("intensity_range")
            dtype = doc.get("dtype", RAW_DTYPE.str)
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"corrupt volume metadata: {exc}") from exc
        if len(shape) != 4 or min(shape) < 1:
            raise ValueError(f"metadata shape must be 4 positive ints, got {shape}")
        if dtype != RAW_DTYPE.str:
            raise ValueError(f"unsupported payload dtype {dtype!r}")
        return cls(
            shape=shape,
            spacing=None if spacing is None else tuple(float(s) for s in spacing),
            intensity_range=None if irange is None else (float(irange[0]), float(irange[1])),
            normalized=bool(doc.get("normalized", False)),
        )


@dataclass(frozen=True)
class Volume4D:
    data: np.ndarray
    spacing: tuple[float, ...] | None = None
    intensity_range: tuple[float, float] | None = None
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"Volume4D data must be a non-empty (T, Z, Y, X) array, got {data.shape}")
        if self.spacing is not None:
            if len(self.spacing) not in (3, 4) or any(s <= 0 for s in self.spacing):
                raise ValueError(f"spacing must have 3 or 4 strictly positive entries, got {self.spacing}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def meta(self) -> VolumeMeta:
        return VolumeMeta(self.shape, self.spacing, self.intensity_range, self.normalized)

    def with_data(self, data: np.ndarray, **changes) -> "Volume4D":
        fields = dict(spacing=self.spacing, intensity_range=self.intensity_range, normalized=self.normalized)
        fields.update(changes)
        return Volume4D(data, **fields)


@dataclass(frozen=True)
class Slice2Dt:
    data: np.ndarray  # (t, y, x)
    z_index: int
    parent_shape: tuple[int, int, int, int]

    def __post_init__(self):
        if not 0 <= self.z_index < self.parent_shape[1]:
            raise ValueError(f"z_index {self.z_index} outside 0..{self.parent_shape[1] - 1}")


# ------------------------------------------------------------------- files
def volume_paths(path) -> tuple[Path, Path]:
    """``(raw, meta)`` paths for ``name``, ``name.raw`` or ``name.meta.json``."""
    p = Path(path)
    name = p.name
    for suffix in (".meta.json", ".raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".raw"), p.with_name(name + ".meta.json")


def save_volume4d(v: Volume4D, path) -> None:
    raw, meta = volume_paths(path)
    payload = np.ascontiguousarray(v.data, dtype=RAW_DTYPE).tobytes()
    raw.write_bytes(payload)
    meta.write_text(v.meta.to_json())


def load_volume4d(path) -> Volume4D:
    raw, meta_path = volume_paths(path)
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing metadata sidecar {meta_path}")
    meta = VolumeMeta.from_json(meta_path.read_text())
    payload = raw.read_bytes()
    expected = int(np.prod(meta.shape)) * RAW_DTYPE.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"payload length mismatch for {raw}: expected {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=RAW_DTYPE).reshape(meta.shape).astype(np.float32)
    return Volume4D(data, meta.spacing, meta.intensity_range, meta.normalized)


# --------------------------------------------------------------- intensity
def normalize_volume(v: Volume4D) -> Volume4D:
    """Min-max map to [-1, 1], recording the original range."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if not hi > lo:
        raise ValueError("cannot normalize a constant volume (max == min)")
    scaled = (v.data.astype(np.float64) - lo) / (hi - lo) * 2.0 - 1.0
    return v.with_data(np.clip(scaled, -1.0, 1.0), intensity_range=(lo, hi), normalized=True)


def denormalize_volume(v: Volume4D) -> Volume4D:
    if not v.normalized or v.intensity_range is None:
        return v
    lo, hi = v.intensity_range
    data = (v.data.astype(np.float64) + 1.0) * 0.5 * (hi - lo) + lo
    return v.with_data(data, normalized=False)


# ----------------------------------------------------------------- slicing
def slice_to_2dt(v: Volume4D, z: int) -> Slice2Dt:
    Z = v.shape[1]
    if not 0 <= z < Z:
        raise IndexError(f"slice index {z} outside 0..{Z - 1}")
    return Slice2Dt(v.data[:, z].copy(), int(z), v.shape)


def reassemble_3d(frames) -> np.ndarray:
    """Stack per-z 2D frames (all at one time point) into a (Z, Y, X) volume."""
    frames = [np.asarray(f) for f in frames]
    if not frames:
        raise ValueError("cannot reassemble an empty list of slices")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.ndim != 2 or f.shape != shape:
            raise ValueError(f"slice {i} has shape {f.shape}, expected {shape}")
    return np.stack(frames, axis=0)


def reassemble_4d(slices: list[Slice2Dt]) -> np.ndarray:
    """Inverse of slicing every z: (t, y, x) sequences -> (T, Z, Y, X)."""
    ordered = sorted(slices, key=lambda s: s.z_index)
    T = ordered[0].data.shape[0]
    return np.stack([reassemble_3d([s.data[t] for s in ordered]) for t in range(T)], axis=0)


def pad_z(v: Volume4D, target_z: int) -> Volume4D:
    """Zero-pad along z with the original slices centred (offset floor((target-Z)/2))."""
    T, Z, Y, X = v.shape
    if target_z < Z:
        raise ValueError(f"target_z {target_z} is smaller than current Z {Z}")
    if target_z == Z:
        return v
    out = np.zeros((T, target_z, Y, X), dtype=np.float32)
    off = (target_z - Z) // 2
    out[:, off:off + Z] = v.data
    return v.with_data(out)


def _resample_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_out == n_in:
        return a
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, hi, axis=axis) * frac


def resample_trilinear(v: Volume4D, new_shape: tuple[int, int, int]) -> Volume4D:
    """Per-frame align-corners trilinear resampling to (Z', Y', X')."""
    if len(new_shape) != 3 or any(int(s) < 1 for s in new_shape):
        raise ValueError(f"target shape must be three positive ints, got {new_shape}")
    if tuple(new_shape) == v.shape[1:]:
        return v
    out = v.data.astype(np.float64)
    for axis, n in zip((1, 2, 3), new_shape):
        out = _resample_axis(out, axis, int(n))
    spacing = v.spacing
    if spacing is not None:
        sp = list(spacing[-3:])
        for i, (n_in, n_out) in enumerate(zip(v.shape[1:], new_shape)):
            if n_out > 1 and n_in > 1:
                sp[i] = sp[i] * (n_in - 1) / (n_out - 1)
        spacing = tuple(spacing[:-3]) + tuple(sp)
    return v.with_data(out, spacing=spacing)
