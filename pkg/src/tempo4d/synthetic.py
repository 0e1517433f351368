"""Synthetic 4D sequences with exactly known intermediate frames.

Each case is a (frames, Z, Y, X) volume in [-1, 1]: a bright structure on a
dark background whose motion is linear in time, so every intermediate frame
is known in closed form. Stage-2 corruption shifts every odd z-slice
in-plane to mimic cross-slice misalignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume4D

KINDS = ("blob", "bar", "ellipse")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "blob"
    frames: int = 12
    size: tuple[int, int] = (16, 16)
    depth: int = 4
    motion: float = 4.0
    cases: int = 8

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}; expected one of {KINDS}")
        if self.frames < 3:
            raise ValueError("need at least 3 frames so intermediates exist")
        if len(self.size) != 2 or min(self.size) < 2 or self.depth < 1 or self.cases < 1:
            raise ValueError(f"invalid synthetic geometry {self}")
        if self.motion < 0:
            raise ValueError("motion amplitude must be non-negative")


@dataclass(frozen=True)
class SyntheticCase:
    name: str
    volume: Volume4D


def _grid(size):
    H, W = size
    return np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")


def _blob(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.size
    yy, xx = _grid(spec.size)
    sigma = rng.uniform(1.2, 1.8) * min(H, W) / 16.0
    angle = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.sin(angle), np.cos(angle)])
    centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0]) + rng.uniform(-0.5, 0.5, 2)
    out = np.empty((spec.frames, spec.depth) + spec.size)
    for t in range(spec.frames):
        frac = t / (spec.frames - 1) - 0.5
        cy, cx = centre + spec.motion * frac * direction
        for z in range(spec.depth):
            dz = (z - (spec.depth - 1) / 2.0) / max(spec.depth, 1)
            s = sigma * (1.0 - 0.6 * dz * dz)
            out[t, z] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out


def _soft(d: np.ndarray, width: float = 0.7) -> np.ndarray:
    return 0.5 * (1.0 - np.tanh(d / width))


def _bar(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.size
    yy, xx = _grid(spec.size)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    theta0 = rng.uniform(0, np.pi)
    half_len = 0.35 * min(H, W)
    out = np.empty((spec.frames, spec.depth) + spec.size)
    for t in range(spec.frames):
        # motion is the total rotation in units of 10 degrees
        theta = theta0 + np.deg2rad(10.0) * spec.motion * t / (spec.frames - 1)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        for z in range(spec.depth):
            half_w = 1.0 + 0.5 * z / max(spec.depth - 1, 1)
            out[t, z] = _soft(np.abs(v) - half_w) * _soft(np.abs(u) - half_len)
    return out


def _ellipse(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.size
    yy, xx = _grid(spec.size)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    base = rng.uniform(0.2, 0.3) * min(H, W)
    out = np.empty((spec.frames, spec.depth) + spec.size)
    for t in range(spec.frames):
        frac = t / (spec.frames - 1)
        ay = base + 0.5 * spec.motion * frac
        ax = base + 0.5 * spec.motion * (1.0 - frac)
        for z in range(spec.depth):
            shrink = 1.0 - 0.15 * abs(z - (spec.depth - 1) / 2.0)
            r = np.sqrt(((yy - cy) / (ay * shrink)) ** 2 + ((xx - cx) / (ax * shrink)) ** 2)
            out[t, z] = _soft((r - 1.0) * base)
    return out


_PATTERNS = {"blob": _blob, "bar": _bar, "ellipse": _ellipse}


def make_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> list[SyntheticCase]:
    """``spec.cases`` ground-truth sequences, already normalized to [-1, 1]."""
    spec.validate()
    cases = []
    for i in range(spec.cases):
        intensity = _PATTERNS[spec.kind](spec, rng)
        data = np.clip(2.0 * intensity - 1.0, -1.0, 1.0)
        vol = Volume4D(data, spacing=(1.0, 1.0, 1.0), intensity_range=(-1.0, 1.0), normalized=True)
        cases.append(SyntheticCase(f"{spec.kind}{i:03d}", vol))
    return cases


def inject_misalignment(volumes: np.ndarray, offsets=(1.0, 0.0)) -> np.ndarray:
    """Shift every odd z-slice by ``offsets`` = (dy, dx) voxels.

    Works on (..., Z, Y, X); edges are filled with the nearest value.
    """
    volumes = np.asarray(volumes)
    dy, dx = (float(o) for o in offsets)
    if dy == 0.0 and dx == 0.0:
        return volumes.copy()
    out = volumes.copy()
    lead = volumes.shape[:-3]
    Z = volumes.shape[-3]
    for idx in np.ndindex(*lead):
        for z in range(1, Z, 2):
            out[idx + (z,)] = ndimage.shift(volumes[idx + (z,)], (dy, dx), order=1, mode="nearest")
    return out


def centroid(frame: np.ndarray) -> np.ndarray:
    """Intensity centroid (y, x) of a [-1, 1] frame measured above the background."""
    w = np.asarray(frame, dtype=np.float64) + 1.0
    yy, xx = _grid(w.shape)
    total = w.sum()
    return np.array([(w * yy).sum() / total, (w * xx).sum() / total])
