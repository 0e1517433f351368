"""Training objectives.

Every loss is written once against :class:`~tempo4d.autograd.Tensor` so the
training loops get exact gradients; the plain-array wrappers evaluate the same
code in float64 and return Python floats.

Volumes are (Z, Y, X) or batched (B, Z, Y, X); spatial ops act on the last
three axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, as_tensor, concat

_SQRT_HALF = float(1.0 / np.sqrt(2.0))


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    wavelet: float = 1.0
    tv: float = 1.0

    def __post_init__(self):
        for name in ("mse", "wavelet", "tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class HaarPyramid:
    """Approximation band of the coarsest level plus 7 detail bands per level.

    ``details[0]`` is the finest level; band keys spell the filter applied
    along (z, y, x), e.g. ``"lhh"``.
    """

    approx: object
    details: list[dict[str, object]] = field(default_factory=list)

    def bands(self) -> list:
        out = [self.approx]
        for level in self.details:
            out.extend(level[k] for k in sorted(level))
        return out


def _check_same(a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def _f64(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _axis_slices(ndim: int, axis: int, start: int, stop=None, step=None):
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop, step)
    return tuple(idx)


# ------------------------------------------------------------- pointwise
def mse_t(a: Tensor, b) -> Tensor:
    _check_same(a.data if isinstance(a, Tensor) else a, b.data if isinstance(b, Tensor) else b)
    return (as_tensor(a) - as_tensor(b, as_tensor(a).dtype)).square().mean()


def eps_loss(eps_hat, eps_true) -> float:
    """Mean squared error between predicted and injected noise."""
    return float(mse_t(_f64(eps_hat), _f64(eps_true)).data)


def mse_loss(a, b) -> float:
    return float(mse_t(_f64(a), _f64(b)).data)


# ------------------------------------------------------------------ haar
def _haar_axis(x: Tensor, axis: int) -> tuple[Tensor, Tensor]:
    even = x[_axis_slices(x.ndim, axis, 0, None, 2)]
    odd = x[_axis_slices(x.ndim, axis, 1, None, 2)]
    return (even + odd) * _SQRT_HALF, (even - odd) * _SQRT_HALF


def _check_levels(shape, levels: int) -> None:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if len(shape) < 3:
        raise ValueError(f"expected a 3D volume, got shape {shape}")
    m = 2**levels
    if any(s % m for s in shape[-3:]):
        raise ValueError(f"spatial dims {shape[-3:]} must be divisible by 2**levels = {m}")


def haar_dwt3_t(v: Tensor, levels: int) -> HaarPyramid:
    _check_levels(v.shape, levels)
    nd = v.ndim
    details = []
    approx = v
    for _ in range(levels):
        bands = {"": approx}
        for axis in (nd - 3, nd - 2, nd - 1):
            nxt = {}
            for key, arr in bands.items():
                lo, hi = _haar_axis(arr, axis)
                nxt[key + "l"] = lo
                nxt[key + "h"] = hi
            bands = nxt
        approx = bands.pop("lll")
        details.append(bands)
    return HaarPyramid(approx, details)


def haar_dwt3(v, levels: int = 2) -> HaarPyramid:
    """Orthonormal separable 3D Haar analysis.

    A constant volume of value ``c`` has approximation ``c * 2**(1.5*levels)``
    and exactly zero detail bands.
    """
    pyr = haar_dwt3_t(_f64(v), levels)
    return HaarPyramid(pyr.approx.data, [{k: t.data for k, t in lvl.items()} for lvl in pyr.details])


def _interleave(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    shape = list(lo.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=np.result_type(lo, hi))
    out[_axis_slices(out.ndim, axis, 0, None, 2)] = (lo + hi) * _SQRT_HALF
    out[_axis_slices(out.ndim, axis, 1, None, 2)] = (lo - hi) * _SQRT_HALF
    return out


def haar_idwt3(pyr: HaarPyramid) -> np.ndarray:
    approx = np.asarray(pyr.approx)
    nd = approx.ndim
    for level in reversed(pyr.details):
        bands = dict(level)
        bands["lll"] = approx
        for depth, axis in ((2, nd - 1), (1, nd - 2), (0, nd - 3)):
            merged = {}
            for key in {k[:depth] for k in bands}:
                merged[key] = _interleave(bands[key + "l"], bands[key + "h"], axis)
            bands = merged
        approx = bands[""]
    return approx


def wavelet_t(a: Tensor, b, levels: int) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_same(a.data, b.data)
    diff = a - b
    pyr = haar_dwt3_t(diff, levels)
    flat = [band.reshape(-1) for band in pyr.bands()]
    return concat(flat, axis=0).abs().mean()


def wavelet_loss(a, b, levels: int = 2) -> float:
    """Mean absolute difference over all Haar subband coefficients.

    The transform is linear, so coefficients of ``a - b`` equal the
    difference of the two pyramids.
    """
    return float(wavelet_t(_f64(a), _f64(b), levels).data)


# -------------------------------------------------------------------- tv
def tv_t(v: Tensor) -> Tensor:
    v = as_tensor(v)
    if v.ndim < 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    nd = v.ndim
    total = None
    count = 0
    for axis in (nd - 3, nd - 2, nd - 1):
        if v.shape[axis] < 2:
            continue
        d = v[_axis_slices(nd, axis, 1)] - v[_axis_slices(nd, axis, 0, -1)]
        s = d.abs().sum()
        total = s if total is None else total + s
        count += d.data.size
    if total is None:
        return Tensor(np.zeros((), dtype=v.dtype), (v,), lambda g: (np.zeros(v.shape, v.dtype),))
    return total * (1.0 / count)


def tv_loss(v) -> float:
    """Anisotropic TV: mean |forward difference| over all z, y, x neighbour pairs."""
    return float(tv_t(_f64(v)).data)


# ------------------------------------------------------------- composite
def composite_sc_t(pred: Tensor, target, w: LossWeights, levels: int) -> tuple[Tensor, dict[str, Tensor]]:
    terms = {
        "mse": mse_t(pred, target),
        "wavelet": wavelet_t(pred, target, levels),
        "tv": tv_t(pred),
    }
    total = terms["mse"] * w.mse + terms["wavelet"] * w.wavelet + terms["tv"] * w.tv
    return total, terms


def composite_sc_loss(pred, target, w: LossWeights = LossWeights(), levels: int = 2) -> tuple[float, dict[str, float]]:
    """Weighted MSE + wavelet + TV; TV acts on the prediction alone."""
    total, terms = composite_sc_t(_f64(pred), _f64(target), w, levels)
    breakdown = {k: float(t.data) for k, t in terms.items()}
    breakdown["total"] = float(total.data)
    return breakdown["total"], breakdown
