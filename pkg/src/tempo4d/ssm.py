"""Selective state-space scans and the tri-directional consistency network.

Recurrence (diagonal state, per channel):

    h_t = A_t * h_{t-1} + B_t * x_t        h_0 = 0
    y_t = sum_k C_t[k] * h_t[k]

The parallel evaluation treats each step as the affine map ``h -> a*h + b``
and scans with the associative composition
``(a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2)`` using a work-efficient
up-sweep / down-sweep over a power-of-two padded sequence.

Volumes are laid out (Z, Y, X) in memory. Scan orders name the axes from
fastest to slowest:

    xyz  x fastest, then y, then z   (plain row-major flatten)
    yzx  y fastest, then z, then x
    zxy  z fastest, then x, then y
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor, as_tensor, concat, exp, layer_norm, linear_recurrence, softplus

ORDERS = ("xyz", "yzx", "zxy")

# spatial axes of a (Z, Y, X) grid, slowest first, for each scan order
_ORDER_AXES = {
    "xyz": (0, 1, 2),
    "yzx": (2, 0, 1),
    "zxy": (1, 2, 0),
}


# --------------------------------------------------------------------- scans
def _check_scan_inputs(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"decay shape {a.shape} does not match input shape {b.shape}")
    if a.ndim == 0 or a.shape[0] == 0:
        raise ValueError("scan needs a non-empty leading sequence axis")


def affine_scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Left-to-right ``h_t = a_t*h_{t-1} + b_t`` with ``h_0 = 0``."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_scan_inputs(a, b)
    h = np.empty_like(b)
    state = np.zeros_like(b[0])
    for t in range(a.shape[0]):
        state = a[t] * state + b[t]
        h[t] = state
    return h


def affine_scan_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same result as :func:`affine_scan_sequential` via a Blelloch scan.

    The sequence is padded to a power of two with identity maps (a=1, b=0).
    The up-sweep builds subtree compositions in place; the down-sweep turns
    them into exclusive prefixes, from which the inclusive state is one
    more affine application: ``h_t = a_t * prefix_t(0) + b_t``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_scan_inputs(a, b)
    n = a.shape[0]
    if n == 1:
        return b.copy()
    size = 1 << (n - 1).bit_length()
    A = np.ones((size,) + a.shape[1:], dtype=np.result_type(a, b))
    B = np.zeros_like(A)
    A[:n] = a
    B[:n] = b

    d = 1
    while d < size:
        left = slice(d - 1, size, 2 * d)
        right = slice(2 * d - 1, size, 2 * d)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[right] * A[left]
        d *= 2

    A[size - 1] = 1
    B[size - 1] = 0
    d = size // 2
    while d >= 1:
        left = slice(d - 1, size, 2 * d)
        right = slice(2 * d - 1, size, 2 * d)
        la, lb = A[left].copy(), B[left].copy()
        pa, pb = A[right].copy(), B[right].copy()
        A[left], B[left] = pa, pb
        A[right] = la * pa
        B[right] = la * pb + lb
        d //= 2

    return (a * B[:n] + b).astype(b.dtype, copy=False)


def _ssm_inputs(A_bar, B_bar, C_bar, x):
    A_bar, B_bar, C_bar, x = (np.asarray(v) for v in (A_bar, B_bar, C_bar, x))
    if not (A_bar.shape == B_bar.shape == C_bar.shape):
        raise ValueError(
            f"parameter shapes differ: A {A_bar.shape}, B {B_bar.shape}, C {C_bar.shape}"
        )
    if A_bar.shape[:-1] != x.shape:
        raise ValueError(
            f"input shape {x.shape} does not match parameter shape {A_bar.shape[:-1]} + (state,)"
        )
    return A_bar, B_bar, C_bar, x


def ssm_scan_sequential(A_bar, B_bar, C_bar, x) -> np.ndarray:
    """Reference recurrence; parameters are (L, ..., n), ``x`` is (L, ...)."""
    A_bar, B_bar, C_bar, x = _ssm_inputs(A_bar, B_bar, C_bar, x)
    h = affine_scan_sequential(A_bar, B_bar * x[..., None])
    return (C_bar * h).sum(axis=-1)


def ssm_scan_parallel(A_bar, B_bar, C_bar, x) -> np.ndarray:
    A_bar, B_bar, C_bar, x = _ssm_inputs(A_bar, B_bar, C_bar, x)
    h = affine_scan_parallel(A_bar, B_bar * x[..., None])
    return (C_bar * h).sum(axis=-1)


def bidirectional_scan(params_fwd, params_bwd, x, scan: Callable = ssm_scan_parallel) -> np.ndarray:
    """Forward scan plus the time-reversed scan of the reversed input.

    Each parameter set is an ``(A_bar, B_bar, C_bar)`` triple laid out in the
    direction that set scans, i.e. ``params_bwd[.][0]`` acts on ``x[-1]``.
    """
    x = np.asarray(x)
    fwd = scan(*params_fwd, x)
    bwd = scan(*params_bwd, x[::-1])
    return fwd + bwd[::-1]


# ------------------------------------------------------------- scan orders
def _order_axes(order: str) -> tuple[int, int, int]:
    try:
        return _ORDER_AXES[order]
    except KeyError:
        raise ValueError(f"unknown scan order {order!r}; expected one of {ORDERS}") from None


def scan_order_transform(volume: np.ndarray, order: str):
    """Flatten a (Z, Y, X, C) volume into a token sequence in ``order``.

    Returns ``(tokens, inverse)`` where ``tokens`` has shape (Z*Y*X, C) and
    ``inverse(tokens)`` restores the (Z, Y, X, C) layout.
    """
    axes = _order_axes(order)
    volume = np.asarray(volume)
    if volume.ndim != 4:
        raise ValueError(f"expected a (Z, Y, X, C) volume, got shape {volume.shape}")
    perm = axes + (3,)
    moved = volume.transpose(perm)
    moved_shape = moved.shape
    tokens = moved.reshape(-1, volume.shape[3])
    inv = tuple(np.argsort(perm))

    def inverse(seq: np.ndarray) -> np.ndarray:
        return np.asarray(seq).reshape(moved_shape).transpose(inv)

    return tokens, inverse


def _to_tokens(feats: Tensor, order: str) -> tuple[Tensor, tuple, tuple]:
    """(B, Z, Y, X, C) -> (L, B, C) in scan order."""
    sp = _order_axes(order)
    perm = tuple(1 + i for i in sp) + (0, 4)
    moved = feats.transpose(perm)
    shape = moved.shape
    return moved.reshape(-1, shape[3], shape[4]), shape, tuple(np.argsort(perm))


def _from_tokens(tokens: Tensor, shape: tuple, inv: tuple) -> Tensor:
    return tokens.reshape(shape).transpose(inv)


# ------------------------------------------------------------ configuration
@dataclass(frozen=True)
class TriDirConfig:
    channels: int = 8
    state_dim: int = 8
    blocks: int = 2

    def validate(self) -> None:
        if self.channels < 1 or self.state_dim < 1 or self.blocks < 0:
            raise ValueError(f"invalid tri-directional config {self}")


def _ssm_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{k}" for k in ("w_dt", "b_dt", "w_b", "w_c", "a")]


def init_tridir(cfg: TriDirConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters; the zero output projection makes the net the identity."""
    cfg.validate()
    C, n = cfg.channels, cfg.state_dim
    p: dict[str, np.ndarray] = {}

    def normal(shape, scale):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    p["lift.w"] = normal((C,), 1.0)
    p["lift.b"] = np.zeros(C, dtype)
    for r in range(cfg.blocks):
        blk = f"block{r}"
        p[f"{blk}.norm"] = np.ones(C, dtype)
        for d in ORDERS:
            pre = f"{blk}.{d}"
            p[f"{pre}.w_in"] = normal((C, C), 1.0 / np.sqrt(C))
            p[f"{pre}.w_out"] = normal((C, C), 1.0 / np.sqrt(C))
            for side in ("fwd", "bwd"):
                s = f"{pre}.{side}"
                p[f"{s}.w_dt"] = normal((C, C), 0.1 / np.sqrt(C))
                # softplus(b_dt) spans roughly [0.05, 0.5]
                dt0 = np.exp(rng.uniform(np.log(0.05), np.log(0.5), C))
                p[f"{s}.b_dt"] = np.log(np.expm1(dt0)).astype(dtype)
                p[f"{s}.w_b"] = normal((C, n), 1.0 / np.sqrt(C))
                p[f"{s}.w_c"] = normal((C, n), 1.0 / np.sqrt(C))
                rate = np.tile(np.arange(1, n + 1, dtype=np.float64), (C, 1))
                p[f"{s}.a"] = np.log(np.expm1(rate)).astype(dtype)
        p[f"{blk}.fuse.w"] = normal((3 * C, C), 1.0 / np.sqrt(3 * C))
        p[f"{blk}.fuse.b"] = np.zeros(C, dtype)
    p["proj.w"] = np.zeros(C, dtype)
    p["proj.b"] = np.zeros(1, dtype)
    return p


def config_from_params(params: dict[str, np.ndarray]) -> TriDirConfig:
    C = params["lift.w"].shape[0]
    blocks = sum(1 for k in params if k.endswith(".fuse.w"))
    n = params["block0.xyz.fwd.a"].shape[1] if blocks else 1
    return TriDirConfig(channels=C, state_dim=n, blocks=blocks)


# ------------------------------------------------------------------ forward
def _selective_ssm(z: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    """Input-dependent scan over z of shape (L, B, C)."""
    L, B, C = z.shape
    dt = softplus(z @ p[f"{prefix}.w_dt"] + p[f"{prefix}.b_dt"])
    Bm = z @ p[f"{prefix}.w_b"]
    Cm = z @ p[f"{prefix}.w_c"]
    n = Bm.shape[-1]
    rate = softplus(p[f"{prefix}.a"])
    decay = exp(-(dt.reshape(L, B, C, 1) * rate))
    drive = (dt * z).reshape(L, B, C, 1) * Bm.reshape(L, B, 1, n)
    h = linear_recurrence(decay, drive)
    return (h * Cm.reshape(L, B, 1, n)).sum(axis=-1)


def _direction(u: Tensor, p: dict[str, Tensor], prefix: str, order: str) -> Tensor:
    tokens, shape, inv = _to_tokens(u, order)
    z = tokens @ p[f"{prefix}.w_in"]
    y = _selective_ssm(z, p, f"{prefix}.fwd")
    y = y + _selective_ssm(z.flip(0), p, f"{prefix}.bwd").flip(0)
    y = y @ p[f"{prefix}.w_out"]
    return _from_tokens(y, shape, inv)


def _block(v: Tensor, p: dict[str, Tensor], blk: str, return_dirs: bool = False):
    u = layer_norm(v) * p[f"{blk}.norm"]
    dirs = [_direction(u, p, f"{blk}.{d}", d) for d in ORDERS]
    fused = concat(dirs, axis=-1) @ p[f"{blk}.fuse.w"] + p[f"{blk}.fuse.b"]
    out = v + fused
    return (out, dirs) if return_dirs else out


def _as_leaves(params: dict[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _batched(v: np.ndarray) -> tuple[np.ndarray, bool]:
    v = np.asarray(v)
    if v.ndim == 3:
        return v[None], True
    if v.ndim == 4:
        return v, False
    raise ValueError(f"expected a (Z, Y, X) volume or a (B, Z, Y, X) batch, got shape {v.shape}")


def tridir_block_forward(params: dict[str, np.ndarray], v: np.ndarray, prefix: str = "block0") -> np.ndarray:
    """One residual block on a (Z, Y, X, C) or (B, Z, Y, X, C) feature volume."""
    v = np.asarray(v)
    single = v.ndim == 4
    if single:
        v = v[None]
    if v.ndim != 5:
        raise ValueError(f"expected (Z, Y, X, C) features, got shape {v.shape}")
    C = params[f"{prefix}.norm"].shape[0]
    if v.shape[-1] != C:
        raise ValueError(f"feature channels {v.shape[-1]} != block channels {C}")
    leaves = _as_leaves(params, False)
    out = _block(Tensor(v), leaves, prefix).data
    return out[0] if single else out


def _net(v: Tensor, p: dict[str, Tensor], blocks: int) -> Tensor:
    B, Z, Y, X = v.shape
    feats = v.reshape(B, Z, Y, X, 1) * p["lift.w"] + p["lift.b"]
    for r in range(blocks):
        feats = _block(feats, p, f"block{r}")
    delta = feats @ p["proj.w"] + p["proj.b"]
    return v + delta


def enhance_volume(params: dict[str, np.ndarray], v: np.ndarray) -> np.ndarray:
    """Apply the consistency network to a (Z, Y, X) volume or a batch of them."""
    cfg = config_from_params(params)
    batch, single = _batched(v)
    if not np.all(np.isfinite(batch)):
        raise ValueError("input volume contains non-finite values")
    if np.abs(batch).max(initial=0.0) > 1.0 + 1e-6:
        raise ValueError("enhance_volume expects a volume normalized to [-1, 1]")
    out = _net(Tensor(batch), _as_leaves(params, False), cfg.blocks).data
    return out[0] if single else out


def tridir_forward_tensor(params: dict[str, Tensor], v: np.ndarray) -> Tensor:
    """Differentiable forward used by training; ``params`` are leaf tensors."""
    blocks = sum(1 for k in params if k.endswith(".fuse.w"))
    batch, _ = _batched(v)
    return _net(as_tensor(batch), params, blocks)


def tridir_backward(params: dict[str, np.ndarray], v: np.ndarray, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * enhance_volume(params, v))`` for every parameter."""
    leaves = _as_leaves(params, True)
    batch, single = _batched(v)
    out = tridir_forward_tensor(leaves, batch)
    up = np.asarray(upstream, dtype=out.dtype)
    if single:
        up = up[None]
    if up.shape != out.shape:
        raise ValueError(f"upstream gradient shape {up.shape} != output shape {out.shape}")
    out.backward(up)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
