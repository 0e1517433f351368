"""Token-transformer noise predictor conditioned on two boundary frames.

All ``N`` intermediate frames are denoised jointly. The clean boundary
frames are tokenized with the same patch embedding and placed at temporal
positions ``0`` and ``N + 1``; every token attends to every token of all
``N + 2`` frames. Only the intermediate positions are projected back to
pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, as_tensor, concat, gelu, layer_norm, softmax


@dataclass(frozen=True)
class DenoiserConfig:
    frame_size: tuple[int, int] = (16, 16)
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 4
    depth: int = 2
    n_intermediate: int = 10
    max_t: int = 1000
    mlp_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "frame_size", tuple(int(s) for s in self.frame_size))

    def validate(self) -> None:
        H, W = self.frame_size
        p = self.patch_size
        if p < 1 or H % p or W % p:
            raise ValueError(f"patch size {p} must divide frame size {self.frame_size}")
        if self.embed_dim < 1 or self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by num_heads {self.num_heads}")
        if self.n_intermediate < 1:
            raise ValueError("n_intermediate must be >= 1")
        if self.depth < 0 or self.max_t < 1 or self.mlp_ratio < 1:
            raise ValueError(f"invalid denoiser config {self}")

    @property
    def num_patches(self) -> int:
        H, W = self.frame_size
        return (H // self.patch_size) * (W // self.patch_size)

    @property
    def num_frames(self) -> int:
        return self.n_intermediate + 2


@dataclass(frozen=True)
class ConditionPair:
    """Clean boundary frames, each (H, W) or batched (B, H, W)."""

    I0: np.ndarray
    I1: np.ndarray

    def __post_init__(self):
        I0, I1 = np.asarray(self.I0), np.asarray(self.I1)
        if I0.shape != I1.shape:
            raise ValueError(f"boundary frames differ in shape: {I0.shape} vs {I1.shape}")
        for name, f in (("I0", I0), ("I1", I1)):
            if not np.all(np.isfinite(f)) or np.abs(f).max(initial=0.0) > 1.0 + 1e-6:
                raise ValueError(f"boundary frame {name} must be finite and lie in [-1, 1]")
        object.__setattr__(self, "I0", I0)
        object.__setattr__(self, "I1", I1)


# ------------------------------------------------------------- patch tokens
def patchify(frame: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W) -> (..., (H/p)*(W/p), p*p), patch grid in row-major order."""
    frame = np.asarray(frame)
    H, W = frame.shape[-2:]
    if p < 1 or H % p or W % p:
        raise ValueError(f"patch size {p} does not divide frame shape {(H, W)}")
    lead = frame.shape[:-2]
    k = len(lead)
    x = frame.reshape(lead + (H // p, p, W // p, p))
    x = x.transpose(tuple(range(k)) + (k, k + 2, k + 1, k + 3))
    return x.reshape(lead + ((H // p) * (W // p), p * p))


def unpatchify(tokens: np.ndarray, p: int, frame_size: tuple[int, int]) -> np.ndarray:
    tokens = np.asarray(tokens)
    H, W = frame_size
    lead = tokens.shape[:-2]
    k = len(lead)
    x = tokens.reshape(lead + (H // p, W // p, p, p))
    x = x.transpose(tuple(range(k)) + (k, k + 2, k + 1, k + 3))
    return x.reshape(lead + (H, W))


def _patchify_t(x: Tensor, p: int) -> Tensor:
    B, F, H, W = x.shape
    x = x.reshape(B, F, H // p, p, W // p, p).transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(B, F, (H // p) * (W // p), p * p)


def _unpatchify_t(x: Tensor, p: int, H: int, W: int) -> Tensor:
    B, F = x.shape[:2]
    x = x.reshape(B, F, H // p, W // p, p, p).transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(B, F, H, W)


def timestep_embedding(t, dim: int, max_t: int = 1000) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step; rows for an array of steps."""
    ts = np.atleast_1d(np.asarray(t))
    if ts.min() < 1 or ts.max() > max_t:
        raise ValueError(f"diffusion step outside 1..{max_t}: {t}")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = ts[:, None].astype(np.float64) * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(ts), 1))], axis=1)
    return emb if np.ndim(t) else emb[0]


# ---------------------------------------------------------------- parameters
def init_denoiser(cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    cfg.validate()
    d, p2 = cfg.embed_dim, cfg.patch_size**2
    m = cfg.mlp_ratio * d

    def normal(shape, scale=0.02):
        return (rng.standard_normal(shape) * scale).astype(dtype)

    def xavier(fan_in, fan_out):
        return normal((fan_in, fan_out), np.sqrt(2.0 / (fan_in + fan_out)))

    params = {
        "patch.w": xavier(p2, d),
        "patch.b": np.zeros(d, dtype),
        "pos.spatial": normal((cfg.num_patches, d)),
        "pos.temporal": normal((cfg.num_frames, d)),
        "time.w": xavier(d, d),
        "time.b": np.zeros(d, dtype),
    }
    for i in range(cfg.depth):
        b = f"blk{i}"
        params.update({
            f"{b}.ln1.g": np.ones(d, dtype),
            f"{b}.ln1.b": np.zeros(d, dtype),
            f"{b}.attn.qkv.w": xavier(d, 3 * d),
            f"{b}.attn.qkv.b": np.zeros(3 * d, dtype),
            f"{b}.attn.out.w": xavier(d, d),
            f"{b}.attn.out.b": np.zeros(d, dtype),
            f"{b}.ln2.g": np.ones(d, dtype),
            f"{b}.ln2.b": np.zeros(d, dtype),
            f"{b}.mlp.fc1.w": xavier(d, m),
            f"{b}.mlp.fc1.b": np.zeros(m, dtype),
            f"{b}.mlp.fc2.w": xavier(m, d),
            f"{b}.mlp.fc2.b": np.zeros(d, dtype),
        })
    params["final.ln.g"] = np.ones(d, dtype)
    params["final.ln.b"] = np.zeros(d, dtype)
    params["out.w"] = np.zeros((d, p2), dtype)
    params["out.b"] = np.zeros(p2, dtype)
    return params


# ------------------------------------------------------------------- forward
def _attention(x: Tensor, p: dict[str, Tensor], b: str, heads: int, attn_log: list | None):
    B, S, d = x.shape
    dh = d // heads
    qkv = (x @ p[f"{b}.attn.qkv.w"] + p[f"{b}.attn.qkv.b"]).reshape(B, S, 3, heads, dh)
    qkv = qkv.transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    weights = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
    if attn_log is not None:
        attn_log.append(weights.data)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
    return out @ p[f"{b}.attn.out.w"] + p[f"{b}.attn.out.b"]


def _check_inputs(cfg: DenoiserConfig, x_noisy, t, I0, I1):
    x = np.asarray(x_noisy)
    single = x.ndim == 3
    if single:
        x = x[None]
    H, W = cfg.frame_size
    N = cfg.n_intermediate
    if x.ndim != 4 or x.shape[1:] != (N, H, W):
        raise ValueError(f"noisy stack shape {np.shape(x_noisy)} does not match (N, H, W) = {(N, H, W)}")
    B = x.shape[0]
    I0 = np.broadcast_to(np.asarray(I0, x.dtype), (B, H, W)) if np.ndim(I0) == 2 else np.asarray(I0, x.dtype)
    I1 = np.broadcast_to(np.asarray(I1, x.dtype), (B, H, W)) if np.ndim(I1) == 2 else np.asarray(I1, x.dtype)
    if I0.shape != (B, H, W) or I1.shape != (B, H, W):
        raise ValueError(f"boundary frames must be (H, W) or (B, H, W) with H, W = {(H, W)}")
    ts = np.broadcast_to(np.asarray(t), (B,)).astype(np.int64)
    if ts.min() < 1 or ts.max() > cfg.max_t:
        raise ValueError(f"diffusion step outside 1..{cfg.max_t}: {t}")
    return x, ts, I0, I1, single


def forward_tensor(params: dict[str, Tensor], cfg: DenoiserConfig, x_noisy, t, I0, I1,
                   zero_pos: bool = False, attn_log: list | None = None) -> Tensor:
    """Differentiable forward on a batch: x_noisy (B, N, H, W) -> eps (B, N, H, W)."""
    x_t = as_tensor(x_noisy)
    B, N, H, W = x_t.shape
    p, d = cfg.patch_size, cfg.embed_dim
    ts = np.asarray(t)
    dtype = x_t.dtype

    frames = concat([as_tensor(np.asarray(I0)[:, None]), x_t, as_tensor(np.asarray(I1)[:, None])], axis=1)
    tok = _patchify_t(frames, p) @ params["patch.w"] + params["patch.b"]  # (B, F, P, d)
    if not zero_pos:
        F, P = cfg.num_frames, cfg.num_patches
        tok = tok + params["pos.spatial"].reshape(1, 1, P, d)
        tok = tok + params["pos.temporal"].reshape(1, F, 1, d)
    temb = Tensor(timestep_embedding(ts, d, cfg.max_t).astype(dtype))
    temb = temb @ params["time.w"] + params["time.b"]  # (B, d)
    tok = tok + temb.reshape(B, 1, 1, d)

    F, P = tok.shape[1], tok.shape[2]
    h = tok.reshape(B, F * P, d)
    for i in range(cfg.depth):
        b = f"blk{i}"
        h = h + _attention(layer_norm(h) * params[f"{b}.ln1.g"] + params[f"{b}.ln1.b"],
                           params, b, cfg.num_heads, attn_log)
        u = layer_norm(h) * params[f"{b}.ln2.g"] + params[f"{b}.ln2.b"]
        u = gelu(u @ params[f"{b}.mlp.fc1.w"] + params[f"{b}.mlp.fc1.b"])
        h = h + (u @ params[f"{b}.mlp.fc2.w"] + params[f"{b}.mlp.fc2.b"])
    h = layer_norm(h) * params["final.ln.g"] + params["final.ln.b"]
    inner = h.reshape(B, F, P, d)[:, 1:F - 1]
    out = inner @ params["out.w"] + params["out.b"]  # (B, N, P, p*p)
    return _unpatchify_t(out, p, H, W)


def _leaves(params: dict[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def predict_eps(params: dict[str, np.ndarray], cfg: DenoiserConfig, x_noisy, t, cond: ConditionPair,
                zero_pos: bool = False, return_attention: bool = False):
    """Noise estimate for the intermediate frames.

    ``x_noisy`` is (N, H, W) or (B, N, H, W); ``t`` is a step or one step per
    batch item. With ``return_attention`` the per-block attention weights
    (B, heads, S, S) are returned alongside.
    """
    x, ts, I0, I1, single = _check_inputs(cfg, x_noisy, t, cond.I0, cond.I1)
    log: list | None = [] if return_attention else None
    out = forward_tensor(_leaves(params, False), cfg, x, ts, I0, I1, zero_pos, log).data
    if single:
        out = out[0]
    return (out, log) if return_attention else out


def denoiser_backward(params: dict[str, np.ndarray], cfg: DenoiserConfig, x_noisy, t, cond: ConditionPair,
                      upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(upstream * predict_eps(...))`` w.r.t. parameters and ``x_noisy``.

    The forward pass is recomputed here, so no state needs to be kept
    between calls.
    """
    x, ts, I0, I1, single = _check_inputs(cfg, x_noisy, t, cond.I0, cond.I1)
    leaves = _leaves(params, True)
    x_leaf = Tensor(x, requires_grad=True)
    out = forward_tensor(leaves, cfg, x_leaf, ts, I0, I1)
    up = np.asarray(upstream, dtype=out.dtype)
    if single:
        up = up[None]
    if up.shape != out.shape:
        raise ValueError(f"upstream gradient shape {up.shape} != output shape {out.shape}")
    out.backward(up)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}
    gx = x_leaf.grad if x_leaf.grad is not None else np.zeros_like(x)
    return grads, (gx[0] if single else gx)
