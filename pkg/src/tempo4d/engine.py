"""Two-stage orchestration: temporal super-resolution, then volumetric enhancement.

Randomness is always derived from ``(seed, purpose, index)`` tuples, so a run
is reproducible step by step and training can resume from any checkpoint
without replaying earlier draws.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import schedule as sched
from .autograd import Tensor
from .checkpoint import load_checkpoint, params_hash, save_checkpoint
from .config import EngineConfig, config_to_dict
from .denoiser import ConditionPair, DenoiserConfig, forward_tensor, init_denoiser, predict_eps
from .losses import composite_sc_t, mse_t
from .optim import AdamState, adam_step, lr_schedule
from .ssm import enhance_volume, init_tridir, tridir_forward_tensor
from .synthetic import SyntheticCase, inject_misalignment
from .volume import Volume4D, denormalize_volume, normalize_volume

log = logging.getLogger(__name__)

# purpose tags mixed into seed sequences
_STAGE1_STEP = 1
_SAMPLE = 2
_STAGE2_EPOCH = 3
_INIT = 4

# slices sampled together per batch in deterministic mode
_DET_CHUNK = 4


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def make_schedule(cfg: EngineConfig) -> sched.NoiseSchedule:
    s = cfg.schedule
    return sched.linear_schedule(s.T, s.beta_start, s.beta_end, s.sigma_rule)


def make_plan(cfg: EngineConfig, schedule: sched.NoiseSchedule) -> sched.DdimPlan:
    return sched.ddim_plan(schedule, cfg.schedule.ddim_steps, cfg.schedule.eta)


@dataclass
class TrainLog:
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.columns), extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ------------------------------------------------------------------ stage 1
def stage1_sequences(cases: list[SyntheticCase] | list[Volume4D]) -> np.ndarray:
    """Every z-slice of every case as a 2Dt sequence: (M, frames, H, W)."""
    seqs = []
    for c in cases:
        v = c.volume if isinstance(c, SyntheticCase) else c
        seqs.extend(v.data[:, z] for z in range(v.shape[1]))
    if not seqs:
        raise ValueError("dataset is empty")
    return np.stack(seqs).astype(np.float32)


def _stage1_meta(cfg: EngineConfig, step: int) -> dict:
    return {"kind": "stage1", "step": step, "config": config_to_dict(cfg)}


def save_stage1(path, cfg: EngineConfig, params, state: AdamState | None = None, step: int = 0) -> None:
    tensors = dict(params)
    meta = _stage1_meta(cfg, step)
    if state is not None:
        tensors.update({f"adam.m.{k}": v for k, v in state.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in state.v.items()})
        meta["adam_step"] = state.step
    save_checkpoint(path, tensors, meta)


def load_stage1(path) -> tuple[dict, AdamState, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "stage1":
        raise ValueError(f"{path} is not a stage-1 checkpoint")
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    state = AdamState(
        {k[len("adam.m."):]: v.copy() for k, v in tensors.items() if k.startswith("adam.m.")},
        {k[len("adam.v."):]: v.copy() for k, v in tensors.items() if k.startswith("adam.v.")},
        int(meta.get("adam_step", 0)),
    )
    return {k: v.copy() for k, v in params.items()}, state, meta


def stage1_loss_and_grads(params, dcfg: DenoiserConfig, schedule, batch: np.ndarray,
                          ts: np.ndarray, noise: np.ndarray):
    """eps-MSE on one batch of (B, N+2, H, W) sequences; returns (loss, grads)."""
    I0, x0, I1 = batch[:, 0], batch[:, 1:-1], batch[:, -1]
    x_t = sched.q_sample(schedule, x0, ts, noise).astype(batch.dtype)
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    eps_hat = forward_tensor(leaves, dcfg, x_t, ts, I0, I1)
    loss = mse_t(eps_hat, noise)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


def train_stage1(cfg: EngineConfig, sequences: np.ndarray, resume=None, checkpoint_path=None,
                 log_path=None, steps: int | None = None):
    """ε-prediction training of the denoiser.

    Each step draws a batch of sequences (with a random temporal window when
    they are longer than N+2 frames), a uniform diffusion step per item and
    Gaussian noise for the intermediate frames. Returns ``(params, log)``.
    """
    dcfg = cfg.denoiser
    F = dcfg.num_frames
    sequences = np.asarray(sequences, dtype=np.float32)
    if sequences.ndim != 4 or len(sequences) == 0:
        raise ValueError("stage-1 dataset must be a non-empty (M, frames, H, W) array")
    if sequences.shape[1] < F:
        raise ValueError(f"sequences need >= {F} frames, got {sequences.shape[1]}")
    if sequences.shape[2:] != dcfg.frame_size:
        raise ValueError(f"frame size {sequences.shape[2:]} != configured {dcfg.frame_size}")

    schedule = make_schedule(cfg)
    total = cfg.train.stage1_steps if steps is None else steps
    if resume is not None:
        params, state, meta = load_stage1(resume)
        start = int(meta["step"])
    else:
        params = init_denoiser(dcfg, _rng(cfg.seed, _INIT, 1))
        state = AdamState.zeros_like(params)
        start = 0

    train_log = TrainLog(("step", "loss", "lr", "t_mean"))
    M, T_seq = len(sequences), sequences.shape[1]
    B = cfg.train.batch_size
    for step in range(start + 1, total + 1):
        rng = _rng(cfg.seed, _STAGE1_STEP, step)
        idx = rng.integers(0, M, B)
        offs = rng.integers(0, T_seq - F + 1, B)
        batch = np.stack([sequences[i, o:o + F] for i, o in zip(idx, offs)])
        ts = rng.integers(1, schedule.T + 1, B)
        noise = rng.standard_normal((B, dcfg.n_intermediate) + dcfg.frame_size).astype(np.float32)
        loss, grads = stage1_loss_and_grads(params, dcfg, schedule, batch, ts, noise)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite stage-1 loss at step {step}")
        lr = lr_schedule(1, step, max(total, 1), cfg.optim.lr)
        o = cfg.optim
        adam_step(params, grads, state, lr, o.beta1, o.beta2, o.eps)
        train_log.append(step=step, loss=loss, lr=lr, t_mean=float(ts.mean()))
        if step % 200 == 0:
            log.info("stage1 step %d loss %.5f", step, loss)
        if checkpoint_path is not None and step % cfg.train.checkpoint_every == 0:
            save_stage1(checkpoint_path, cfg, params, state, step)
    if checkpoint_path is not None:
        save_stage1(checkpoint_path, cfg, params, state, max(total, start))
    if log_path is not None:
        train_log.write_csv(log_path)
    return params, train_log


# ---------------------------------------------------------------- sampling
def sample_sequence(params, dcfg: DenoiserConfig, schedule: sched.NoiseSchedule, plan: sched.DdimPlan,
                    I0, I1, rng, clip: bool = True) -> np.ndarray:
    """DDIM sampling of the N intermediate frames between boundary frames.

    ``I0``/``I1`` are (H, W) or (B, H, W). ``rng`` is one Generator, or one
    per batch item so each item's draws do not depend on how items are
    batched together.
    """
    I0 = np.asarray(I0, dtype=np.float32)
    I1 = np.asarray(I1, dtype=np.float32)
    cond = ConditionPair(I0, I1)
    single = I0.ndim == 2
    B = 1 if single else I0.shape[0]
    shape = (dcfg.n_intermediate,) + dcfg.frame_size
    if I0.shape[-2:] != dcfg.frame_size:
        raise ValueError(f"boundary frame shape {I0.shape[-2:]} != configured {dcfg.frame_size}")
    rngs = list(rng) if isinstance(rng, (list, tuple)) else None
    if rngs is not None and len(rngs) != B:
        raise ValueError(f"got {len(rngs)} generators for a batch of {B}")

    def draw():
        if rngs is None:
            return rng.standard_normal((B,) + shape).astype(np.float32)
        return np.stack([r.standard_normal(shape) for r in rngs]).astype(np.float32)

    x = draw()
    ts = plan.timesteps
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        t_prev = ts[i - 1] if i > 0 else 0
        eps = predict_eps(params, dcfg, x, np.full(B, t), ConditionPair(
            np.broadcast_to(cond.I0, (B,) + dcfg.frame_size), np.broadcast_to(cond.I1, (B,) + dcfg.frame_size)))
        noise = draw() if plan.eta > 0 else None
        x = sched.ddim_step(schedule, x, t, t_prev, eps, plan.eta, noise).astype(np.float32)
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return x[0] if single else x


def run_stage1(cfg: EngineConfig, params, volume: np.ndarray, case_id: int = 0, jobs: int = 1) -> np.ndarray:
    """Generate all intermediate frames of a normalized (T, Z, Y, X) case.

    Only frames 0 and -1 are read. Returns (N+2, Z, Y, X) with the boundary
    frames copied through unchanged.
    """
    dcfg = cfg.denoiser
    schedule = make_schedule(cfg)
    plan = make_plan(cfg, schedule)
    volume = np.asarray(volume, dtype=np.float32)
    Z = volume.shape[1]
    I0, I1 = volume[0], volume[-1]

    def run(zs):
        rngs = [_rng(cfg.seed, _SAMPLE, case_id, z) for z in zs]
        return sample_sequence(params, dcfg, schedule, plan, I0[zs], I1[zs], rngs)

    if cfg.deterministic:
        # batch composition fixed independently of the worker count
        chunks = [list(range(z, min(z + _DET_CHUNK, Z))) for z in range(0, Z, _DET_CHUNK)]
    else:
        chunks = [list(c) for c in np.array_split(np.arange(Z), max(1, min(jobs, Z)))]
    if jobs <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, chunks))
    gen = np.concatenate(parts, axis=0)  # (Z, N, Y, X)
    out = np.empty((dcfg.num_frames, Z) + volume.shape[2:], dtype=np.float32)
    out[0] = I0
    out[-1] = I1
    out[1:-1] = gen.transpose(1, 0, 2, 3)
    return out


# ------------------------------------------------------------------ stage 2
def save_stage2(path, cfg: EngineConfig, params, epoch: int = 0) -> None:
    save_checkpoint(path, params, {"kind": "stage2", "epoch": epoch, "config": config_to_dict(cfg)})


def load_stage2(path) -> dict:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "stage2":
        raise ValueError(f"{path} is not a stage-2 checkpoint")
    return {k: v.copy() for k, v in tensors.items()}


def fresh_stage2(cfg: EngineConfig) -> dict:
    return init_tridir(cfg.tridir, _rng(cfg.seed, _INIT, 2))


@dataclass
class Stage2Data:
    inputs: np.ndarray   # (cases, frames, Z, Y, X) stage-1 output after misalignment injection
    targets: np.ndarray  # ground truth, same shape


def prepare_stage2(cfg: EngineConfig, denoiser_params, cases, first_id: int = 0) -> Stage2Data:
    inputs, targets = [], []
    for i, c in enumerate(cases):
        v = c.volume.data if isinstance(c, SyntheticCase) else np.asarray(c.data if isinstance(c, Volume4D) else c)
        gen = run_stage1(cfg, denoiser_params, v, case_id=first_id + i)
        inputs.append(inject_misalignment(gen, cfg.train.misalign_offsets))
        targets.append(v)
    return Stage2Data(np.stack(inputs).astype(np.float32), np.stack(targets).astype(np.float32))


def _validate(cfg: EngineConfig, params, val: Stage2Data) -> tuple[float, float]:
    """Mean composite loss and mean MSE of enhanced validation volumes."""
    sc, mse = [], []
    leaves = {k: Tensor(v) for k, v in params.items()}
    for x, y in zip(val.inputs, val.targets):
        out = tridir_forward_tensor(leaves, x)
        total, terms = composite_sc_t(out, y.astype(out.dtype), cfg.loss.weights, cfg.loss.wavelet_levels)
        sc.append(float(total.data))
        mse.append(float(terms["mse"].data))
    return float(np.mean(sc)), float(np.mean(mse))


def train_stage2(cfg: EngineConfig, denoiser_params, train_cases, val_cases, checkpoint_path=None,
                 log_path=None, epochs: int | None = None):
    """Train the consistency network on stage-1 outputs with the denoiser frozen.

    Stage-1 sampling is deterministic for a fixed seed, so its outputs are
    generated once and reused every epoch. Returns ``(params, log, history)``
    where ``history`` holds per-epoch validation values, epoch 0 being the
    untrained network.
    """
    if not train_cases:
        raise ValueError("stage-2 training needs at least one case")
    frozen = params_hash(denoiser_params)
    data = prepare_stage2(cfg, denoiser_params, train_cases, 0)
    val = prepare_stage2(cfg, denoiser_params, val_cases, len(train_cases)) if val_cases else data

    params = fresh_stage2(cfg)
    state = AdamState.zeros_like(params)
    n_epochs = cfg.train.stage2_epochs if epochs is None else epochs
    total_steps = max(n_epochs * len(data.inputs), 1)
    train_log = TrainLog(("step", "epoch", "mse", "wavelet", "tv", "total", "lr"))
    history = TrainLog(("epoch", "val_sc", "val_mse"))
    v_sc, v_mse = _validate(cfg, params, val)
    history.append(epoch=0, val_sc=v_sc, val_mse=v_mse)

    step = 0
    o = cfg.optim
    for epoch in range(1, n_epochs + 1):
        order = _rng(cfg.seed, _STAGE2_EPOCH, epoch).permutation(len(data.inputs))
        for i in order:
            lr = lr_schedule(2, step, total_steps, o.lr)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            out = tridir_forward_tensor(leaves, data.inputs[i])
            total, terms = composite_sc_t(out, data.targets[i], cfg.loss.weights, cfg.loss.wavelet_levels)
            if not np.isfinite(total.data):
                raise FloatingPointError(f"non-finite stage-2 loss at epoch {epoch}")
            total.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
            adam_step(params, grads, state, lr, o.beta1, o.beta2, o.eps)
            step += 1
            train_log.append(step=step, epoch=epoch, lr=lr, total=float(total.data),
                             **{k: float(t.data) for k, t in terms.items()})
        v_sc, v_mse = _validate(cfg, params, val)
        history.append(epoch=epoch, val_sc=v_sc, val_mse=v_mse)
        log.info("stage2 epoch %d val_sc %.5f val_mse %.6f", epoch, v_sc, v_mse)
        if checkpoint_path is not None:
            save_stage2(checkpoint_path, cfg, params, epoch)

    if params_hash(denoiser_params) != frozen:
        raise RuntimeError("stage-1 parameters changed during stage-2 training")
    if checkpoint_path is not None:
        save_stage2(checkpoint_path, cfg, params, n_epochs)
    if log_path is not None:
        train_log.write_csv(log_path)
    return params, train_log, history


# ----------------------------------------------------------------- pipeline
@dataclass
class PipelineResult:
    stage1: np.ndarray    # normalized (N+2, Z, Y, X)
    enhanced: np.ndarray  # normalized (N+2, Z, Y, X)
    volume: Volume4D      # enhanced output in the input's intensity units


def run_pipeline(cfg: EngineConfig, case: Volume4D, denoiser_params, tridir_params,
                 case_id: int = 0, jobs: int = 1) -> PipelineResult:
    """Two boundary frames in, an (N+2)-frame enhanced sequence out."""
    if case.shape[0] < 2:
        raise ValueError("a case needs at least two frames (the boundaries)")
    norm = case if case.normalized else normalize_volume(case)
    stage1 = run_stage1(cfg, denoiser_params, norm.data, case_id, jobs)
    enhanced = enhance_volume(tridir_params, stage1)
    out = norm.with_data(enhanced)
    return PipelineResult(stage1, enhanced, denormalize_volume(out) if not case.normalized else out)


