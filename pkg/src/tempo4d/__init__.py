"""Two-stage temporal super-resolution for 4D volumes.

Stage 1 generates intermediate frames of every 2D+t slice sequence with a
conditional diffusion denoiser; stage 2 restores cross-slice consistency
with tri-directional selective state space scans.
"""

from .config import EngineConfig, load_config, save_config
from .denoiser import ConditionPair, DenoiserConfig, init_denoiser, predict_eps
from .engine import run_pipeline, run_stage1, sample_sequence, train_stage1, train_stage2
from .losses import LossWeights, composite_sc_loss, haar_dwt3, haar_idwt3, tv_loss, wavelet_loss
from .metrics import MetricReport, mae, psnr, ssim
from .schedule import DdimPlan, NoiseSchedule, ddim_plan, ddim_step, linear_schedule, q_sample
from .ssm import TriDirConfig, enhance_volume, init_tridir, scan_order_transform, ssm_scan_parallel
from .synthetic import SyntheticSpec, make_synthetic
from .volume import Volume4D, load_volume4d, normalize_volume, save_volume4d, slice_to_2dt

__version__ = "0.1.0"

__all__ = [
    "ConditionPair", "DdimPlan", "DenoiserConfig", "EngineConfig", "LossWeights", "MetricReport",
    "NoiseSchedule", "SyntheticSpec", "TriDirConfig", "Volume4D", "composite_sc_loss", "ddim_plan",
    "ddim_step", "enhance_volume", "haar_dwt3", "haar_idwt3", "init_denoiser", "init_tridir",
    "linear_schedule", "load_config", "load_volume4d", "mae", "make_synthetic", "normalize_volume",
    "predict_eps", "psnr", "q_sample", "run_pipeline", "run_stage1", "sample_sequence", "save_config",
    "save_volume4d", "scan_order_transform", "slice_to_2dt", "ssim", "ssm_scan_parallel", "train_stage1",
    "train_stage2", "tv_loss", "wavelet_loss",
]
