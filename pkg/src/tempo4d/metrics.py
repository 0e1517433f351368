"""MAE / PSNR / SSIM and mean±std aggregation for evaluation tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, max_val: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``PSNR_CAP``."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    a, b = _pair(a, b)
    err = np.mean((a - b) ** 2)
    if err == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(max_val**2 / err), PSNR_CAP))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter2(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the last two axes."""
    rows = sliding_window_view(img, len(g), axis=-2) @ g
    return sliding_window_view(rows, len(g), axis=-1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, max_val: float = 2.0) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim < 2 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"in-plane size {a.shape[-2:]} is smaller than the {SSIM_WINDOW}-point window")
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    g = gaussian_window()
    mu_a, mu_b = _filter2(a, g), _filter2(b, g)
    var_a = _filter2(a * a, g) - mu_a * mu_a
    var_b = _filter2(b * b, g) - mu_b * mu_b
    cov = _filter2(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, max_val: float = 2.0) -> float:
    """Mean SSIM over (y, x) windows, computed per slice and averaged over leading axes."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    return float(np.mean(ssim_map(a, b, max_val)))


@dataclass
class MetricReport:
    cases: list[str] = field(default_factory=list)
    mae: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, case: str, a, b, max_val: float = 2.0) -> None:
        self.cases.append(case)
        self.mae.append(mae(a, b))
        self.psnr.append(psnr(a, b, max_val))
        self.ssim.append(ssim(a, b, max_val))

    def summary(self) -> dict[str, tuple[float, float]]:
        return {name: mean_std(getattr(self, name)) for name in ("mae", "psnr", "ssim")}

    def formatted(self) -> dict[str, str]:
        return {name: format_mean_std(*ms) for name, ms in self.summary().items()}

    def to_csv(self) -> str:
        lines = ["case,mae,psnr,ssim"]
        for row in zip(self.cases, self.mae, self.psnr, self.ssim):
            lines.append("{},{:.6f},{:.6f},{:.6f}".format(*row))
        f = self.formatted()
        lines.append(f"mean±std,{f['mae']},{f['psnr']},{f['ssim']}")
        return "\n".join(lines) + "\n"


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty set of cases")
    return float(v.mean()), float(v.std())


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def aggregate(reports) -> MetricReport:
    """Collect per-case ``{"case", "mae", "psnr", "ssim"}`` records into a report."""
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty set of cases")
    out = MetricReport()
    for i, r in enumerate(reports):
        out.cases.append(str(r.get("case", i)))
        out.mae.append(float(r["mae"]))
        out.psnr.append(float(r["psnr"]))
        out.ssim.append(float(r["ssim"]))
    return out
