"""Image-quality metrics, the training energy meter, and the metrics CSV.

The energy meter reproduces the cumulative-integration methodology:
instantaneous watts come from a pluggable external probe command (any
program printing one decimal number), with a constant-wattage fallback
so the pipeline behaves identically on machines without probes.
Cumulative kWh is the trapezoidal integral of the sampled trace.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ConfigurationError, UsageError
from .losses import LossBreakdown

# -- image quality -------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


def psnr(pred: np.ndarray, target: np.ndarray, cap: float = 100.0) -> float:
    """10*log10(1/MSE) for images in [0,1]; zero-MSE capped at `cap` dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigurationError(f"psnr shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean local SSIM: 11x11 Gaussian window (sigma 1.5), C1/C2 standard.

    Color inputs are reduced to luminance first; windows are 'valid'
    (fully inside the image).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigurationError(f"ssim shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 3:
        pred = pred @ _LUMA
        target = target @ _LUMA
    if min(pred.shape) < 11:
        raise ConfigurationError("image smaller than the 11x11 SSIM window")
    k = _gaussian_kernel()
    c1, c2 = 0.01**2, 0.03**2
    mu_x = convolve2d(pred, k, mode="valid")
    mu_y = convolve2d(target, k, mode="valid")
    xx = convolve2d(pred * pred, k, mode="valid") - mu_x * mu_x
    yy = convolve2d(target * target, k, mode="valid") - mu_y * mu_y
    xy = convolve2d(pred * target, k, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# -- energy meter ---------------------------------------------------------


@dataclass
class PowerSample:
    timestamp: float  # seconds, monotone within a trace
    watts: float
    source: str  # "external-probe" | "constant-model"


@dataclass
class EnergyMeter:
    """Trapezoidal cumulative energy over a sampled power trace."""

    power_command: str = ""
    constant_watts: float = 65.0
    sample_period: float = 5.0
    trace: list = field(default_factory=list)
    cumulative_kwh: float = 0.0
    probe_failed: bool = False

    def read_power(self) -> tuple[float, str]:
        if self.power_command:
            try:
                out = subprocess.run(
                    shlex.split(self.power_command), capture_output=True,
                    timeout=5.0, check=True, text=True,
                )
                return float(out.stdout.strip()), "external-probe"
            except (OSError, ValueError, subprocess.SubprocessError):
                self.probe_failed = True
        return float(self.constant_watts), "constant-model"

    def step(self, now: float, watts: float | None = None) -> float:
        """Record a sample at `now`; returns updated cumulative kWh."""
        if watts is None:
            watts, source = self.read_power()
        else:
            source = "external-probe"
        if watts < 0:
            raise ConfigurationError("power must be nonnegative")
        if self.trace:
            last = self.trace[-1]
            if now < last.timestamp:
                raise UsageError(
                    f"non-monotone energy timestamps: {now} < {last.timestamp}"
                )
            if now > last.timestamp:
                joules = 0.5 * (last.watts + watts) * (now - last.timestamp)
                self.cumulative_kwh += joules / 3.6e6
                self.trace.append(PowerSample(now, float(watts), source))
            # equal timestamps: no duration, no new sample needed
        else:
            self.trace.append(PowerSample(now, float(watts), source))
        return self.cumulative_kwh


# -- metrics CSV ------------------------------------------------------------

CSV_HEADER = ("iteration,wall_s,kwh,loss_total,loss_rgb,loss_eik,loss_curv,"
              "loss_mask,loss_gpl,loss_lps,psnr,ssim")
_TERM_COLUMNS = ("rgb", "eik", "curv", "mask", "gpl", "lps")


class MetricsWriter:
    """Append-only CSV with the documented column schema."""

    def __init__(self, path):
        self.path = path
        import os

        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w") as fh:
                fh.write(CSV_HEADER + "\n")

    def write_row(self, iteration: int, breakdown: LossBreakdown, kwh: float,
                  wall_s: float, psnr_value: float | None = None,
                  ssim_value: float | None = None):
        cols = [str(int(iteration)), repr(float(wall_s)), repr(float(kwh)),
                repr(float(breakdown.total))]
        for name in _TERM_COLUMNS:
            cols.append(repr(float(breakdown.terms.get(name, 0.0))))
        cols.append("" if psnr_value is None else repr(float(psnr_value)))
        cols.append("" if ssim_value is None else repr(float(ssim_value)))
        with open(self.path, "a") as fh:
            fh.write(",".join(cols) + "\n")


def read_metrics(path) -> dict[str, np.ndarray]:
    """Parse a metrics CSV back into named float columns (NaN for blanks)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    out = {}
    for j, name in enumerate(header):
        out[name] = np.array(
            [float(r[j]) if r[j] != "" else np.nan for r in rows], dtype=np.float64
        )
    return out
