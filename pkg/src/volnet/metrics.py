"""RMSE / PSNR / 3D SSIM and the report format used by the CLI."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PEAK = 255.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b):
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr_from_rmse(err, peak=PEAK):
    if err < 0:
        raise ValueError("rmse must be non-negative")
    return math.inf if err == 0 else 20.0 * math.log10(peak / err)


def psnr(a, b, peak=PEAK):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    return psnr_from_rmse(rmse(a, b), peak)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(v, g):
    # separable valid-mode filtering over the last three axes
    for ax in (-3, -2, -1):
        win = sliding_window_view(v, g.size, axis=ax)
        v = win @ g
    return v


def ssim(a, b, peak=PEAK, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local SSIM under an ``size``^3 Gaussian window (valid positions only)."""
    a, b = _pair(a, b)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("ssim expects single-channel volumes")
        a, b = a[0], b[0]
    if a.ndim != 3:
        raise ValueError(f"ssim expects 3D volumes, got shape {a.shape}")
    if min(a.shape) < size:
        raise ValueError(f"volume {a.shape} is smaller than the {size}^3 SSIM window")
    g = gaussian_window(size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    rmse: float
    psnr: float
    ssim: float
    seconds: float | None = None
    params: int | None = None

    FIELDS = ("rmse", "psnr", "ssim", "seconds", "params")

    def formatted(self):
        return {
            "rmse": f"{self.rmse:.4f}",
            "psnr": "inf" if math.isinf(self.psnr) else f"{self.psnr:.2f}",
            "ssim": f"{self.ssim:.4f}",
            "seconds": "" if self.seconds is None else f"{self.seconds:.3f}",
            "params": "" if self.params is None else str(self.params),
        }

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow(self.formatted())
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "rmse": round(self.rmse, 4),
            "psnr": "inf" if math.isinf(self.psnr) else round(self.psnr, 2),
            "ssim": round(self.ssim, 4),
            "seconds": self.seconds,
            "params": self.params,
        }, sort_keys=True)


def evaluate(sr, gnd, peak=PEAK, seconds=None, params=None):
    err = rmse(sr, gnd)
    return MetricReport(err, psnr_from_rmse(err, peak), ssim(sr, gnd, peak), seconds, params)
