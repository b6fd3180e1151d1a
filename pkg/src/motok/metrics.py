"""Reconstruction quality suite: SSIM, PSNR, L1, T-Std, Q-Loss.

All metrics are deterministic pure functions over numpy arrays. ``evaluate``
runs a model over a dataset of heatmap windows and assembles one report row
(the same column set as the quantitative comparison table: model, compression,
vocab, ssim, psnr, l1, tstd, qloss).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import model as mdl
from .quantizer import quantize
from .errors import ArgumentError, ShapeError
from .heatmap import HeatmapVolume

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01) ** 2  # (0.01 * L)^2 with L = 1
SSIM_C2 = (0.03) ** 2


def _values(v) -> np.ndarray:
    return v.values if isinstance(v, HeatmapVolume) else np.asarray(v)


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    g = np.exp(-(np.arange(SSIM_WINDOW, dtype=np.float64) - half) ** 2
               / (2.0 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(x, y) -> float:
    """Windowed SSIM with a 7x7 Gaussian window, averaged over windows,
    channels, and frames. Last two axes are spatial."""
    xv = _values(x).astype(np.float64)
    yv = _values(y).astype(np.float64)
    if xv.shape != yv.shape:
        raise ShapeError(f"ssim extent mismatch: {xv.shape} vs {yv.shape}")
    h, w = xv.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ArgumentError(f"spatial extents {h}x{w} smaller than SSIM window")
    xi = xv.reshape(-1, h, w)
    yi = yv.reshape(-1, h, w)
    k = _ssim_kernel()

    def local(img):
        win = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW), axis=(1, 2))
        return np.tensordot(win, k, axes=([3, 4], [0, 1]))

    mu_x = local(xi)
    mu_y = local(yi)
    e_xx = local(xi * xi)
    e_yy = local(yi * yi)
    e_xy = local(xi * yi)
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))


def psnr(x, y, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE) in dB; identical inputs return the 100 dB cap."""
    xv = _values(x).astype(np.float64)
    yv = _values(y).astype(np.float64)
    if xv.shape != yv.shape:
        raise ShapeError(f"psnr extent mismatch: {xv.shape} vs {yv.shape}")
    if max_val <= 0:
        raise ArgumentError(f"max_val must be positive, got {max_val}")
    mse = float(np.mean((xv - yv) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(max_val * max_val / mse))


def l1(x, y) -> float:
    """Mean absolute pixel-wise error."""
    xv = _values(x).astype(np.float64)
    yv = _values(y).astype(np.float64)
    if xv.shape != yv.shape:
        raise ShapeError(f"l1 extent mismatch: {xv.shape} vs {yv.shape}")
    return float(np.mean(np.abs(xv - yv)))


def tstd(v) -> float:
    """Temporal instability: per-frame spatial RMS of the deviation from each
    pixel's temporal mean, scaled by 1/(F*H*W); channels averaged.

    The outer 1/(F*H*W) scale folds the spatial size in twice; it is kept
    as-is since it is a constant factor per resolution.
    Note the value is frame-permutation invariant by construction.
    """
    vv = _values(v).astype(np.float64)
    if vv.ndim == 3:
        vv = vv[:, None]  # [F,H,W] -> [F,1,H,W]
    if vv.ndim != 4:
        raise ShapeError(f"tstd expects [F,H,W] or [F,C,H,W], got {vv.shape}")
    f, _, h, w = vv.shape
    mu = vv.mean(axis=0, keepdims=True)
    inner = np.sqrt(np.mean((vv - mu) ** 2, axis=(2, 3)))  # [F,C]
    per_channel = inner.sum(axis=0) / (f * h * w)
    return float(per_channel.mean())


@dataclass
class MetricsReport:
    """One evaluation row, column-compatible with the comparison table."""

    model_tag: str
    compression: str
    vocab: int
    ssim: float
    psnr: float
    l1: float
    tstd: float
    qloss: Optional[float] = None

    def row(self) -> list:
        return [self.model_tag, self.compression, self.vocab,
                self.ssim, self.psnr, self.l1, self.tstd,
                "" if self.qloss is None else self.qloss]


REPORT_COLUMNS = ["model", "compression", "vocab", "ssim", "psnr", "l1", "tstd", "qloss"]


def evaluate(state, dataset, model_tag: str = "VQ-GAN") -> MetricsReport:
    """Reconstruct every window through encode/decode and average the metrics.

    ``dataset`` is a sequence of frame-major heatmap windows ([F,C,H,W] arrays
    or HeatmapVolume). Q-loss is the quantizer's evaluation-time commitment
    residual, averaged over windows.
    """
    windows = list(dataset)
    if not windows:
        raise ArgumentError("evaluate requires a non-empty dataset")
    sums = np.zeros(4)
    qsum = 0.0
    for win in windows:
        x = _values(win).astype(np.float32)
        batch = np.moveaxis(x, 0, 1)[None]  # [1,C,F,H,W]
        z_e = mdl.encoder_forward(state, mdl.Tensor(batch))
        result = quantize(z_e, state.codebook)
        recon = mdl.decoder_forward(state, result.z_q)
        xhat = np.moveaxis(recon.data[0], 0, 1)  # [F,C,H,W]
        sums += [ssim(x, xhat), psnr(x, xhat), l1(x, xhat), tstd(xhat)]
        qsum += result.commit_residual
    n = len(windows)
    cfg = state.config
    return MetricsReport(model_tag, cfg.compression, cfg.vocab,
                         sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n,
                         qsum / n)


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow(r.row())


def write_report_json(path, reports) -> None:
    payload = [asdict(r) | {"model": r.model_tag} for r in reports]
    for row in payload:
        row.pop("model_tag")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
