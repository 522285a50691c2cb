"""Photometric training loss (L1 + SSIM mix) with analytic image-space
gradients, plus PSNR for evaluation.

Images are (H, W, 3) float arrays on [0, 1]. Gradients are with respect to
``pred`` and have the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate1d


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError(f"lambda_ssim must be in [0,1], got {self.lambda_ssim}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 1, got {self.ssim_window}")


class LossResult(NamedTuple):
    value: float
    grad: np.ndarray


def _check_shapes(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.ndim != 3 or pred.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) images, got {pred.shape}")


def l1_loss(pred: np.ndarray, target: np.ndarray) -> LossResult:
    """Mean absolute error; grad = sign(pred - target) / count, sign(0) = 0."""
    _check_shapes(pred, target)
    diff = pred - target
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return LossResult(value, grad)


def _gaussian_kernel(window: int, sigma: float, dtype) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window, dtype=np.float64) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).astype(dtype)


class _Window:
    """Gaussian windowing with reflect borders and an exact adjoint.

    Forward gathers a reflect-padded copy via an index map, then runs a
    separable valid correlation. The adjoint reverses each step exactly
    (zero-embed, correlate with the same symmetric kernel, scatter-add),
    so analytic loss gradients match finite differences to machine noise.
    """

    def __init__(self, h: int, w: int, window: int, sigma: float, dtype):
        self.h, self.w = h, w
        self.r = (window - 1) // 2
        self.kernel = _gaussian_kernel(window, sigma, dtype)
        idx = np.arange(h * w).reshape(h, w)
        self.pad_idx = np.pad(idx, self.r, mode="reflect").ravel()
        self.pshape = (h + 2 * self.r, w + 2 * self.r)

    def apply(self, x: np.ndarray) -> np.ndarray:
        xp = x.ravel()[self.pad_idx].reshape(self.pshape)
        y = correlate1d(xp, self.kernel, axis=0, mode="constant")
        y = correlate1d(y, self.kernel, axis=1, mode="constant")
        return y[self.r : self.r + self.h, self.r : self.r + self.w]

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        gf = np.zeros(self.pshape, dtype=g.dtype)
        gf[self.r : self.r + self.h, self.r : self.r + self.w] = g
        gf = correlate1d(gf, self.kernel, axis=0, mode="constant")
        gf = correlate1d(gf, self.kernel, axis=1, mode="constant")
        out = np.zeros(self.h * self.w, dtype=g.dtype)
        np.add.at(out, self.pad_idx, gf.ravel())
        return out.reshape(self.h, self.w)


def ssim(pred: np.ndarray, target: np.ndarray, cfg: LossConfig | None = None) -> LossResult:
    """Mean SSIM over pixels and channels, with the gradient wrt pred."""
    cfg = cfg or LossConfig()
    _check_shapes(pred, target)
    h, w, _ = pred.shape
    if cfg.ssim_window > min(h, w):
        raise ValueError(
            f"ssim_window {cfg.ssim_window} exceeds image size {h}x{w}"
        )
    win = _Window(h, w, cfg.ssim_window, cfg.ssim_sigma, pred.dtype)
    c1, c2 = cfg.c1, cfg.c2
    grad = np.empty_like(pred)
    total = 0.0
    n = pred.size  # H*W*3, the mean normalizer
    for ch in range(3):
        x = pred[:, :, ch]
        y = target[:, :, ch]
        u1 = win.apply(x)
        u2 = win.apply(y)
        v1 = win.apply(x * x)
        v2 = win.apply(y * y)
        v12 = win.apply(x * y)
        a1 = 2.0 * u1 * u2 + c1
        a2 = 2.0 * (v12 - u1 * u2) + c2
        b1 = u1 * u1 + u2 * u2 + c1
        b2 = (v1 - u1 * u1) + (v2 - u2 * u2) + c2
        bb = b1 * b2
        s = (a1 * a2) / bb
        total += float(s.sum())
        # d(mean)/ds = 1/n; chain to the windowed statistics of x.
        ds = np.full_like(s, 1.0 / n)
        d_u1 = ds * (2.0 * u2 * (a2 - a1) / bb - 2.0 * u1 * s * (b2 - b1) / bb)
        d_v1 = ds * (-s / b2)
        d_v12 = ds * (2.0 * a1 / bb)
        grad[:, :, ch] = (
            win.adjoint(d_u1) + 2.0 * x * win.adjoint(d_v1) + y * win.adjoint(d_v12)
        )
    return LossResult(total / n, grad)


def combined_loss(
    pred: np.ndarray, target: np.ndarray, cfg: LossConfig | None = None
) -> LossResult:
    """(1 - lambda) * L1 + lambda * (1 - SSIM)."""
    cfg = cfg or LossConfig()
    lam = cfg.lambda_ssim
    l1 = l1_loss(pred, target)
    if lam == 0.0:
        return l1
    ss = ssim(pred, target, cfg)
    value = (1.0 - lam) * l1.value + lam * (1.0 - ss.value)
    grad = (1.0 - lam) * l1.grad - lam * ss.grad
    return LossResult(value, grad)


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10 * log10(1 / MSE) on [0,1]-clamped images; inf for identical ones."""
    _check_shapes(pred, target)
    p = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    t = np.clip(np.asarray(target, dtype=np.float64), 0.0, 1.0)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
