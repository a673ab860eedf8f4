"""Multi-scale restoration objective and image-quality metrics.

Every term compares the three network outputs with the ground truth
resized (bilinear, half-pixel) to the output's resolution. Terms are
accumulated in float64; ``||.||_1`` is a mean so the weights do not depend
on patch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .network import MultiScaleOutput
from .tensor import ShapeError, fft2, resize_bilinear

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "pix_loss",
    "ssim_loss",
    "fft_loss",
    "total_loss",
    "ssim_metric",
    "gaussian_window",
    "psnr",
]

SCALES = ("1", "1/2", "1/4")


@dataclass(frozen=True)
class LossWeights:
    lambda_pix: float = 0.5
    lambda_ssim: float = 1.0
    lambda_fft: float = 0.1

    def __post_init__(self) -> None:
        for name in ("lambda_pix", "lambda_ssim", "lambda_fft"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossBreakdown:
    l_pix: torch.Tensor
    l_ssim: torch.Tensor
    l_fft: torch.Tensor
    total: torch.Tensor
    per_scale: dict[str, dict[str, float]] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        return {"l_pix": self.l_pix.item(), "l_ssim": self.l_ssim.item(),
                "l_fft": self.l_fft.item(), "total": self.total.item()}


def _pairs(outputs: MultiScaleOutput, gt: torch.Tensor):
    if gt.dim() != 4 or gt.shape[1:] != outputs.full.shape[1:] or gt.shape[0] != outputs.full.shape[0]:
        raise ShapeError(f"ground truth {tuple(gt.shape)} does not match prediction {tuple(outputs.full.shape)}")
    h, w = gt.shape[2:]
    for k, pred in enumerate(outputs.scales()):
        th, tw = max(1, h >> k), max(1, w >> k)
        # no-op when the head already produced the scale's resolution
        p = resize_bilinear(pred, th, tw).double()
        yield SCALES[k], p, resize_bilinear(gt, th, tw).double()


def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def _fft_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ar, ai = fft2(a)
    br, bi = fft2(b)
    return 0.5 * ((ar - br).abs().mean() + (ai - bi).abs().mean())


def gaussian_window(size: int, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _window_size(h: int, w: int, size: int = 11) -> int:
    side = min(size, h, w)
    return side if side % 2 else side - 1


def ssim_metric(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0,
                window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM over valid (unpadded) Gaussian windows, averaged over channels and batch.

    Accepts (B, C, H, W) or (C, H, W). The window shrinks to the largest odd
    size that fits when the image is smaller than ``window``.
    """
    if a.shape != b.shape:
        raise ShapeError(f"SSIM needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    c = a.shape[1]
    ws = _window_size(*a.shape[2:], size=window)
    kernel = gaussian_window(ws, sigma, dtype=a.dtype).to(a.device).expand(c, 1, ws, ws)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def blur(x):
        return F.conv2d(x, kernel, groups=c)

    mu_a, mu_b = blur(a), blur(b)
    s_aa = blur(a * a) - mu_a**2
    s_bb = blur(b * b) - mu_b**2
    s_ab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return (num / den).mean()


def pix_loss(outputs: MultiScaleOutput, gt: torch.Tensor) -> torch.Tensor:
    return sum(_l1(p, g) for _, p, g in _pairs(outputs, gt))


def ssim_loss(outputs: MultiScaleOutput, gt: torch.Tensor) -> torch.Tensor:
    return sum(1.0 - ssim_metric(p, g) for _, p, g in _pairs(outputs, gt))


def fft_loss(outputs: MultiScaleOutput, gt: torch.Tensor) -> torch.Tensor:
    return sum(_fft_l1(p, g) for _, p, g in _pairs(outputs, gt))


def total_loss(outputs: MultiScaleOutput, gt: torch.Tensor,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    per_scale = {}
    pix, ssim, fft = [], [], []
    for scale, p, g in _pairs(outputs, gt):
        terms = (_l1(p, g), 1.0 - ssim_metric(p, g), _fft_l1(p, g))
        pix.append(terms[0])
        ssim.append(terms[1])
        fft.append(terms[2])
        per_scale[scale] = {k: t.item() for k, t in zip(("l_pix", "l_ssim", "l_fft"), terms)}
    l_pix, l_ssim, l_fft = sum(pix), sum(ssim), sum(fft)
    total = weights.lambda_pix * l_pix + weights.lambda_ssim * l_ssim + weights.lambda_fft * l_fft
    return LossBreakdown(l_pix, l_ssim, l_fft, total, per_scale)


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical inputs give ``inf``."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)
