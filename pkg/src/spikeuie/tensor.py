"""Dense 5-D tensor primitives with reverse-mode gradients.

Activations are ``torch.Tensor`` objects laid out as ``(T, B, C, H, W)``
(timesteps, batch, channels, height, width). Every spatial primitive folds
the time axis into the batch axis, applies a 2-D kernel, and unfolds again,
so each timestep is processed independently.

Gradients come from torch's autograd tape; ``backward`` and ``zero_grads``
wrap it with the accumulation contract the training loop relies on.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

__all__ = [
    "ShapeError",
    "ParameterError",
    "UsageError",
    "check_tensor5",
    "fold_time",
    "unfold_time",
    "conv2d",
    "avgpool2d",
    "adaptive_gap",
    "upsample_nearest",
    "resize_bilinear",
    "fft2",
    "ifft2",
    "channel_split4",
    "channel_concat",
    "backward",
    "zero_grads",
    "kaiming_uniform_",
]


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """An operation parameter is out of its valid range."""


class UsageError(RuntimeError):
    """An API was called in a state where it cannot work."""


def check_tensor5(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 5:
        raise ShapeError(f"{name}: expected (T, B, C, H, W), got shape {tuple(x.shape)}")
    if any(d < 1 for d in x.shape):
        raise ShapeError(f"{name}: all dims must be >= 1, got {tuple(x.shape)}")


def fold_time(x: torch.Tensor) -> torch.Tensor:
    t, b = x.shape[:2]
    return x.reshape(t * b, *x.shape[2:])


def unfold_time(y: torch.Tensor, t: int) -> torch.Tensor:
    return y.reshape(t, y.shape[0] // t, *y.shape[1:])


def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    stride: int = 1,
    pad: int = 0,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-correlate every timestep of ``x`` with ``kernel`` (Cout, Cin, k, k)."""
    check_tensor5(x)
    if kernel.dim() != 4:
        raise ShapeError(f"kernel must be (Cout, Cin, k, k), got {tuple(kernel.shape)}")
    if x.shape[2] != kernel.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[2]}, kernel expects {kernel.shape[1]}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    kh, kw = kernel.shape[2:]
    h_out = (x.shape[3] + 2 * pad - kh) // stride + 1
    w_out = (x.shape[4] + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"non-positive output size {h_out}x{w_out}")
    y = F.conv2d(fold_time(x), kernel, bias=bias, stride=stride, padding=pad)
    return unfold_time(y, x.shape[0])


def _pad_to_multiple(y: torch.Tensor, window: int) -> torch.Tensor:
    h, w = y.shape[-2:]
    ph = (-h) % window
    pw = (-w) % window
    if ph == 0 and pw == 0:
        return y
    # reflect needs pad < size; tiny maps fall back to edge replication
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(y, (0, pw, 0, ph), mode=mode)


def avgpool2d(x: torch.Tensor, window: int) -> torch.Tensor:
    """Non-overlapping ``window`` x ``window`` mean pooling.

    Maps whose sides are not multiples of ``window`` are reflect-padded on
    the bottom/right edge first, so the output side is ``ceil(H / window)``.
    """
    check_tensor5(x)
    if window <= 0:
        raise ParameterError(f"window must be positive, got {window}")
    if window == 1:
        return x
    y = _pad_to_multiple(fold_time(x), window)
    return unfold_time(F.avg_pool2d(y, window), x.shape[0])


def adaptive_gap(x: torch.Tensor) -> torch.Tensor:
    check_tensor5(x)
    return x.mean(dim=(3, 4), keepdim=True)


def upsample_nearest(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Nearest-neighbour upsampling; output pixel (i, j) copies source (i*H//outH, j*W//outW)."""
    check_tensor5(x)
    if out_h <= 0 or out_w <= 0:
        raise ParameterError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[3:]
    if (out_h, out_w) == (h, w):
        return x
    if out_h % h == 0 and out_w % w == 0:
        fh, fw = out_h // h, out_w // w
        y = x[:, :, :, :, None, :, None].expand(*x.shape[:4], fh, w, fw)
        return y.reshape(*x.shape[:3], out_h, out_w)
    rows = torch.arange(out_h, device=x.device) * h // out_h
    cols = torch.arange(out_w, device=x.device) * w // out_w
    return x.index_select(3, rows).index_select(4, cols)


def resize_bilinear(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resampling with half-pixel (align_corners=False) sampling.

    Accepts (T, B, C, H, W) or plain (B, C, H, W) images.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got {out_h}x{out_w}")
    if tuple(x.shape[-2:]) == (out_h, out_w):
        return x
    if x.dim() == 4:
        return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
    check_tensor5(x)
    y = F.interpolate(fold_time(x), size=(out_h, out_w), mode="bilinear", align_corners=False)
    return unfold_time(y, x.shape[0])


def fft2(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Unnormalised forward 2-D DFT over the last two axes.

    Returns the (real, imaginary) planes, each with the shape of ``x``.
    """
    spec = torch.fft.fft2(x, norm="backward")
    return spec.real, spec.imag


def ifft2(real: torch.Tensor, imag: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifft2(torch.complex(real, imag), norm="backward").real


def channel_split4(x: torch.Tensor) -> tuple[torch.Tensor, ...]:
    check_tensor5(x)
    c = x.shape[2]
    if c % 4:
        raise ShapeError(f"channel count {c} is not divisible by 4")
    return tuple(torch.split(x, c // 4, dim=2))


def channel_concat(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    if not parts:
        raise ShapeError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts:
        check_tensor5(p)
        if p.shape[:2] != ref[:2] or p.shape[3:] != ref[3:]:
            raise ShapeError(f"concat needs matching T, B, H, W: {tuple(ref)} vs {tuple(p.shape)}")
    return torch.cat(list(parts), dim=2)


def backward(loss: torch.Tensor) -> None:
    """Reverse sweep from a scalar ``loss``; parameter grads accumulate with ``+=``."""
    if loss.numel() != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise UsageError("loss is detached from the tape; nothing to differentiate")
    loss.backward()


def zero_grads(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            p.grad.zero_()


def kaiming_uniform_(weight: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Fan-in scaled uniform init, bound = sqrt(1 / (Cin * k * k))."""
    fan_in = math.prod(weight.shape[1:])
    bound = math.sqrt(1.0 / fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight
