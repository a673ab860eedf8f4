"""Neuron dynamics: multi-level NI-LIF, binary indicator LIF, tdBN.

Both neurons integrate a (T, B, C, H, W) input current step by step:

    mu_t = gamma * (mu_{t-1} - m_{t-1} * v_th) + U_t

The NI-LIF neuron fires an integer count ``m_t = clamp(floor(mu_t / v_th), 0, D)``
and emits ``m_t / D``; the binary LIF is the ``D = 1`` special case. The reset
subtracts the fired charge ``m * v_th`` in membrane units.

Backward passes use surrogate derivatives: a clipped straight-through
estimator for the quantiser and a logistic derivative for the indicator.
``SpikeFreezer`` swaps both for their local linearisation so finite
differences can validate the surrogate-defined backward.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "NeuronConfig",
    "LifState",
    "NumericError",
    "surrogate_grad",
    "nilif_forward",
    "binary_lif_forward",
    "SpikeFreezer",
    "NILIF",
    "IndicatorLIF",
    "TdBN",
]


class NumericError(ArithmeticError):
    """Non-finite values reached a neuron."""


@dataclass(frozen=True)
class NeuronConfig:
    gamma: float = 0.5
    v_th: float = 1.0
    d_levels: int = 4
    surrogate_alpha: float = 4.0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.v_th <= 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if int(self.d_levels) != self.d_levels or self.d_levels < 1:
            raise ValueError(f"d_levels must be a positive integer, got {self.d_levels}")
        if self.surrogate_alpha <= 0:
            raise ValueError(f"surrogate_alpha must be positive, got {self.surrogate_alpha}")


@dataclass
class LifState:
    membrane: torch.Tensor
    prev_spike: torch.Tensor
    input_current: torch.Tensor


def surrogate_grad(x, alpha: float = 4.0):
    """Logistic surrogate derivative ``alpha * s * (1 - s)`` with ``s = sigmoid(alpha * x)``.

    Evaluated as ``alpha * sigmoid(ax) * sigmoid(-ax)``, which avoids the
    cancellation in ``1 - s`` and is exactly symmetric in ``x``.
    """
    ax = alpha * torch.as_tensor(x)
    return alpha * torch.sigmoid(ax) * torch.sigmoid(-ax)


def _quantiser_slope(mu: torch.Tensor, v_th: float, d_levels: int) -> torch.Tensor:
    inside = (mu >= 0) & (mu <= d_levels * v_th)
    return inside.to(mu.dtype) / v_th


def _indicator_slope(mu: torch.Tensor, v_th: float, alpha: float) -> torch.Tensor:
    return surrogate_grad(mu - v_th, alpha)


class _Quantise(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, v_th, d_levels):
        ctx.save_for_backward(mu)
        ctx.v_th, ctx.d_levels = v_th, d_levels
        return torch.clamp(torch.floor(mu / v_th), 0, d_levels)

    @staticmethod
    def backward(ctx, grad):
        (mu,) = ctx.saved_tensors
        return grad * _quantiser_slope(mu, ctx.v_th, ctx.d_levels), None, None


class _Indicator(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, v_th, alpha):
        ctx.save_for_backward(mu)
        ctx.v_th, ctx.alpha = v_th, alpha
        return (mu >= v_th).to(mu.dtype)

    @staticmethod
    def backward(ctx, grad):
        (mu,) = ctx.saved_tensors
        return grad * _indicator_slope(mu, ctx.v_th, ctx.alpha), None, None


class SpikeFreezer:
    """Record spike decisions once, then replay them as a linear function of membrane.

    In replay mode every spike call returns ``m0 + slope0 * (mu - mu0)``, the
    first-order expansion of the surrogate at the recorded operating point.
    Calls are matched by order, so the replayed graph must be the recorded one.
    """

    _active: "SpikeFreezer | None" = None

    def __init__(self) -> None:
        self.records: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = []
        self.mode: str | None = None
        self._cursor = 0

    @contextlib.contextmanager
    def _activate(self, mode: str) -> Iterator["SpikeFreezer"]:
        prev = SpikeFreezer._active
        SpikeFreezer._active = self
        self.mode = mode
        self._cursor = 0
        try:
            yield self
        finally:
            SpikeFreezer._active = prev
            self.mode = None

    def record(self):
        self.records.clear()
        return self._activate("record")

    def replay(self):
        return self._activate("replay")

    def _spike(self, mu, fn, slope_fn):
        if self.mode == "record":
            m = fn(mu)
            self.records.append((m.detach(), mu.detach(), slope_fn(mu.detach())))
            return m
        if self._cursor >= len(self.records):
            raise RuntimeError("replay issued more spike calls than were recorded")
        m0, mu0, slope = self.records[self._cursor]
        self._cursor += 1
        return m0 + slope * (mu - mu0)


def _fire(mu: torch.Tensor, cfg: NeuronConfig, binary: bool) -> torch.Tensor:
    if binary:
        fn = lambda m: _Indicator.apply(m, cfg.v_th, cfg.surrogate_alpha)  # noqa: E731
        slope_fn = lambda m: _indicator_slope(m, cfg.v_th, cfg.surrogate_alpha)  # noqa: E731
    else:
        fn = lambda m: _Quantise.apply(m, cfg.v_th, cfg.d_levels)  # noqa: E731
        slope_fn = lambda m: _quantiser_slope(m, cfg.v_th, cfg.d_levels)  # noqa: E731
    freezer = SpikeFreezer._active
    if freezer is not None:
        return freezer._spike(mu, fn, slope_fn)
    return fn(mu)


def _run(u_seq: torch.Tensor, cfg: NeuronConfig, binary: bool, layer: str, return_state: bool):
    if not torch.isfinite(u_seq).all():
        raise NumericError(f"non-finite input current at layer '{layer}'")
    d = 1 if binary else cfg.d_levels
    mu = torch.zeros_like(u_seq[0])
    fired = torch.zeros_like(u_seq[0])
    out = []
    for t in range(u_seq.shape[0]):
        # separate ops keep the float32 rounding identical to a scalar loop
        mu = cfg.gamma * (mu - fired * cfg.v_th) + u_seq[t]
        fired = _fire(mu, cfg, binary)
        out.append(fired / d)
    spikes = torch.stack(out)
    if return_state:
        return spikes, LifState(membrane=mu, prev_spike=out[-1], input_current=u_seq[-1])
    return spikes


def nilif_forward(u_seq: torch.Tensor, cfg: NeuronConfig, layer: str = "nilif", return_state: bool = False):
    """Multi-level spikes in ``{0, 1/D, ..., 1}`` from an input current sequence."""
    return _run(u_seq, cfg, binary=False, layer=layer, return_state=return_state)


def binary_lif_forward(u_seq: torch.Tensor, cfg: NeuronConfig, layer: str = "lif", return_state: bool = False):
    """``{0, 1}`` spikes, firing when the membrane reaches ``v_th``."""
    return _run(u_seq, cfg, binary=True, layer=layer, return_state=return_state)


class NILIF(nn.Module):
    def __init__(self, cfg: NeuronConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, u_seq: torch.Tensor) -> torch.Tensor:
        return nilif_forward(u_seq, self.cfg, layer=getattr(self, "layer_name", "nilif"))

    def extra_repr(self) -> str:
        return f"gamma={self.cfg.gamma}, v_th={self.cfg.v_th}, D={self.cfg.d_levels}"


class IndicatorLIF(NILIF):
    def forward(self, u_seq: torch.Tensor) -> torch.Tensor:
        return binary_lif_forward(u_seq, self.cfg, layer=getattr(self, "layer_name", "lif"))


class TdBN(nn.Module):
    """Threshold-dependent batch norm over the merged T*B*H*W population.

    Training mode normalises each channel to zero mean and variance
    ``(alpha_bn * v_th) ** 2`` before the learned affine map.
    """

    def __init__(self, channels: int, v_th: float = 1.0, alpha_bn: float = 1.0,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.v_th = v_th
        self.alpha_bn = alpha_bn
        self.momentum = momentum
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[2] != self.channels:
            raise ValueError(f"tdBN expects (T, B, {self.channels}, H, W), got {tuple(x.shape)}")
        t, b = x.shape[:2]
        # folding T into the batch axis makes batch_norm's statistics span T*B*H*W
        y = F.batch_norm(
            x.reshape(t * b, *x.shape[2:]),
            self.running_mean,
            self.running_var,
            weight=self.alpha_bn * self.v_th * self.scale,
            bias=self.shift,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
        return y.reshape(x.shape)
