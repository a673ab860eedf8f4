"""Composite spiking blocks: MPLB, FDM, MDA, SRB and the resolution changers.

All blocks take and return (T, B, C, H, W) tensors.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as tn
from .spiking import NILIF, IndicatorLIF, NeuronConfig, TdBN

__all__ = [
    "ConvProbe",
    "Conv",
    "ConvBN",
    "MPLB",
    "FDM",
    "MDA",
    "SRB",
    "PatchEmbed",
    "Downsample",
    "UpsampleBlock",
    "BRANCH_NAMES",
    "dump_spike_maps",
]

BRANCH_NAMES = ("SN1", "SN2", "SN3", "SN4")


class ConvProbe:
    """Observe every ``Conv`` call while active (used for firing-rate measurement)."""

    _active: "ConvProbe | None" = None

    def __init__(self, callback: Callable[["Conv", torch.Tensor, torch.Tensor], None]):
        self.callback = callback

    @contextlib.contextmanager
    def attach(self) -> Iterator["ConvProbe"]:
        prev = ConvProbe._active
        ConvProbe._active = self
        try:
            yield self
        finally:
            ConvProbe._active = prev


class Conv(nn.Module):
    """Per-timestep 2-D convolution.

    ``spike_driven`` marks layers whose input comes straight from a spiking
    neuron; the energy proxy bills those as accumulates instead of MACs.
    ``billable=False`` keeps a layer out of the energy proxy altogether.
    """

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int | None = None,
                 bias: bool = False, spike_driven: bool = False, billable: bool = True):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.billable = billable
        self.pad = k // 2 if pad is None else pad
        self.spike_driven = spike_driven
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        tn.kaiming_uniform_(self.weight)
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = tn.conv2d(x, self.weight, stride=self.stride, pad=self.pad, bias=self.bias)
        if ConvProbe._active is not None:
            ConvProbe._active.callback(self, x, y)
        return y

    def extra_repr(self) -> str:
        kind = "spike" if self.spike_driven else "dense"
        return f"{self.c_in}->{self.c_out}, k={self.k}, stride={self.stride}, {kind}"


class ConvBN(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 spike_driven: bool = False, v_th: float = 1.0):
        super().__init__()
        self.conv = Conv(c_in, c_out, k, stride=stride, spike_driven=spike_driven)
        self.bn = TdBN(c_out, v_th=v_th)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bn(self.conv(x))


def _pool(i: int, x: torch.Tensor) -> torch.Tensor:
    if i == 0:
        return x
    if i == 1:
        return tn.avgpool2d(x, 4)
    if i == 2:
        return tn.avgpool2d(x, 2)
    return tn.adaptive_gap(x)


class MPLB(nn.Module):
    """Multi-scale pooling LIF block.

    The input is split into four channel groups. Group ``i`` is pooled at
    its own scale (identity, 4x4 mean, 2x2 mean, global mean), spiked by an
    NI-LIF neuron, projected by 1x1 conv + tdBN and upsampled back. The
    pixel-level branch is then paired with each pooled branch through a
    1x1 mixing projection, all four streams are reweighted per channel by
    ``theta`` and fused with a 3x3 conv + tdBN.

    ``pool_hook(i, pooled)`` may rewrite the pooled input of branch ``i``
    (0-based) before it reaches the neuron; tests use it to probe which
    branches influence the output.
    """

    def __init__(self, channels: int, cfg: NeuronConfig):
        super().__init__()
        if channels % 4:
            raise tn.ShapeError(f"MPLB needs channels divisible by 4, got {channels}")
        c4 = channels // 4
        self.channels = channels
        self.neurons = nn.ModuleList(NILIF(cfg) for _ in range(4))
        self.branch = nn.ModuleList(ConvBN(c4, c4, 1, spike_driven=True, v_th=cfg.v_th) for _ in range(4))
        self.mix = nn.ModuleList(ConvBN(2 * c4, c4, 1, v_th=cfg.v_th) for _ in range(3))
        self.theta = nn.ParameterList(nn.Parameter(torch.ones(c4)) for _ in range(4))
        self.fuse = ConvBN(channels, channels, 3, v_th=cfg.v_th)
        self.pool_hook: Callable[[int, torch.Tensor], torch.Tensor] | None = None
        self.capture: dict[str, torch.Tensor] | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[3:]
        feats = []
        for i, xi in enumerate(tn.channel_split4(x)):
            u = _pool(i, xi)
            if self.pool_hook is not None:
                u = self.pool_hook(i, u)
            s = self.neurons[i](u)
            if self.capture is not None:
                self.capture[BRANCH_NAMES[i]] = tn.upsample_nearest(s.detach(), h, w)
            feats.append(tn.upsample_nearest(self.branch[i](s), h, w))
        f1 = feats[0]
        mixed = [self.mix[j](tn.channel_concat([f1, feats[j + 1]])) for j in range(3)]
        shape = (1, 1, -1, 1, 1)
        streams = [self.theta[0].view(shape) * f1]
        streams += [self.theta[j + 1].view(shape) * m for j, m in enumerate(mixed)]
        return self.fuse(tn.channel_concat(streams))


class FDM(nn.Module):
    """Frequency decomposition: ``a_l*X_l + a_h*(X - X_l) + X*X_l`` with ``X_l = LIF(X)``."""

    def __init__(self, cfg: NeuronConfig):
        super().__init__()
        self.lif = IndicatorLIF(cfg)
        self.alpha_l = nn.Parameter(torch.tensor(1.0))
        self.alpha_h = nn.Parameter(torch.tensor(1.0))

    def decompose(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x_l = self.lif(x)
        return x_l, x - x_l

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_l, x_h = self.decompose(x)
        return self.alpha_l * x_l + self.alpha_h * x_h + x * x_l


class _Bottleneck(nn.Module):
    def __init__(self, n: int, ratio: int = 4):
        super().__init__()
        hidden = max(1, n // ratio)
        self.fc1 = nn.Linear(n, hidden)
        self.fc2 = nn.Linear(hidden, n)
        for fc in (self.fc1, self.fc2):
            tn.kaiming_uniform_(fc.weight)
            nn.init.zeros_(fc.bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # SiLU rather than ReLU: with T=4 the temporal bottleneck has a single
        # hidden unit, which a ReLU can switch off for every sample
        return torch.sigmoid(self.fc2(F.silu(self.fc1(z))))


class MDA(nn.Module):
    """Sequential temporal, channel and spatial gating.

    Each gate squeezes one axis per sample, maps it through a small
    bottleneck (or a 7x7 conv for the spatial map) and multiplies the
    running tensor by the logistic response.
    """

    def __init__(self, channels: int, timesteps: int, ratio: int = 4):
        super().__init__()
        self.timesteps = timesteps
        self.temporal = _Bottleneck(timesteps, ratio)
        self.channel = _Bottleneck(channels, ratio)
        self.spatial = Conv(1, 1, 7, bias=True, billable=False)

    def gates(self, x: torch.Tensor):
        """Return the three gate tensors, each broadcastable against ``x``."""
        if x.shape[0] != self.timesteps:
            raise tn.ShapeError(f"MDA was built for T={self.timesteps}, got T={x.shape[0]}")
        g_t = self.temporal(x.mean(dim=(2, 3, 4)).transpose(0, 1)).transpose(0, 1)
        g_t = g_t[:, :, None, None, None]
        x = x * g_t
        g_c = self.channel(x.mean(dim=(0, 3, 4)))[None, :, :, None, None]
        x = x * g_c
        g_s = torch.sigmoid(self.spatial(x.mean(dim=2, keepdim=True)))
        return g_t, g_c, g_s

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g_t, g_c, g_s = self.gates(x)
        return x * g_t * g_c * g_s


class SRB(nn.Module):
    """Spiking residual block: ``MDA(Z + shortcut(X)) + X``.

    ``Z = exit(MPLB(entry(FDM(X))))``. Switching a component off removes it:
    no FDM feeds ``X`` straight to the entry conv, no MDA passes the sum
    through, and no MPLB leaves a plain NI-LIF neuron between the two
    convolutions so the exit conv stays spike-driven.
    """

    def __init__(self, channels: int, cfg: NeuronConfig, timesteps: int,
                 use_fdm: bool = True, use_mda: bool = True, use_mplb: bool = True):
        super().__init__()
        self.use_fdm, self.use_mda, self.use_mplb = use_fdm, use_mda, use_mplb
        self.fdm = FDM(cfg) if use_fdm else None
        self.entry = ConvBN(channels, channels, 3, v_th=cfg.v_th)
        self.mplb = MPLB(channels, cfg) if use_mplb else NILIF(cfg)
        self.exit = ConvBN(channels, channels, 3, spike_driven=not use_mplb, v_th=cfg.v_th)
        self.shortcut = ConvBN(channels, channels, 1, v_th=cfg.v_th)
        self.mda = MDA(channels, timesteps) if use_mda else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_t = self.fdm(x) if self.fdm is not None else x
        z = self.exit(self.mplb(self.entry(x_t)))
        r = z + self.shortcut(x)
        if self.mda is not None:
            r = self.mda(r)
        return r + x


class PatchEmbed(nn.Module):
    def __init__(self, c_in: int, c_out: int, v_th: float = 1.0):
        super().__init__()
        self.proj = ConvBN(c_in, c_out, 3, v_th=v_th)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


class Downsample(nn.Module):
    """NI-LIF, then stride-2 3x3 conv doubling channels, then tdBN."""

    def __init__(self, c_in: int, cfg: NeuronConfig):
        super().__init__()
        self.lif = NILIF(cfg)
        self.proj = ConvBN(c_in, 2 * c_in, 3, stride=2, spike_driven=True, v_th=cfg.v_th)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[3] % 2 or x.shape[4] % 2:
            raise tn.ShapeError(f"downsample needs even H, W, got {tuple(x.shape[3:])}")
        return self.proj(self.lif(x))


class UpsampleBlock(nn.Module):
    """NI-LIF, nearest x2, then 3x3 conv halving channels, then tdBN."""

    def __init__(self, c_in: int, cfg: NeuronConfig):
        super().__init__()
        if c_in % 2:
            raise tn.ShapeError(f"upsample needs an even channel count, got {c_in}")
        self.lif = NILIF(cfg)
        self.proj = ConvBN(c_in, c_in // 2, 3, spike_driven=True, v_th=cfg.v_th)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.lif(x)
        s = tn.upsample_nearest(s, 2 * x.shape[3], 2 * x.shape[4])
        return self.proj(s)


def _tile_grid(maps: np.ndarray) -> np.ndarray:
    """Arrange (C, H, W) maps in a near-square grid separated by 1-pixel gaps."""
    c, h, w = maps.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1), dtype=maps.dtype)
    for i in range(c):
        r, q = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = maps[i]
    return grid


def dump_spike_maps(capture: dict[str, torch.Tensor], outdir: str, block: str,
                    sample: int = 0) -> list[str]:
    """Write ``{outdir}/{block}/{branch}_t{t}.pgm`` grids for one batch sample.

    Spike values in [0, 1] map linearly onto 0..255 grey levels.
    """
    from .data import write_pgm

    target = os.path.join(outdir, block)
    os.makedirs(target, exist_ok=True)
    paths = []
    for branch, spikes in capture.items():
        s = spikes[:, sample].float().cpu().numpy()
        for t in range(s.shape[0]):
            grid = _tile_grid(s[t])
            path = os.path.join(target, f"{branch}_t{t}.pgm")
            write_pgm(path, np.rint(np.clip(grid, 0.0, 1.0) * 255).astype(np.uint8))
            paths.append(path)
    return paths
