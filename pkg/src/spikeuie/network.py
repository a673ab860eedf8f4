"""Three-level spiking encoder-decoder with multi-scale heads, plus checkpoint I/O.

Checkpoint layout (all integers little-endian)::

    b"UIES"                      magic
    u32  version                 currently 1
    u32  n, n bytes              UTF-8 JSON of the NetConfig
    u64  step                    training step counter
    u32  record count
    per record:
        u32 n, n bytes           UTF-8 tensor name (state_dict key)
        u32 ndim, ndim x u32     shape
        prod(shape) x f32        payload, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as tn
from .blocks import MPLB, SRB, Conv, ConvBN, Downsample, PatchEmbed, UpsampleBlock
from .spiking import NeuronConfig

__all__ = [
    "NetConfig",
    "MultiScaleOutput",
    "SpikingEnhancer",
    "ModelState",
    "FormatError",
    "IncompatibleCheckpointError",
    "replicate_temporal",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"UIES"
VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    timesteps: int = 4
    d_levels: int = 4
    base_channels: int = 32
    stage_layout: tuple[int, ...] = (4, 4, 8, 2, 2, 2)
    gamma: float = 0.5
    v_th: float = 1.0
    surrogate_alpha: float = 4.0
    use_fdm: bool = True
    use_mda: bool = True
    use_mplb: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_layout", tuple(int(n) for n in self.stage_layout))
        if len(self.stage_layout) != 6 or any(n < 0 for n in self.stage_layout):
            raise ValueError(f"stage_layout needs 6 nonnegative entries, got {self.stage_layout}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ValueError(f"base_channels must be a positive multiple of 4, got {self.base_channels}")
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        self.neuron  # validates the neuron fields

    @property
    def neuron(self) -> NeuronConfig:
        return NeuronConfig(self.gamma, self.v_th, self.d_levels, self.surrogate_alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_layout"] = list(self.stage_layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MultiScaleOutput:
    full: torch.Tensor
    half: torch.Tensor
    quarter: torch.Tensor

    def scales(self) -> list[torch.Tensor]:
        return [self.full, self.half, self.quarter]


def replicate_temporal(img: torch.Tensor, timesteps: int) -> torch.Tensor:
    """(B, C, H, W) -> (T, B, C, H, W) with every timestep equal to ``img``."""
    if timesteps < 1:
        raise tn.ParameterError(f"timesteps must be >= 1, got {timesteps}")
    return img.unsqueeze(0).expand(timesteps, *img.shape)


class _Injection(nn.Module):
    """Embed the resized input image and merge it into a level's features."""

    def __init__(self, width: int, embed: int):
        super().__init__()
        self.embed = Conv(3, embed, 3)
        self.proj = Conv(width + embed, width, 1)

    def forward(self, feat: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
        h, w = feat.shape[3:]
        small = tn.resize_bilinear(img, h, w).unsqueeze(0)
        e = self.embed(small).expand(feat.shape[0], -1, -1, -1, -1)
        return self.proj(tn.channel_concat([feat, e]))


class _Head(nn.Module):
    """Temporal mean, 3x3 reconstruction conv, global residual from the input."""

    def __init__(self, width: int):
        super().__init__()
        self.conv = Conv(width, 3, 3, bias=True)
        nn.init.zeros_(self.conv.weight)

    def forward(self, feat: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
        y = self.conv(feat.mean(dim=0, keepdim=True))[0]
        return y + tn.resize_bilinear(img, *y.shape[-2:])


class SpikingEnhancer(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        n = cfg.neuron
        b, T = cfg.base_channels, cfg.timesteps
        l1, l2, l3, d3, d2, d1 = cfg.stage_layout

        def stack(width, count):
            return nn.Sequential(*(SRB(width, n, T, cfg.use_fdm, cfg.use_mda, cfg.use_mplb)
                                   for _ in range(count)))

        self.embed = PatchEmbed(3, b, v_th=n.v_th)
        self.enc1 = stack(b, l1)
        self.down1 = Downsample(b, n)
        self.inject2 = _Injection(2 * b, b // 2)
        self.enc2 = stack(2 * b, l2)
        self.down2 = Downsample(2 * b, n)
        self.inject3 = _Injection(4 * b, b // 2)
        self.enc3 = stack(4 * b, l3)
        self.dec3 = stack(4 * b, d3)
        self.head3 = _Head(4 * b)
        self.up2 = UpsampleBlock(4 * b, n)
        self.skip2 = ConvBN(4 * b, 2 * b, 1, v_th=n.v_th)
        self.dec2 = stack(2 * b, d2)
        self.head2 = _Head(2 * b)
        self.up1 = UpsampleBlock(2 * b, n)
        self.skip1 = ConvBN(2 * b, b, 1, v_th=n.v_th)
        self.dec1 = stack(b, d1)
        self.head1 = _Head(b)
        for name, module in self.named_modules():
            module.layer_name = name or "model"

    def heads(self) -> list[nn.Module]:
        return [self.head1, self.head2, self.head3]

    def mplb_blocks(self) -> list[tuple[str, MPLB]]:
        return [(name, m) for name, m in self.named_modules() if isinstance(m, MPLB)]

    def forward(self, img: torch.Tensor) -> MultiScaleOutput:
        if img.dim() != 4 or img.shape[1] != 3:
            raise tn.ShapeError(f"expected (B, 3, H, W) image, got {tuple(img.shape)}")
        h, w = img.shape[2:]
        if h % 4 or w % 4:
            raise tn.ShapeError(f"H and W must be multiples of 4, got {h}x{w}")
        x = replicate_temporal(img, self.cfg.timesteps)
        e1 = self.enc1(self.embed(x))
        e2 = self.enc2(self.inject2(self.down1(e1), img))
        e3 = self.enc3(self.inject3(self.down2(e2), img))
        d3 = self.dec3(e3)
        quarter = self.head3(d3, img)
        d2 = self.dec2(self.skip2(tn.channel_concat([self.up2(d3), e2])))
        half = self.head2(d2, img)
        d1 = self.dec1(self.skip1(tn.channel_concat([self.up1(d2), e1])))
        full = self.head1(d1, img)
        return MultiScaleOutput(full, half, quarter)

    @torch.no_grad()
    def enhance(self, img: torch.Tensor) -> torch.Tensor:
        """Full-resolution restoration of arbitrary-size images, clamped to [0, 1]."""
        h, w = img.shape[2:]
        ph, pw = (-h) % 4, (-w) % 4
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            img = F.pad(img, (0, pw, 0, ph), mode=mode)
        out = self.forward(img).full[..., :h, :w]
        return out.clamp(0.0, 1.0)


class FormatError(ValueError):
    """The checkpoint file is malformed or truncated."""


class IncompatibleCheckpointError(ValueError):
    """The checkpoint does not match the architecture its config describes."""


@dataclass
class ModelState:
    model: SpikingEnhancer
    config: NetConfig
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(model: SpikingEnhancer, path: str, step: int = 0) -> None:
    """Write ``model`` atomically (temp file then rename)."""
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<Q", step)]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, value in state.items():
        raw = name.encode()
        arr = value.detach().cpu().to(torch.float32).contiguous().numpy()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str) -> ModelState:
    """Parse and validate a checkpoint; nothing is built until the whole file checks out."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version, n = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    try:
        cfg = NetConfig.from_dict(json.loads(r.take(n, "config").decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: unreadable config block: {exc}") from exc
    (step,) = r.unpack("<Q", "step")
    (count,) = r.unpack("<I", "record count")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<I", "name length")
        name = r.take(n, "name").decode()
        (ndim,) = r.unpack("<I", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        records[name] = np.frombuffer(r.take(size, f"{name} payload"), dtype="<f4").reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")

    model = SpikingEnhancer(cfg)
    expected = model.state_dict()
    for name, value in expected.items():
        if name not in records:
            raise IncompatibleCheckpointError(f"missing tensor '{name}'")
        if tuple(records[name].shape) != tuple(value.shape):
            raise IncompatibleCheckpointError(
                f"tensor '{name}' has shape {tuple(records[name].shape)}, config expects {tuple(value.shape)}")
    extra = set(records) - set(expected)
    if extra:
        raise IncompatibleCheckpointError(f"unexpected tensor '{sorted(extra)[0]}'")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in records.items()})
    return ModelState(model=model, config=cfg, step=step)
