"""Image I/O, paired datasets, patch sampling and synthetic underwater degradation.

Images are float32 arrays shaped (H, W, 3) with values in [0, 1]. Batches
handed to the network are torch tensors shaped (B, 3, H, W).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter1d

__all__ = [
    "ImageFormatError",
    "DataError",
    "read_ppm",
    "write_ppm",
    "read_pgm",
    "write_pgm",
    "load_image",
    "save_image",
    "DegradeParams",
    "degrade",
    "sample_degrade_params",
    "synthetic_texture",
    "Pair",
    "PairBatch",
    "synthetic_pairs",
    "paired_directory",
    "sample_patches",
    "to_tensor",
    "to_image",
]

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageFormatError(ValueError):
    """Malformed or unsupported image file."""


class DataError(RuntimeError):
    """A dataset cannot be assembled from the given files."""


def _parse_pnm_header(buf: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset) of a binary PNM header."""
    if buf[:2] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} magic at byte 0")
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header field at byte {start}")
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after header at byte {pos}")
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: only 8-bit samples are supported (maxval {maxval})")
    return width, height, maxval, pos + 1


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, maxval, offset = _parse_pnm_header(buf, magic, path)
    need = width * height * channels
    if len(buf) - offset < need:
        raise ImageFormatError(
            f"{path}: pixel payload truncated at byte {len(buf)}, expected {offset + need} bytes")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return data.reshape(shape).astype(np.float32) / np.float32(maxval)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def _quantise(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    q = _quantise(img)
    if q.ndim != 3 or q.shape[2] != 3:
        raise ImageFormatError(f"PPM needs (H, W, 3) data, got {q.shape}")
    with open(path, "wb") as f:
        f.write(f"P6\n{q.shape[1]} {q.shape[0]}\n255\n".encode())
        f.write(q.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    q = _quantise(img)
    if q.ndim != 2:
        raise ImageFormatError(f"PGM needs (H, W) data, got {q.shape}")
    with open(path, "wb") as f:
        f.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode())
        f.write(q.tobytes())


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PPM (P6) or PNG as float32 (H, W, 3) in [0, 1]."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        from PIL import Image

        try:
            with Image.open(path) as im:
                im.load()
                if im.mode not in ("RGB", "RGBA", "L", "P"):
                    raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode}")
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, SyntaxError) as exc:
            raise ImageFormatError(f"{path}: {exc}") from exc
        return arr.astype(np.float32) / np.float32(255)
    raise ImageFormatError(f"{path}: unsupported image type {suffix!r}")


def save_image(img: np.ndarray, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(path, img)
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(_quantise(img), mode="RGB").save(path)
    else:
        raise ImageFormatError(f"{path}: unsupported image type {suffix!r}")


@dataclass(frozen=True)
class DegradeParams:
    """Colour cast, veiling light and scattering blur.

    ``out = (1 - beta) * (blur(clean) * cast) + beta * veil``, clipped to [0, 1].
    """

    cast: tuple[float, float, float] = (1.0, 1.0, 1.0)
    veil: tuple[float, float, float] = (0.0, 0.0, 0.0)
    beta: float = 0.0
    blur_sigma: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if any(not 0.0 < c <= 1.0 for c in self.cast):
            raise ValueError(f"cast multipliers must lie in (0, 1], got {self.cast}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    out = gaussian_filter1d(img, sigma, axis=0, mode="reflect", truncate=3.0)
    return gaussian_filter1d(out, sigma, axis=1, mode="reflect", truncate=3.0)


def degrade(clean: np.ndarray, p: DegradeParams) -> np.ndarray:
    cast = np.asarray(p.cast, dtype=np.float32)
    veil = np.asarray(p.veil, dtype=np.float32)
    out = (1.0 - p.beta) * (_blur(clean, p.blur_sigma) * cast) + p.beta * veil
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_degrade_params(rng: np.random.Generator) -> DegradeParams:
    """Draw a random underwater-style degradation; red is always attenuated most."""
    r, g, b = np.sort(rng.uniform(0.4, 1.0, size=3))
    g, b = (g, b) if rng.random() < 0.5 else (b, g)
    veil = (rng.uniform(0.0, 0.2), rng.uniform(0.3, 0.7), rng.uniform(0.4, 0.8))
    return DegradeParams(
        cast=(float(r), float(g), float(b)),
        veil=tuple(float(v) for v in veil),
        beta=float(rng.uniform(0.1, 0.5)),
        blur_sigma=float(rng.uniform(0.5, 2.0)),
    )


def synthetic_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Procedural clean scene: colour gradient, gratings and a few flat shapes."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    yy /= height
    xx /= width
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)[..., None]
    ramp = (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-6)
    img = c0 * (1 - ramp) + c1 * ramp
    for _ in range(rng.integers(1, 4)):
        fy, fx = rng.uniform(1, 8, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[..., None]
        img = img + rng.uniform(0.03, 0.15) * wave * rng.uniform(0.2, 1.0, size=3)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.05, 0.3, size=2)
        colour = rng.uniform(0, 1, size=3)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[mask] = 0.3 * img[mask] + 0.7 * colour
    img = img + rng.normal(0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class Pair:
    degraded: np.ndarray
    clean: np.ndarray
    ident: str


@dataclass
class PairBatch:
    degraded: torch.Tensor
    clean: torch.Tensor
    idents: list[str]


def synthetic_pairs(count: int, size: int, seed: int) -> list[Pair]:
    """Deterministic synthetic benchmark of ``count`` square image pairs."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        clean = synthetic_texture(rng, size, size)
        pairs.append(Pair(degrade(clean, sample_degrade_params(rng)), clean, f"synth{seed}_{i:04d}"))
    return pairs


def paired_directory(root) -> tuple[list[Pair], list[str]]:
    """Load ``root/input/*`` against ``root/gt/*`` matched by file stem.

    Returns the pairs and the list of files that had no partner.
    """
    root = Path(root)
    sides = {}
    for side in ("input", "gt"):
        d = root / side
        if not d.is_dir():
            raise DataError(f"missing directory {d}")
        sides[side] = {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    stems = sorted(set(sides["input"]) & set(sides["gt"]))
    unpaired = sorted(str(p) for side in sides.values() for s, p in side.items() if s not in stems)
    for path in unpaired:
        log.warning("no partner for %s, skipping", path)
    pairs = []
    for stem in stems:
        degraded, clean = load_image(sides["input"][stem]), load_image(sides["gt"][stem])
        if degraded.shape != clean.shape:
            log.warning("shape mismatch for %s: %s vs %s, skipping", stem, degraded.shape, clean.shape)
            unpaired.append(str(sides["input"][stem]))
            continue
        pairs.append(Pair(degraded, clean, stem))
    return pairs, unpaired


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


def _reflect_to(img: np.ndarray, patch: int) -> np.ndarray:
    ph = max(0, patch - img.shape[0])
    pw = max(0, patch - img.shape[1])
    mode = "reflect" if ph < img.shape[0] and pw < img.shape[1] else "symmetric"
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode=mode)


def sample_patches(pairs: list[Pair], patch: int, batch: int, rng: np.random.Generator,
                   flip: bool = False) -> PairBatch:
    """Draw ``batch`` aligned random crops; the same window cuts both images."""
    usable = [p for p in pairs if p.clean.shape[0] >= patch and p.clean.shape[1] >= patch]
    if len(usable) < len(pairs):
        log.warning("%d image(s) smaller than %d px skipped", len(pairs) - len(usable), patch)
    if not usable:
        if not pairs:
            raise DataError("no image pairs to sample from")
        usable = [Pair(_reflect_to(p.degraded, patch), _reflect_to(p.clean, patch), p.ident) for p in pairs]
    degraded, clean, idents = [], [], []
    for _ in range(batch):
        p = usable[int(rng.integers(len(usable)))]
        h, w = p.clean.shape[:2]
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        d = p.degraded[y:y + patch, x:x + patch]
        c = p.clean[y:y + patch, x:x + patch]
        if flip and rng.random() < 0.5:
            d, c = d[:, ::-1], c[:, ::-1]
        degraded.append(to_tensor(d))
        clean.append(to_tensor(c))
        idents.append(p.ident)
    return PairBatch(torch.stack(degraded), torch.stack(clean), idents)


def iter_images(directory) -> list[str]:
    return sorted(os.path.join(directory, f) for f in os.listdir(directory)
                  if Path(f).suffix.lower() in IMAGE_SUFFIXES)
