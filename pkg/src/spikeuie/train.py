"""Training loop, evaluation, ablation harness and run manifests."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .config import TrainConfig, dump_config, parse_config
from .data import Pair, paired_directory, sample_patches, synthetic_pairs, to_image, to_tensor
from .losses import psnr, ssim_metric, total_loss
from .network import SpikingEnhancer, load_checkpoint, save_checkpoint
from .tensor import backward

__all__ = [
    "NumericAbort",
    "LOG_COLUMNS",
    "RunResult",
    "training_pairs",
    "heldout_pairs",
    "train",
    "replay",
    "evaluate",
    "summarise",
    "ABLATION_ROWS",
    "ablation_config",
    "run_ablation",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "l_pix", "l_ssim", "l_fft", "total", "psnr_sample", "lr")
MANIFEST = "manifest.json"
LOSS_LOG = "loss_log.csv"
CHECKPOINT = "model.ckpt"


class NumericAbort(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class RunResult:
    model: SpikingEnhancer
    out_dir: Path
    checkpoint: Path
    rows: list[dict]


def training_pairs(cfg: TrainConfig) -> list[Pair]:
    if cfg.data.root == "synthetic":
        return synthetic_pairs(cfg.data.synthetic_count, cfg.data.synthetic_size, cfg.data.seed)
    pairs, unpaired = paired_directory(cfg.data.root)
    if unpaired:
        log.warning("%d unpaired file(s) ignored", len(unpaired))
    return pairs


def heldout_pairs(cfg: TrainConfig) -> list[Pair]:
    """Synthetic evaluation set drawn from a seed disjoint from the training pool."""
    return synthetic_pairs(cfg.data.heldout_count, cfg.data.patch, cfg.data.heldout_seed)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    lr = cfg.optim.lr
    if cfg.schedule.lr_decay == "none":
        return lr
    lo = min(cfg.schedule.min_lr, lr)
    frac = step / max(cfg.schedule.iterations, 1)
    return lo + 0.5 * (lr - lo) * (1.0 + math.cos(math.pi * frac))


def _write_manifest(out_dir: Path, cfg: TrainConfig) -> None:
    manifest = {
        "config": dump_config(cfg),
        "seed": cfg.data.seed,
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "version": __version__,
        "torch": torch.__version__,
        "loss_log": LOSS_LOG,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def _format_row(row: dict) -> list[str]:
    return [str(row["iter"])] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]]


def train(cfg: TrainConfig, out_dir=None,
          pairs: list[Pair] | None = None,
          callback: Callable[[dict], None] | None = None) -> RunResult:
    """Train from scratch. Deterministic for a fixed ``cfg.data.seed`` on one thread.

    The manifest is written before the first step and the loss log is
    appended row by row. On a non-finite loss the previous checkpoint is left
    untouched and ``NumericAbort`` is raised.
    """
    out_dir = Path(out_dir or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(out_dir, cfg)
    torch.manual_seed(cfg.data.seed)
    rng = np.random.default_rng(cfg.data.seed)
    if pairs is None:
        pairs = training_pairs(cfg)
    model = SpikingEnhancer(cfg.net)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.optim.lr,
                           betas=(cfg.optim.beta1, cfg.optim.beta2),
                           weight_decay=cfg.optim.weight_decay)
    ckpt = out_dir / CHECKPOINT
    rows = []
    with open(out_dir / LOSS_LOG, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for step in range(1, cfg.schedule.iterations + 1):
            lr = _lr_at(cfg, step - 1)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = sample_patches(pairs, cfg.data.patch, cfg.data.batch, rng, flip=cfg.data.flip)
            out = model(batch.degraded)
            losses = total_loss(out, batch.clean, cfg.loss)
            if not torch.isfinite(losses.total):
                raise NumericAbort(f"non-finite loss at iteration {step}; last good checkpoint kept at {ckpt}")
            opt.zero_grad(set_to_none=False)
            backward(losses.total)
            opt.step()
            row = {"iter": step, **losses.as_row(),
                   "psnr_sample": psnr(out.full.detach().clamp(0, 1), batch.clean), "lr": lr}
            rows.append(row)
            writer.writerow(_format_row(row))
            f.flush()
            if callback is not None:
                callback(row)
            every = cfg.schedule.checkpoint_every
            if every > 0 and step % every == 0 and step != cfg.schedule.iterations:
                save_checkpoint(model, str(ckpt), step)
    save_checkpoint(model, str(ckpt), cfg.schedule.iterations)
    return RunResult(model, out_dir, ckpt, rows)


def replay(manifest_path, out_dir) -> RunResult:
    """Re-run the training recorded in a manifest."""
    manifest = json.loads(Path(manifest_path).read_text())
    cfg = parse_config(manifest["config"])
    return train(cfg, out_dir)


def read_loss_log(path) -> list[list[str]]:
    with open(path, newline="") as f:
        return list(csv.reader(f))


@torch.no_grad()
def evaluate(model: SpikingEnhancer, pairs: list[Pair], dump_dir=None) -> list[dict]:
    """Per-image PSNR/SSIM of the restoration, with the degraded input as reference point."""
    from .data import save_image

    model.eval()
    rows = []
    for p in pairs:
        degraded = to_tensor(p.degraded)[None]
        clean = to_tensor(p.clean)[None]
        restored = model.enhance(degraded)
        rows.append({
            "image": p.ident,
            "psnr": psnr(restored, clean),
            "ssim": float(ssim_metric(restored.double(), clean.double())),
            "psnr_input": psnr(degraded, clean),
            "ssim_input": float(ssim_metric(degraded.double(), clean.double())),
        })
        if dump_dir is not None:
            os.makedirs(dump_dir, exist_ok=True)
            save_image(to_image(restored[0]), os.path.join(dump_dir, f"{p.ident}.png"))
    return rows


def summarise(rows: list[dict]) -> dict[str, float]:
    out = {}
    for key in ("psnr", "ssim", "psnr_input", "ssim_input"):
        vals = [r[key] for r in rows]
        out[f"mean_{key}"] = statistics.fmean(vals) if vals else float("nan")
        out[f"median_{key}"] = statistics.median(vals) if vals else float("nan")
    out["count"] = len(rows)
    return out


# (label, use_fdm, use_mda, use_mplb) in the order of the component ablation table
ABLATION_ROWS = (
    ("(a)", False, False, False),
    ("(b)", True, False, False),
    ("(c)", True, True, False),
    ("Ours", True, True, True),
)


def ablation_config(cfg: TrainConfig, use_fdm: bool, use_mda: bool, use_mplb: bool) -> TrainConfig:
    return cfg.replace(net=replace(cfg.net, use_fdm=use_fdm, use_mda=use_mda, use_mplb=use_mplb))


def run_ablation(cfg: TrainConfig, out_dir, rows=ABLATION_ROWS,
                 eval_pairs: list[Pair] | None = None) -> list[dict]:
    """Train and evaluate each toggle configuration under one seed and budget."""
    out_dir = Path(out_dir)
    pairs = training_pairs(cfg)
    if eval_pairs is None:
        eval_pairs = heldout_pairs(cfg)
    table = []
    for label, fdm, mda, mplb in rows:
        variant = ablation_config(cfg, fdm, mda, mplb)
        slug = label.strip("()").lower()
        result = train(variant, out_dir / f"variant_{slug}", pairs=pairs)
        summary = summarise(evaluate(result.model, eval_pairs))
        table.append({"model": label, "fdm": fdm, "mda": mda, "mplb": mplb,
                      "psnr": summary["mean_psnr"], "ssim": summary["mean_ssim"],
                      "psnr_input": summary["mean_psnr_input"],
                      "params": sum(p.numel() for p in result.model.parameters())})
    return table
