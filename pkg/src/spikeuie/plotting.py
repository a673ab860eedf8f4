"""Figures written next to the CSV reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .energy import EnergyLedger  # noqa: E402

__all__ = ["loss_curve", "energy_bars", "td_sweep_bars", "ablation_bars", "eval_scatter", "spike_grid"]


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve(rows: list[dict], path) -> None:
    its = [r["iter"] for r in rows]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    for key in ("total", "l_pix", "l_ssim", "l_fft"):
        ax.plot(its, [r[key] for r in rows], label=key, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_title("training loss")
    ax.legend(fontsize=8)
    ax2.plot(its, [r["psnr_sample"] for r in rows], lw=1, color="tab:green")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("dB")
    ax2.set_title("batch PSNR")
    _save(fig, path)


def energy_bars(ledger: EnergyLedger, path, top: int = 25) -> None:
    recs = ledger.records[:top]
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.28 * len(recs) + 1)))
    colours = ["tab:orange" if r.spec.kind == "dense" else "tab:blue" for r in recs]
    ax.barh(range(len(recs)), [r.energy_pj * 1e-9 for r in recs], color=colours)
    ax.set_yticks(range(len(recs)), [r.spec.name for r in recs], fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("energy (mJ)")
    ax.set_title(f"largest layers, T x D = {ledger.timesteps} x {ledger.d_levels} "
                 f"(total {ledger.total_mj:.4f} mJ; orange = dense, blue = spike-driven)", fontsize=9)
    _save(fig, path)


def td_sweep_bars(cells: list[tuple[int, int, EnergyLedger]], path) -> None:
    labels = [f"{t} x {d}" for t, d, _ in cells]
    spike = [ledger.subtotal_pj("spike") * 1e-9 for _, _, ledger in cells]
    dense = [ledger.subtotal_pj("dense") * 1e-9 for _, _, ledger in cells]
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.bar(labels, dense, label="dense", color="tab:orange")
    ax.bar(labels, spike, bottom=dense, label="spike-driven", color="tab:blue")
    ax.set_xlabel("T x D")
    ax.set_ylabel("energy (mJ)")
    ax.legend(fontsize=8)
    _save(fig, path)


def ablation_bars(table: list[dict], path) -> None:
    labels = [r["model"] for r in table]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax.bar(labels, [r["psnr"] for r in table], color="tab:blue")
    ax.axhline(table[0]["psnr_input"], color="grey", ls="--", lw=1, label="degraded input")
    lo = min([r["psnr"] for r in table] + [table[0]["psnr_input"]])
    ax.set_ylim(lo - 1.0, None)
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    ax2.bar(labels, [r["ssim"] for r in table], color="tab:green")
    ax2.set_ylabel("SSIM")
    _save(fig, path)


def eval_scatter(rows: list[dict], path) -> None:
    fin = [r for r in rows if np.isfinite(r["psnr"]) and np.isfinite(r["psnr_input"])]
    fig, ax = plt.subplots(figsize=(4.2, 4))
    if fin:
        x = [r["psnr_input"] for r in fin]
        y = [r["psnr"] for r in fin]
        ax.scatter(x, y, s=12)
        lo, hi = min(x + y) - 1, max(x + y) + 1
        ax.plot([lo, hi], [lo, hi], color="grey", lw=1, ls="--")
    ax.set_xlabel("degraded PSNR (dB)")
    ax.set_ylabel("restored PSNR (dB)")
    _save(fig, path)


def spike_grid(capture: dict[str, "np.ndarray"], path, sample: int = 0) -> None:
    """One panel per (branch, timestep), first channel of each branch."""
    names = list(capture)
    T = capture[names[0]].shape[0]
    fig, axes = plt.subplots(len(names), T, figsize=(1.6 * T, 1.6 * len(names)), squeeze=False)
    for i, name in enumerate(names):
        s = np.asarray(capture[name][:, sample, 0], dtype=np.float32)
        for t in range(T):
            ax = axes[i][t]
            ax.imshow(s[t], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if t == 0:
                ax.set_ylabel(name)
            if i == 0:
                ax.set_title(f"t={t + 1}", fontsize=8)
    _save(fig, path)
