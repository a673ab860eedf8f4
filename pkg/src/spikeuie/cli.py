"""Command-line entry point: ``spikeuie {train,eval,energy,ablate,spikemap}``.

Every command writes delimited output plus a matching PNG figure into
``--out``. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import torch
import torch.nn.functional as F

from . import __version__
from .config import ConfigError, TrainConfig, load_config
from .data import DataError, ImageFormatError, Pair, load_image, paired_directory, synthetic_pairs, to_tensor
from .energy import TD_GRID, build_ledger, profile_layers, report, td_sweep
from .network import FormatError, IncompatibleCheckpointError, load_checkpoint

log = logging.getLogger("spikeuie")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

EVAL_COLUMNS = ("image", "psnr", "ssim", "psnr_input", "ssim_input")
SWEEP_COLUMNS = ("T", "D", "TxD", "spike_pJ", "dense_pJ", "total_pJ", "total_mJ")
ABLATION_COLUMNS = ("model", "fdm", "mda", "mplb", "psnr", "ssim", "psnr_input", "params")


class UsageError(ValueError):
    """Bad command-line arguments that argparse cannot catch by itself."""


def _write_csv(path: Path, columns, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def _cell(v) -> str:
    if isinstance(v, float):
        return "inf" if v == math.inf else repr(v)
    return str(v)


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    data = cfg.data
    if args.seed is not None:
        data = replace(data, seed=args.seed)
    if args.data is not None:
        data = replace(data, root=args.data)
    out = args.out if args.out is not None else cfg.out
    return cfg.replace(data=data, out=out)


def _eval_pairs(args) -> tuple[list[Pair], list[str]]:
    if args.data in (None, "synthetic"):
        seed = 9000 if args.seed is None else args.seed
        return synthetic_pairs(args.count, args.size, seed), []
    return paired_directory(args.data)


def _pad4(img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[2:]
    ph, pw = (-h) % 4, (-w) % 4
    if not (ph or pw):
        return img
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(img, (0, pw, 0, ph), mode=mode)


def _sample_images(args) -> torch.Tensor:
    """Stack of images used for firing-rate measurement; all must share a size."""
    if args.image:
        imgs = [to_tensor(load_image(p)) for p in args.image]
    else:
        pairs, _ = _eval_pairs(args)
        imgs = [to_tensor(p.degraded) for p in pairs]
    if not imgs:
        raise DataError("no sample images")
    if len({tuple(t.shape) for t in imgs}) != 1:
        raise DataError("sample images must share one size: " + ", ".join(str(tuple(t.shape[1:])) for t in imgs))
    return _pad4(torch.stack(imgs))


def cmd_train(args) -> int:
    from . import plotting
    from .train import replay, train

    if args.replay:
        out = Path(args.out or "runs/replay")
        result = replay(args.replay, out)
    else:
        cfg = _config(args)
        if args.iterations is not None:
            cfg = cfg.replace(schedule=replace(cfg.schedule, iterations=args.iterations))
        out = Path(cfg.out)
        log.info("training %d iterations into %s", cfg.schedule.iterations, out)
        result = train(cfg, out, callback=_progress(cfg.schedule.iterations))
    plotting.loss_curve(result.rows, out / "loss_curve.png")
    last = result.rows[-1]
    print(f"checkpoint: {result.checkpoint}")
    print(f"final total loss {last['total']:.5f} (first {result.rows[0]['total']:.5f})")
    return EXIT_OK


def _progress(iterations: int):
    every = max(1, iterations // 20)

    def callback(row: dict) -> None:
        if row["iter"] % every == 0 or row["iter"] == iterations:
            log.info("iter %d total %.5f psnr %.2f", row["iter"], row["total"], row["psnr_sample"])

    return callback


def cmd_eval(args) -> int:
    from . import plotting
    from .train import evaluate, summarise

    state = load_checkpoint(args.checkpoint)
    pairs, unpaired = _eval_pairs(args)
    for path in unpaired:
        log.warning("unpaired, skipped: %s", path)
    if not pairs:
        raise DataError(f"no image pairs found in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluate(state.model, pairs, out / "restored" if args.dump else None)
    summary = summarise(rows)
    _write_csv(out / "per_image.csv", EVAL_COLUMNS, rows)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("metric", "value"))
        for k, v in summary.items():
            w.writerow((k, _cell(v)))
        w.writerow(("warnings", len(unpaired)))
    plotting.eval_scatter(rows, out / "eval_scatter.png")
    print(f"images: {summary['count']}  warnings: {len(unpaired)}")
    for key in ("psnr", "ssim"):
        print(f"{key}: mean {summary[f'mean_{key}']:.4f}  median {summary[f'median_{key}']:.4f}  "
              f"(degraded input mean {summary[f'mean_{key}_input']:.4f})")
    return EXIT_OK


def cmd_energy(args) -> int:
    from . import plotting

    state = load_checkpoint(args.checkpoint)
    layers = profile_layers(state.model, _sample_images(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.td_sweep:
        cells = td_sweep(layers, TD_GRID)
        rows = [{"T": t, "D": d, "TxD": t * d, "spike_pJ": ledger.subtotal_pj("spike"),
                 "dense_pJ": ledger.subtotal_pj("dense"), "total_pJ": ledger.total_pj,
                 "total_mJ": ledger.total_mj} for t, d, ledger in cells]
        _write_csv(out / "td_sweep.csv", SWEEP_COLUMNS, rows)
        plotting.td_sweep_bars(cells, out / "td_sweep.png")
        for r in rows:
            print(f"T={r['T']} D={r['D']}  total {r['total_mJ']:.6f} mJ")
        return EXIT_OK
    t = args.timesteps or state.config.timesteps
    d = args.d_levels or state.config.d_levels
    ledger = build_ledger(layers, t, d)
    (out / "energy.csv").write_text(report(ledger, "csv"))
    plotting.energy_bars(ledger, out / "energy.png")
    print(report(ledger), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import plotting
    from .train import heldout_pairs, run_ablation

    cfg = _config(args)
    if args.iterations is not None:
        cfg = cfg.replace(schedule=replace(cfg.schedule, iterations=args.iterations))
    out = Path(cfg.out)
    table = run_ablation(cfg, out, eval_pairs=heldout_pairs(cfg))
    _write_csv(out / "ablation.csv", ABLATION_COLUMNS, table)
    plotting.ablation_bars(table, out / "ablation.png")
    for r in table:
        print(f"{r['model']:<5} FDM={int(r['fdm'])} MDA={int(r['mda'])} MPLB={int(r['mplb'])}  "
              f"PSNR {r['psnr']:.3f}  SSIM {r['ssim']:.4f}")
    return EXIT_OK


def cmd_spikemap(args) -> int:
    from . import plotting
    from .blocks import dump_spike_maps

    state = load_checkpoint(args.checkpoint)
    blocks = state.model.mplb_blocks()
    if not blocks:
        raise UsageError("the checkpoint has no MPLB blocks (net.use_mplb is false)")
    if not 0 <= args.block < len(blocks):
        listing = ", ".join(f"{i} ({name})" for i, (name, _) in enumerate(blocks))
        raise UsageError(f"block index {args.block} out of range; valid indices: {listing}")
    name, block = blocks[args.block]
    img = _pad4(to_tensor(load_image(args.image))[None])
    block.capture = {}
    try:
        state.model.eval()
        with torch.no_grad():
            state.model(img)
        capture = block.capture
    finally:
        block.capture = None
    paths = dump_spike_maps(capture, args.out, name)
    plotting.spike_grid({k: v.numpy() for k, v in capture.items()}, Path(args.out) / name / "spikes.png")
    print(f"{len(paths)} maps written to {Path(args.out) / name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikeuie", description="Spiking underwater image enhancement.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False, checkpoint=False, data=False):
        if config:
            sp.add_argument("--config", help="flat-key config file")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if data:
            sp.add_argument("--data", help="paired directory with input/ and gt/, or 'synthetic'")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model")
    common(t, config=True, data=True)
    t.add_argument("--out", help="run directory (overrides the config's out)")
    t.add_argument("--iterations", type=int, help="override schedule.iterations")
    t.add_argument("--replay", metavar="MANIFEST", help="re-run the training recorded in a manifest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on paired data")
    common(e, checkpoint=True, data=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dump", action="store_true", help="also write restored images")
    e.add_argument("--count", type=int, default=32, help="synthetic set size")
    e.add_argument("--size", type=int, default=64, help="synthetic image size")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("energy", help="per-layer energy estimate")
    common(g, checkpoint=True, data=True)
    g.add_argument("--out", required=True)
    g.add_argument("--image", nargs="+", help="sample image(s) for firing-rate measurement")
    g.add_argument("--td-sweep", action="store_true", help="price the (T, D) grid 1x1, 1x4, 4x1, 4x4")
    g.add_argument("--timesteps", type=int, help="price at this T using the measured rates")
    g.add_argument("--d-levels", type=int, help="price at this D using the measured rates")
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_energy)

    a = sub.add_parser("ablate", help="train and compare the four toggle configurations")
    common(a, config=True, data=True)
    a.add_argument("--out")
    a.add_argument("--iterations", type=int)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("spikemap", help="dump SN1-SN4 spike maps of one MPLB")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--block", type=int, default=0, help="MPLB index in module order")
    s.set_defaults(func=cmd_spikemap)
    return p


def main(argv=None) -> int:
    from .train import NumericAbort

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, ImageFormatError, FormatError, IncompatibleCheckpointError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericAbort as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
