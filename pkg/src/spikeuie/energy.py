"""Operation-count energy proxy.

Dense layers cost one multiply-accumulate per weight application,
``Hout*Wout * Cin * Cout * k^2 * E_MAC``. Spike-driven layers only
accumulate when a spike arrives, so their count is scaled by the measured
firing rate and by the ``T*D`` virtual steps a multi-level spike expands to:
``T*D * fr * Hout*Wout * Cin * Cout * k^2 * E_AC``.

Only convolutions are billed; normalisation, pooling, elementwise maths and
attention gates are left out.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import torch

from .blocks import Conv, ConvProbe

__all__ = [
    "E_MAC_PJ",
    "E_AC_PJ",
    "LayerSpec",
    "LayerRecord",
    "EnergyLedger",
    "layer_energy",
    "profile_layers",
    "measure_firing_rates",
    "build_ledger",
    "td_sweep",
    "report",
    "read_csv",
    "TD_GRID",
]

E_MAC_PJ = 4.9
E_AC_PJ = 0.9
TD_GRID = ((1, 1), (1, 4), (4, 1), (4, 4))
CSV_COLUMNS = ("name", "kind", "O", "c_in", "c_out", "k", "fr", "energy_pJ")
FOOTER = "Only convolutions are billed; tdBN, pooling, elementwise ops and attention gates are excluded."


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "spike" or "dense"
    h_out: int
    w_out: int
    c_in: int
    c_out: int
    k: int

    def __post_init__(self) -> None:
        if self.kind not in ("spike", "dense"):
            raise ValueError(f"kind must be 'spike' or 'dense', got {self.kind!r}")
        for name in ("h_out", "w_out", "c_in", "c_out", "k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive in layer {self.name}")

    @property
    def ops(self) -> int:
        """Dense operation count ``O^2 * Cin * Cout * k^2`` (``O^2`` generalised to Hout*Wout)."""
        return self.h_out * self.w_out * self.c_in * self.c_out * self.k * self.k

    @property
    def o_label(self) -> str:
        return str(self.h_out) if self.h_out == self.w_out else f"{self.h_out}x{self.w_out}"


def layer_energy(spec: LayerSpec, fr: float | None, timesteps: int, d_levels: int,
                 e_mac: float = E_MAC_PJ, e_ac: float = E_AC_PJ) -> float:
    """Energy of one layer in pJ. ``fr`` is ignored for dense layers."""
    if spec.kind == "dense":
        return spec.ops * e_mac
    if fr is None or not 0.0 <= fr <= 1.0:
        raise ValueError(f"firing rate must lie in [0, 1], got {fr} for layer {spec.name}")
    return (timesteps * d_levels) * fr * spec.ops * e_ac


@dataclass
class LayerRecord:
    spec: LayerSpec
    fr: float | None
    energy_pj: float


@dataclass
class EnergyLedger:
    records: list[LayerRecord] = field(default_factory=list)
    timesteps: int = 4
    d_levels: int = 4
    e_mac: float = E_MAC_PJ
    e_ac: float = E_AC_PJ

    @property
    def total_pj(self) -> float:
        total = 0.0
        for r in self.records:
            total += r.energy_pj
        return total

    @property
    def total_mj(self) -> float:
        return self.total_pj * 1e-9

    def subtotal_pj(self, kind: str) -> float:
        return sum(r.energy_pj for r in self.records if r.spec.kind == kind)


def build_ledger(layers: list[tuple[LayerSpec, float | None]], timesteps: int, d_levels: int,
                 e_mac: float = E_MAC_PJ, e_ac: float = E_AC_PJ) -> EnergyLedger:
    """Price every layer and order the records by energy, largest first."""
    records = [LayerRecord(spec, fr if spec.kind == "spike" else None,
                           layer_energy(spec, fr, timesteps, d_levels, e_mac, e_ac))
               for spec, fr in layers]
    records.sort(key=lambda r: -r.energy_pj)
    return EnergyLedger(records, timesteps, d_levels, e_mac, e_ac)


@torch.no_grad()
def profile_layers(model: torch.nn.Module, img: torch.Tensor) -> list[tuple[LayerSpec, float | None]]:
    """Run one eval-mode forward and return each billable conv's geometry and input firing rate.

    The firing rate is the fraction of nonzero elements in the spike tensor
    feeding the layer, pooled over timesteps and batch.
    """
    counts: dict[str, list] = {}

    def observe(conv: Conv, x: torch.Tensor, y: torch.Tensor) -> None:
        if not conv.billable:
            return
        name = getattr(conv, "layer_name", f"conv{len(counts)}")
        if name not in counts:
            spec = LayerSpec(name, "spike" if conv.spike_driven else "dense",
                             int(y.shape[-2]), int(y.shape[-1]), conv.c_in, conv.c_out, conv.k)
            counts[name] = [spec, 0, 0]
        entry = counts[name]
        entry[1] += int(torch.count_nonzero(x))
        entry[2] += x.numel()

    was_training = model.training
    model.eval()
    try:
        with ConvProbe(observe).attach():
            model(img)
    finally:
        model.train(was_training)
    return [(spec, nz / total if spec.kind == "spike" else None) for spec, nz, total in counts.values()]


def measure_firing_rates(model: torch.nn.Module, img: torch.Tensor) -> dict[str, float]:
    return {spec.name: fr for spec, fr in profile_layers(model, img) if spec.kind == "spike"}


def td_sweep(layers: list[tuple[LayerSpec, float | None]], grid=TD_GRID) -> list[tuple[int, int, EnergyLedger]]:
    """Price one frozen set of firing rates under each (T, D) cell."""
    return [(t, d, build_ledger(layers, t, d)) for t, d in grid]


def report(ledger: EnergyLedger, fmt: str = "text") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in ledger.records:
            s = r.spec
            w.writerow([s.name, s.kind, s.o_label, s.c_in, s.c_out, s.k,
                        "" if r.fr is None else repr(r.fr), repr(r.energy_pj)])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"{'layer':<40} {'kind':<5} {'O':>7} {'c_in':>5} {'c_out':>5} {'k':>2} {'fr':>7} {'energy (pJ)':>16}"]
    for r in ledger.records:
        s = r.spec
        fr = "-" if r.fr is None else f"{r.fr:.4f}"
        lines.append(f"{s.name:<40} {s.kind:<5} {s.o_label:>7} {s.c_in:>5} {s.c_out:>5} {s.k:>2} {fr:>7} {r.energy_pj:>16.1f}")
    lines.append(f"T x D = {ledger.timesteps} x {ledger.d_levels}")
    lines.append(f"spike-driven total: {ledger.subtotal_pj('spike') * 1e-9:.6f} mJ")
    lines.append(f"dense total:        {ledger.subtotal_pj('dense') * 1e-9:.6f} mJ")
    lines.append(f"total:              {ledger.total_mj:.6f} mJ")
    lines.append(FOOTER)
    return "\n".join(lines) + "\n"


def read_csv(text: str, timesteps: int, d_levels: int,
             e_mac: float = E_MAC_PJ, e_ac: float = E_AC_PJ) -> EnergyLedger:
    rows = list(csv.DictReader(io.StringIO(text)))
    records = []
    for row in rows:
        o = row["O"]
        h, w = (int(v) for v in o.split("x")) if "x" in o else (int(o), int(o))
        spec = LayerSpec(row["name"], row["kind"], h, w, int(row["c_in"]), int(row["c_out"]), int(row["k"]))
        fr = float(row["fr"]) if row["fr"] else None
        records.append(LayerRecord(spec, fr, float(row["energy_pJ"])))
    return EnergyLedger(records, timesteps, d_levels, e_mac, e_ac)
