"""Synaptic-operation energy accounting.

Each weighted layer is described by a :class:`LayerSpec` that names the
spike tensor feeding it.  ``SOP = fr * FLOP`` where ``fr`` is the measured
mean of that input tensor; spike-driven layers are billed at the accumulate
cost and, for real-valued inputs, the first layer at the multiply-accumulate
cost.  BN is folded into the preceding layer and costs nothing extra; LIF
updates and the elementwise SGU product are not billed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import compute as C
from .data import DenseDataset
from .errors import AccountingError, DescriptorError, OracleError
from .layers import SpikeSCR

E_MAC_PJ = 4.6
E_AC_PJ = 0.9
INPUT = "input"

LAYER_KINDS = ("linear", "conv1d", "attn_qk", "attn_av", "elementwise")


@dataclass(frozen=True)
class LayerSpec:
    """One billable operation.

    ``source`` names the spike tensor whose firing rate scales the layer;
    ``INPUT`` refers to the raw network input.
    """

    name: str
    kind: str
    source: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 1
    groups: int = 1
    stride: int = 1
    padding: int = 0
    heads: int = 0
    head_dim: int = 0
    per_step: int = 0  # elementwise ops per time step


def count_flops(layer: LayerSpec, t_steps: int, batch: int = 1) -> int:
    """Multiply-accumulate count of ``layer`` over ``batch`` samples of ``t_steps`` steps."""
    if t_steps < 1 or batch < 0:
        raise DescriptorError(f"{layer.name}: need t_steps >= 1 and batch >= 0")
    k = layer.kind
    if k == "linear":
        return layer.in_features * layer.out_features * t_steps * batch
    if k == "conv1d":
        if layer.in_features % layer.groups or layer.out_features % layer.groups:
            raise DescriptorError(f"{layer.name}: channels not divisible by groups={layer.groups}")
        l_out = (t_steps + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if l_out < 1:
            raise DescriptorError(f"{layer.name}: empty convolution output")
        return layer.in_features // layer.groups * layer.out_features * layer.kernel * l_out * batch
    if k in ("attn_qk", "attn_av"):
        return t_steps * t_steps * layer.head_dim * layer.heads * batch
    if k == "elementwise":
        return layer.per_step * t_steps * batch
    raise DescriptorError(f"{layer.name}: unsupported layer kind {k!r}")


def _block_input(i: int) -> str:
    return "sem.lif" if i == 0 else f"blocks.{i - 1}.output"


def model_layers(model: SpikeSCR, bill_float_ops: bool = False) -> list[LayerSpec]:
    """Billable layers in forward order, with the spike tensor feeding each."""
    cfg = model.cfg
    d, e = cfg.hidden, cfg.sgc_expansion * cfg.hidden
    out = [LayerSpec("sem.conv", "conv1d", INPUT, cfg.input_channels, d, cfg.sem_kernel,
                     padding=cfg.sem_kernel // 2)]
    for i, blk in enumerate(model.blocks):
        p = f"blocks.{i}"
        src = _block_input(i)
        for br in ("q", "k", "v"):
            out.append(LayerSpec(f"{p}.ssa.{br}", "linear", src, d, d))
        qk_src = f"{p}.ssa.lif_rq" if cfg.use_rope else f"{p}.ssa.lif_q"
        out.append(LayerSpec(f"{p}.ssa.qk", "attn_qk", qk_src, heads=cfg.n_heads, head_dim=cfg.head_dim))
        out.append(LayerSpec(f"{p}.ssa.av", "attn_av", f"{p}.ssa.lif_v", heads=cfg.n_heads,
                             head_dim=cfg.head_dim))
        if bill_float_ops:
            if cfg.use_rope:
                # two multiplies per rotated element, queries and keys
                out.append(LayerSpec(f"{p}.ssa.rope", "elementwise", "", per_step=4 * d))
            out.append(LayerSpec(f"{p}.ssa.scale", "elementwise", "", per_step=d))
        if cfg.merge_proj:
            out.append(LayerSpec(f"{p}.ssa.proj", "linear", f"{p}.ssa.lif_attn", d, d))
        out.append(LayerSpec(f"{p}.sgc.pw1", "conv1d", f"{p}.ssa.output", d, e, 1))
        out.append(LayerSpec(f"{p}.sgc.dw", "conv1d", f"{p}.sgc.lif1", e, e, cfg.dw_kernel, groups=e,
                             padding=cfg.dw_kernel // 2))
        width = 2 * d if cfg.use_sgu else d
        out.append(LayerSpec(f"{p}.sgc.pw2", "conv1d", f"{p}.sgc.lif2", e, width, 1))
        if cfg.use_sgu:
            out.append(LayerSpec(f"{p}.sgc.sgu.w", "linear", f"{p}.sgc.sgu.lif1", d, d))
    out.append(LayerSpec("head.fc", "linear", f"blocks.{cfg.n_blocks - 1}.output", d, cfg.n_classes))
    return out


# -- firing rates ---------------------------------------------------------------

def measure_firing_rates(model: SpikeSCR, data: DenseDataset, batch_size: int = 256) -> dict[str, float]:
    """Mean of every recorded spike tensor over all batch, time and channel positions.

    The returned mapping also carries the mean raw input entry under ``"input"``.
    """
    was_training = model.training
    model.eval()
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    try:
        with C.no_grad():
            for i in range(0, len(data), batch_size):
                xb = data.x[i:i + batch_size]
                model(xb)
                tensors = {INPUT: xb, **model.spike_boundaries()}
                for name, arr in tensors.items():
                    sums[name] = sums.get(name, 0.0) + float(np.asarray(arr, dtype=np.float64).sum())
                    counts[name] = counts.get(name, 0) + int(np.asarray(arr).size)
    finally:
        model.train(was_training)
    return {k: sums[k] / counts[k] for k in sums if counts[k]}


@dataclass
class FiringRateLog:
    """Per monitored neuron layer, one mean spike probability per epoch."""

    rates: dict[str, list[float]] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "FiringRateLog":
        out: dict[str, list[float]] = {}
        for row in rows:
            for key, val in row.items():
                if key.startswith("fr_"):
                    out.setdefault(key[3:], []).append(float(val))
        return cls(out)

    def layers(self) -> list[str]:
        return sorted(self.rates)

    def final(self) -> dict[str, float]:
        return {k: v[-1] for k, v in self.rates.items() if v}

    def spread(self, layer: str, last: int) -> float:
        """Max minus min of ``layer``'s rate over the final ``last`` epochs."""
        tail = self.rates[layer][-last:]
        return float(max(tail) - min(tail))


# -- energy -----------------------------------------------------------------------

@dataclass
class LayerEnergy:
    name: str
    kind: str
    flops: int
    fr: float
    sops: float
    billing: str  # "ac" or "mac"
    energy_pj: float


@dataclass
class EnergyReport:
    layers: list[LayerEnergy]
    input_kind: str
    t_steps: int
    e_mac_pj: float = E_MAC_PJ
    e_ac_pj: float = E_AC_PJ

    @property
    def e_mac_joules(self) -> float:
        return sum(r.energy_pj for r in self.layers if r.billing == "mac") * 1e-12

    @property
    def e_ac_joules(self) -> float:
        return sum(r.energy_pj for r in self.layers if r.billing == "ac") * 1e-12

    @property
    def e_total_mj(self) -> float:
        return (self.e_mac_joules + self.e_ac_joules) * 1e3

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.layers)

    @property
    def total_sops(self) -> float:
        return sum(r.sops for r in self.layers)

    def to_dict(self) -> dict:
        return {
            "input_kind": self.input_kind,
            "t_steps": self.t_steps,
            "constants": {"e_mac_pj": self.e_mac_pj, "e_ac_pj": self.e_ac_pj},
            "layers": [asdict(r) for r in self.layers],
            "totals": {
                "flops": self.total_flops,
                "sops": self.total_sops,
                "e_mac_joules": self.e_mac_joules,
                "e_ac_joules": self.e_ac_joules,
                "e_total_mj": self.e_total_mj,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["name", "kind", "flops", "fr", "sops", "billing", "energy_pj"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.layers:
            w.writerow(asdict(r))
        return buf.getvalue()


def compute_energy(layers: list[LayerSpec], rates: dict[str, float], t_steps: int,
                   input_kind: str = "spike", e_mac_pj: float = E_MAC_PJ,
                   e_ac_pj: float = E_AC_PJ) -> EnergyReport:
    """Per-sample energy of ``layers`` given measured input firing rates.

    With ``input_kind="real"`` the first layer is billed at the MAC cost on its
    full FLOP count; every other layer is billed at the AC cost on its SOPs.
    Elementwise float ops (when present) are billed as MACs.
    """
    if input_kind not in ("spike", "real"):
        raise AccountingError(f"input_kind must be 'spike' or 'real', got {input_kind!r}")
    rows = []
    for i, layer in enumerate(layers):
        flops = count_flops(layer, t_steps)
        if layer.kind == "elementwise":
            rows.append(LayerEnergy(layer.name, layer.kind, flops, 1.0, float(flops), "mac",
                                    flops * e_mac_pj))
            continue
        if i == 0 and input_kind == "real":
            rows.append(LayerEnergy(layer.name, layer.kind, flops, 1.0, float(flops), "mac",
                                    flops * e_mac_pj))
            continue
        if layer.source not in rates:
            raise AccountingError(f"no firing rate for {layer.source!r} (input of layer {layer.name})")
        fr = float(rates[layer.source])
        sops = fr * flops
        rows.append(LayerEnergy(layer.name, layer.kind, flops, fr, sops, "ac", sops * e_ac_pj))
    return EnergyReport(rows, input_kind, t_steps, e_mac_pj, e_ac_pj)


def profile(model: SpikeSCR, data: DenseDataset, input_kind: str = "spike", *,
            e_mac_pj: float = E_MAC_PJ, e_ac_pj: float = E_AC_PJ,
            bill_float_ops: bool = False) -> EnergyReport:
    rates = measure_firing_rates(model, data) if len(data) else {}
    layers = model_layers(model, bill_float_ops)
    if not len(data):
        rates = {layer.source: 0.0 for layer in layers}
    return compute_energy(layers, rates, data.t_steps, input_kind, e_mac_pj, e_ac_pj)


# -- independent oracle -------------------------------------------------------------

def event_count_oracle(out_features: int, spikes) -> int:
    """Accumulate operations a linear layer with ``out_features`` outputs performs.

    Walks every input position; each spike triggers one accumulate per output.
    """
    x = np.asarray(spikes)
    if not np.all((x == 0) | (x == 1)):
        raise OracleError("event-count oracle needs a binary spike tensor")
    total = 0
    for row in x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1):
        for v in row:
            if v:
                total += out_features
    return total
