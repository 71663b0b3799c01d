"""Throughput, energy, and power-breakdown reporting.

Energy is a pure linear form: each event class (one per Stats counter)
carries a per-event coefficient in femtojoules and belongs to one
component (memory, dma_crossbar, bpu, other). Coefficients are supplied
by a JSON file; the packaged default set is a calibrated fixture produced
by scripts/calibrate_coefficients.py, tuned so the component split on a
large convnet workload lands on the targeted breakdown. It is not a
silicon measurement and absolute joules carry no meaning beyond the
fixture.

Op counting: one multiply-accumulate is 2 Op, and one xnor_word_op is 16
MACs, so ops = 32 * xnor_word_ops. The clock frequency is always an
explicit input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .archsim import Stats
from .compiler import MemoryConfig
from .errors import ConfigMismatch, ParseError, SchemaError

OPS_PER_XNOR_WORD = 2 * 16  # 16 MACs per word op, 1 MAC = 2 Op

COMPONENTS = ("memory", "dma_crossbar", "bpu", "other")

# event class -> Stats counter it bills
EVENT_COUNTERS = {
    "src_read": "src_reads",
    "sink_read": "sink_reads",
    "sink_write": "sink_writes",
    "packed_write": "packed_writes",
    "param_read": "param_reads",
    "rowbank_read": "rowbank_reads",
    "rowbank_write": "rowbank_writes",
    "csr_shift": "csr_shifts",
    "xnor_word_op": "xnor_word_ops",
    "crossbar_rotation": "crossbar_rotations",
    "cycle_overhead": "cycles",
}


@dataclass(frozen=True)
class EnergyCoefficients:
    """Per-event femtojoule costs and the event -> component grouping."""

    femtojoules: dict
    components: dict

    def validate(self) -> None:
        want = set(EVENT_COUNTERS)
        missing = want - set(self.femtojoules)
        if missing:
            raise SchemaError(
                f"coefficient set is missing event classes {sorted(missing)}"
            )
        extra = set(self.femtojoules) - want
        if extra:
            raise SchemaError(f"unknown event classes {sorted(extra)}")
        for event, fj in self.femtojoules.items():
            if not isinstance(fj, (int, float)) or fj < 0:
                raise SchemaError(f"{event}: energy must be a number >= 0, got {fj!r}")
            comp = self.components.get(event)
            if comp not in COMPONENTS:
                raise SchemaError(
                    f"{event}: component {comp!r} not one of {COMPONENTS}"
                )

    @classmethod
    def from_dict(cls, doc: dict) -> "EnergyCoefficients":
        if not isinstance(doc, dict):
            raise SchemaError("coefficient file: expected an object")
        fj, comp = {}, {}
        for event, entry in doc.items():
            if not isinstance(entry, dict) or set(entry) != {"fJ", "component"}:
                raise SchemaError(
                    f"{event}: expected an object with fields fJ and component"
                )
            fj[event] = entry["fJ"]
            comp[event] = entry["component"]
        coeffs = cls(femtojoules=fj, components=comp)
        coeffs.validate()
        return coeffs

    def to_dict(self) -> dict:
        return {
            e: {"fJ": self.femtojoules[e], "component": self.components[e]}
            for e in sorted(self.femtojoules)
        }


def load_coefficients(path) -> EnergyCoefficients:
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from None
    return EnergyCoefficients.from_dict(doc)


def default_coefficients() -> EnergyCoefficients:
    """The packaged, calibration-fixture coefficient set."""
    text = resources.files("xbnn").joinpath("data/default_coefficients.json")
    return EnergyCoefficients.from_dict(json.loads(text.read_text()))


@dataclass
class EnergyReport:
    frequency_hz: float
    cycles: int
    ops: int
    total_energy_j: float
    event_energy_j: dict
    component_energy_j: dict
    component_pct: dict
    percentages_defined: bool
    runtime_s: float
    throughput_ops_per_s: float
    power_w: float
    efficiency_ops_per_j: float

    def to_dict(self) -> dict:
        return {
            "frequency_hz": self.frequency_hz,
            "cycles": self.cycles,
            "ops": self.ops,
            "total_energy_j": self.total_energy_j,
            "event_energy_j": self.event_energy_j,
            "component_energy_j": self.component_energy_j,
            "component_pct": self.component_pct,
            "percentages_defined": self.percentages_defined,
            "runtime_s": self.runtime_s,
            "throughput_ops_per_s": self.throughput_ops_per_s,
            "power_w": self.power_w,
            "efficiency_ops_per_j": self.efficiency_ops_per_j,
        }

    def render_text(self) -> str:
        lines = [
            f"cycles          {self.cycles}",
            f"ops             {self.ops}",
            f"frequency       {self.frequency_hz / 1e6:.3f} MHz",
            f"runtime         {self.runtime_s:.6e} s",
            f"throughput      {self.throughput_ops_per_s:.6e} Op/s",
            f"total energy    {self.total_energy_j:.6e} J",
            f"power           {self.power_w:.6e} W",
            f"efficiency      {self.efficiency_ops_per_j:.6e} Op/J (= Op/s/W)",
            "component breakdown:",
        ]
        for comp in COMPONENTS:
            pct = self.component_pct[comp]
            lines.append(
                f"  {comp:<13} {self.component_energy_j[comp]:.6e} J  {pct:6.2f} %"
            )
        if not self.percentages_defined:
            lines.append("  (total energy is zero; percentages reported as 0)")
        return "\n".join(lines) + "\n"


def estimate(stats: Stats, coeffs: EnergyCoefficients, frequency_hz: float) -> EnergyReport:
    """Linear energy roll-up of a run's counters at a given clock."""
    if frequency_hz <= 0:
        raise ValueError(f"frequency must be > 0, got {frequency_hz}")
    coeffs.validate()
    event_j = {}
    comp_j = {c: 0.0 for c in COMPONENTS}
    for event, counter in EVENT_COUNTERS.items():
        count = getattr(stats, counter)
        joules = count * coeffs.femtojoules[event] * 1e-15
        event_j[event] = joules
        comp_j[coeffs.components[event]] += joules
    total = sum(event_j.values())
    defined = total > 0
    pct = {
        c: (100.0 * comp_j[c] / total if defined else 0.0) for c in COMPONENTS
    }
    cycles = stats.cycles
    ops = OPS_PER_XNOR_WORD * stats.xnor_word_ops
    runtime = cycles / frequency_hz
    throughput = ops * frequency_hz / cycles if cycles else 0.0
    power = total * frequency_hz / cycles if cycles else 0.0
    efficiency = ops / total if defined else 0.0
    return EnergyReport(
        frequency_hz=frequency_hz,
        cycles=cycles,
        ops=ops,
        total_energy_j=total,
        event_energy_j=event_j,
        component_energy_j=comp_j,
        component_pct=pct,
        percentages_defined=defined,
        runtime_s=runtime,
        throughput_ops_per_s=throughput,
        power_w=power,
        efficiency_ops_per_j=efficiency,
    )


def peak_throughput(cfg: MemoryConfig, k_h: int, k_w: int, frequency_hz: float) -> float:
    """Best-case Op/s with every active unit busy each cycle."""
    if k_h > cfg.bpus or k_w > cfg.units_per_bpu:
        raise ConfigMismatch(
            f"kernel {k_h}x{k_w} exceeds the {cfg.bpus}x{cfg.units_per_bpu} array"
        )
    if k_h < 1 or k_w < 1 or frequency_hz <= 0:
        raise ValueError("kernel dims must be >= 1 and frequency > 0")
    return 2.0 * k_h * k_w * 16 * frequency_hz
