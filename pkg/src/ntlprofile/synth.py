"""Synthetic smart-meter fleet with labeled normal and NTL customers.

Normal customers draw a daily-periodic load, split almost evenly over three
phases, with small voltage/current jitter, rare impulse drops and occasional
missing readings. NTL customers follow the same baseline but spend multi-day
blocks (at least three days on, at most one day off) in one anomaly regime:

* ``PhaseVoltageDrop`` - one phase voltage reduced by 20-60 %.
* ``TheftZeroPower`` - power factor reads ~1 while active power is ~0 even
  though currents keep flowing.
* ``PersistentUnbalance`` - one phase carries only a fraction of its current,
  so the current unbalance stays high at every load level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO

import numpy as np

from .config import ConfigError, parse_key_values, to_text
from .ingest import (
    HOUR,
    CustomerMeta,
    CustomerSeries,
    Label,
    parse_timestamp,
    write_meta,
    write_telemetry,
)

TRUTH_HEADER = ("customer_id", "label", "anomaly_kind")


class AnomalyKind(str, Enum):
    NONE = "none"
    PHASE_VOLTAGE_DROP = "PhaseVoltageDrop"
    THEFT_ZERO_POWER = "TheftZeroPower"
    PERSISTENT_UNBALANCE = "PersistentUnbalance"


ANOMALY_KINDS = (AnomalyKind.PHASE_VOLTAGE_DROP, AnomalyKind.THEFT_ZERO_POWER, AnomalyKind.PERSISTENT_UNBALANCE)


@dataclass
class SynthConfig:
    seed: int = 0
    n_normal: int = 60
    n_ntl: int = 25
    n_unlabeled: int = 150
    unlabeled_ntl_fraction: float = 0.3
    days: int = 60
    start: str = "2024-01-01T00:00:00Z"
    rated_voltage: float = 220.0
    contracted_power_min: float = 5.0
    contracted_power_max: float = 20.0
    voltage_jitter: float = 0.01
    current_jitter: float = 0.03
    current_noise_amps: float = 0.1
    dropout: float = 0.01
    impulse_prob: float = 0.003
    mix_phase_voltage_drop: float = 1.0
    mix_theft_zero_power: float = 1.0
    mix_persistent_unbalance: float = 1.0

    def __post_init__(self):
        for name in ("n_normal", "n_ntl", "n_unlabeled", "days"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("unlabeled_ntl_fraction", "dropout", "impulse_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        mix = self.anomaly_mix()
        if (mix < 0).any() or mix.sum() <= 0:
            raise ConfigError("anomaly mix weights must be >= 0 with a positive total")
        if self.contracted_power_min <= 0 or self.contracted_power_max < self.contracted_power_min:
            raise ConfigError("contracted power range must be positive and ordered")
        if self.rated_voltage <= 0:
            raise ConfigError("rated_voltage must be positive")

    def to_text(self) -> str:
        return to_text(self)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "SynthConfig":
        return cls(**{**parse_key_values(text, cls), **overrides})

    def anomaly_mix(self) -> np.ndarray:
        return np.array([self.mix_phase_voltage_drop, self.mix_theft_zero_power, self.mix_persistent_unbalance])


@dataclass
class SynthCustomer:
    series: CustomerSeries
    truth: Label
    kind: AnomalyKind
    regime: np.ndarray = field(repr=False)  # per-hour anomaly mask (before dropout)


def regime_mask(n_hours: int, rng: np.random.Generator) -> np.ndarray:
    """Alternating anomaly blocks: 3-6 days on, 0-1 day off."""
    mask = np.zeros(n_hours, dtype=bool)
    t = -int(rng.integers(0, 3 * 24))
    while t < n_hours:
        on = int(rng.integers(3, 7)) * 24
        mask[max(t, 0) : max(t + on, 0)] = True
        t += on + int(rng.integers(0, 25))
    return mask


def _daily_shape(hours: np.ndarray, morning: float, evening: float) -> np.ndarray:
    def bump(center, width):
        d = (hours - center + 12) % 24 - 12
        return np.exp(-((d / width) ** 2))

    return 0.4 * bump(morning, 2.0) + bump(evening, 2.5)


def simulate_customer(
    customer_id: str,
    truth: Label,
    kind: AnomalyKind,
    config: SynthConfig,
    rng: np.random.Generator,
    meta_label: Label,
) -> SynthCustomer:
    n = config.days * 24
    t0 = parse_timestamp(config.start)
    timestamps = t0 + HOUR * np.arange(n, dtype=np.int64)
    hours = np.arange(n) % 24
    days = np.arange(n) // 24

    contracted = float(rng.uniform(config.contracted_power_min, config.contracted_power_max))
    vr = config.rated_voltage
    base = rng.uniform(0.05, 0.2)
    peak = rng.uniform(0.4, 0.9)
    shape = _daily_shape(hours, rng.uniform(6.5, 9.5), rng.uniform(17.5, 21.0))
    day_factor = rng.uniform(0.8, 1.2, size=config.days)[days]
    load = base + (peak - base) * shape * day_factor + rng.normal(0, 0.03, n)
    load = np.clip(load, 0.01, 1.1)

    v_offset = rng.uniform(-0.01, 0.03)
    volts = vr * (1 + v_offset - 0.02 * load[:, None] + rng.normal(0, config.voltage_jitter, (n, 3)))
    phase_bias = 1 + rng.normal(0, 0.02, 3)
    share = load[:, None] * contracted * 1000 / 3 * phase_bias * (1 + rng.normal(0, config.current_jitter, (n, 3)))
    amps = share / volts + rng.normal(0, config.current_noise_amps, (n, 3))
    amps = np.abs(amps)
    pf = np.clip(rng.uniform(0.85, 0.98) + rng.normal(0, 0.01, n), 0, 1)

    regime = np.zeros(n, dtype=bool)
    zero_power = np.zeros(n, dtype=bool)
    if kind is not AnomalyKind.NONE:
        regime = regime_mask(n, rng)
        phase = int(rng.integers(0, 3))
        if kind is AnomalyKind.PHASE_VOLTAGE_DROP:
            volts[regime, phase] *= 1 - rng.uniform(0.2, 0.6)
        elif kind is AnomalyKind.PERSISTENT_UNBALANCE:
            amps[regime, phase] *= rng.uniform(0.05, 0.35)
        elif kind is AnomalyKind.THEFT_ZERO_POWER:
            zero_power = regime
            pf = np.where(regime, rng.uniform(0.97, 1.0, n), pf)

    power = (volts * amps).sum(axis=1) * pf / 1000 * (1 + rng.normal(0, 0.01, n))
    power = np.where(zero_power, rng.uniform(0.0, 0.03, n) * contracted, power)

    # short impulse drops on a single phase (not anomalies)
    impulses = np.flatnonzero(rng.random(n) < config.impulse_prob)
    volts[impulses, rng.integers(0, 3, len(impulses))] *= rng.uniform(0.0, 0.6, len(impulses))

    values = np.column_stack([volts, amps, power, pf])
    values = np.round(values, 4)
    blank = rng.random(values.shape) < config.dropout / 2
    values[blank] = np.nan
    keep = rng.random(n) >= config.dropout
    meta = CustomerMeta(customer_id, vr, round(contracted, 3), meta_label)
    series = CustomerSeries(meta, timestamps[keep], values[keep])
    return SynthCustomer(series, truth, kind, regime[keep])


def generate_fleet(config: SynthConfig = SynthConfig()) -> list[SynthCustomer]:
    """Deterministic fleet; customer ids are shuffled so they carry no label."""
    root = np.random.default_rng([config.seed, 0])
    plan: list[tuple[Label, bool]] = (
        [(Label.NORMAL, True)] * config.n_normal
        + [(Label.NTL, True)] * config.n_ntl
        + [(None, False)] * config.n_unlabeled
    )
    order = root.permutation(len(plan))
    mix = config.anomaly_mix() / config.anomaly_mix().sum()
    fleet = []
    for slot, pos in enumerate(order):
        truth, labeled = plan[pos]
        rng = np.random.default_rng([config.seed, 1, slot])
        if truth is None:
            truth = Label.NTL if rng.random() < config.unlabeled_ntl_fraction else Label.NORMAL
        kind = AnomalyKind.NONE
        if truth is Label.NTL:
            kind = ANOMALY_KINDS[int(rng.choice(3, p=mix))]
        meta_label = truth if labeled else Label.UNLABELED
        fleet.append(simulate_customer(f"C{slot:05d}", truth, kind, config, rng, meta_label))
    return fleet


def write_truth(fleet: list[SynthCustomer], out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TRUTH_HEADER)
    for c in fleet:
        writer.writerow((c.series.meta.customer_id, c.truth.value, c.kind.value))


def read_truth(path: str | Path) -> dict[str, Label]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "customer_id" not in reader.fieldnames or "label" not in reader.fieldnames:
            raise ValueError(f"{path}: truth CSV needs customer_id and label columns")
        return {row["customer_id"].strip(): Label.parse(row["label"]) for row in reader}


def write_fleet(fleet: list[SynthCustomer], out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "telemetry": out_dir / "telemetry.csv",
        "meta": out_dir / "meta.csv",
        "truth": out_dir / "truth.csv",
    }
    with open(paths["telemetry"], "w", newline="", encoding="utf-8") as fh:
        write_telemetry([c.series for c in fleet], fh)
    with open(paths["meta"], "w", newline="", encoding="utf-8") as fh:
        write_meta([c.series.meta for c in fleet], fh)
    with open(paths["truth"], "w", newline="", encoding="utf-8") as fh:
        write_truth(fleet, fh)
    return paths

