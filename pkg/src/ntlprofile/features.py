"""Per-timestamp electrical features derived from three-phase readings.

Every function accepts scalars or equally shaped arrays and propagates NaN
(missing) inputs to NaN outputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .ingest import CustomerMeta, Window, format_number, format_timestamp

FEATURE_NAMES = (
    "load_rate",
    "voltage_deviation",
    "voltage_ud",
    "current_ud",
    "power_factor",
    "p_norm",
    "calc_pf",
)
# short column names used by the feature dump CSV
DUMP_COLUMNS = ("load_rate", "vd", "v_ud", "i_ud", "pf", "p_norm", "calc_pf")

MIN_LOAD_RATE = 1e-6


def voltage_deviation(ua, ub, uc, rated):
    """Largest relative shortfall of any present phase below the rated voltage.

    Phases at or above ``rated`` contribute 0. The result is NaN only when all
    three phases are missing.
    """
    rated = np.asarray(rated, dtype=np.float64)
    per_phase = []
    for v in (ua, ub, uc):
        v = np.asarray(v, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            per_phase.append(np.where(np.isnan(v), np.nan, np.where(v < rated, (rated - v) / rated, 0.0)))
    # fmax ignores a single NaN operand
    out = np.fmax(np.fmax(per_phase[0], per_phase[1]), per_phase[2])
    return out[()] if out.ndim == 0 else out


def unbalance_degree(sa, sb, sc):
    """Mean absolute deviation of three phase values over their mean."""
    sa, sb, sc = (np.asarray(s, dtype=np.float64) for s in (sa, sb, sc))
    avg = (sa + sb + sc) / 3.0
    dev = (np.abs(sa - avg) + np.abs(sb - avg) + np.abs(sc - avg)) / 3.0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(avg > 0, dev / np.where(avg > 0, avg, 1.0), np.nan)
    # equal phases are exactly balanced; (3v)/3 can miss v by one ulp
    out = np.where((sa == sb) & (sb == sc) & (avg > 0), 0.0, out)
    out = np.where(np.isnan(avg), np.nan, out)
    return out[()] if out.ndim == 0 else out


def load_rate(ua, ub, uc, ia, ib, ic, contracted_power):
    """Summed per-phase U*I over the contracted apparent power (kVA)."""
    apparent = (
        np.asarray(ua, dtype=np.float64) * np.asarray(ia, dtype=np.float64)
        + np.asarray(ub, dtype=np.float64) * np.asarray(ib, dtype=np.float64)
        + np.asarray(uc, dtype=np.float64) * np.asarray(ic, dtype=np.float64)
    )
    out = apparent / (np.asarray(contracted_power, dtype=np.float64) * 1000.0)
    return out[()] if np.ndim(out) == 0 else out


def calculated_power_factor(p_norm, lrate):
    p_norm = np.asarray(p_norm, dtype=np.float64)
    lrate = np.asarray(lrate, dtype=np.float64)
    ok = lrate >= MIN_LOAD_RATE
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.clip(p_norm / np.where(ok, lrate, 1.0), 0.0, 1.0)
    out = np.where(ok, ratio, np.nan)
    out = np.where(np.isnan(p_norm), np.nan, out)
    return out[()] if out.ndim == 0 else out


@dataclass
class FeatureTable:
    """Feature rows of one window, stored column-wise (NaN = missing)."""

    customer_id: str
    timestamps: np.ndarray
    columns: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def row(self, i: int) -> dict[str, float]:
        return {"timestamp": int(self.timestamps[i]), **{k: float(v[i]) for k, v in self.columns.items()}}

    @classmethod
    def empty(cls, customer_id: str = "") -> "FeatureTable":
        return cls(customer_id, np.zeros(0, np.int64), {n: np.zeros(0) for n in FEATURE_NAMES})


def featurize_window(window: Window, meta: CustomerMeta) -> FeatureTable:
    ua, ub, uc = window.field("ua"), window.field("ub"), window.field("uc")
    ia, ib, ic = window.field("ia"), window.field("ib"), window.field("ic")
    lrate = np.atleast_1d(load_rate(ua, ub, uc, ia, ib, ic, meta.contracted_power))
    p_norm = window.field("active_power") / meta.contracted_power
    cols = {
        "load_rate": lrate,
        "voltage_deviation": np.atleast_1d(voltage_deviation(ua, ub, uc, meta.rated_voltage)),
        "voltage_ud": np.atleast_1d(unbalance_degree(ua, ub, uc)),
        "current_ud": np.atleast_1d(unbalance_degree(ia, ib, ic)),
        "power_factor": window.field("power_factor").copy(),
        "p_norm": p_norm,
        "calc_pf": np.atleast_1d(calculated_power_factor(p_norm, lrate)),
    }
    return FeatureTable(window.customer_id, window.timestamps.copy(), cols)


def write_feature_dump(tables: Iterable[FeatureTable], out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("customer_id", "timestamp") + DUMP_COLUMNS)
    for table in tables:
        for i in range(len(table)):
            writer.writerow(
                [table.customer_id, format_timestamp(table.timestamps[i])]
                + [format_number(table.columns[name][i]) for name in FEATURE_NAMES]
            )
