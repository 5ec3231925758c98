"""Smart-meter telemetry parsing and sliding-window extraction.

Telemetry CSV header::

    customer_id,timestamp,ua,ub,uc,ia,ib,ic,active_power,power_factor

Meta CSV header::

    customer_id,rated_voltage,contracted_power,label

Readings are held as float64 arrays with NaN marking a missing cell. All
channels are brought onto one hourly cadence at parse time (last reading per
hour wins).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import IO, Iterator, NamedTuple, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

READING_FIELDS = ("ua", "ub", "uc", "ia", "ib", "ic", "active_power", "power_factor")
TELEMETRY_HEADER = ("customer_id", "timestamp") + READING_FIELDS
META_HEADER = ("customer_id", "rated_voltage", "contracted_power", "label")

HOUR = 3600
DAY = 86400

Source = Union[str, Path, bytes, IO[bytes], IO[str]]


class IngestError(ValueError):
    """Raised for input that cannot be repaired by marking cells missing."""


class Label(str, Enum):
    NORMAL = "normal"
    NTL = "ntl"
    UNLABELED = "unlabeled"

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise IngestError(f"unknown label {text!r}") from None

    @property
    def code(self) -> int:
        return _LABEL_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Label":
        return _CODE_LABELS[code]


_LABEL_CODES = {Label.NORMAL: 0, Label.NTL: 1, Label.UNLABELED: 2}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


class MeterReading(NamedTuple):
    timestamp: int
    ua: float
    ub: float
    uc: float
    ia: float
    ib: float
    ic: float
    active_power: float
    power_factor: float


@dataclass(frozen=True)
class CustomerMeta:
    customer_id: str
    rated_voltage: float
    contracted_power: float  # kVA
    label: Label = Label.UNLABELED

    def __post_init__(self):
        if not self.rated_voltage > 0:
            raise IngestError(f"{self.customer_id}: rated_voltage must be > 0")
        if not self.contracted_power > 0:
            raise IngestError(f"{self.customer_id}: contracted_power must be > 0")


@dataclass
class CustomerSeries:
    """Time-ascending readings of one customer.

    ``values`` has one column per entry of :data:`READING_FIELDS`.
    """

    meta: CustomerMeta
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, len(READING_FIELDS))
        if len(self.timestamps) != len(self.values):
            raise IngestError(f"{self.meta.customer_id}: timestamp/value length mismatch")
        if np.any(np.diff(self.timestamps) <= 0):
            raise IngestError(f"{self.meta.customer_id}: timestamps not strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    def field(self, name: str) -> np.ndarray:
        return self.values[:, READING_FIELDS.index(name)]

    def readings(self) -> Iterator[MeterReading]:
        for ts, row in zip(self.timestamps, self.values):
            yield MeterReading(int(ts), *(float(v) for v in row))


@dataclass
class Window:
    customer_id: str
    start: int
    end: int
    timestamps: np.ndarray
    values: np.ndarray
    expected_count: int

    def __len__(self) -> int:
        return len(self.timestamps)

    def field(self, name: str) -> np.ndarray:
        return self.values[:, READING_FIELDS.index(name)]


def parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_number(value: float) -> str:
    """Shortest round-tripping text; empty for missing."""
    if value is None or math.isnan(value):
        return ""
    return repr(float(value))


def _parse_number(text: str) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        return math.nan
    return value if math.isfinite(value) else math.nan


@contextmanager
def _open_text(source: Source) -> Iterator[IO[str]]:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            yield fh
    elif isinstance(source, bytes):
        yield io.StringIO(source.decode("utf-8"), newline="")
    elif isinstance(source, io.TextIOBase):
        yield source
    else:
        wrapper = io.TextIOWrapper(source, encoding="utf-8", newline="")
        try:
            yield wrapper
        finally:
            wrapper.detach()


def _check_header(found: Sequence[str] | None, expected: Sequence[str], what: str) -> None:
    if found is None or [h.strip() for h in found] != list(expected):
        raise IngestError(f"{what} header must be {','.join(expected)}; got {found}")


def parse_meta(meta_csv: Source) -> dict[str, CustomerMeta]:
    metas: dict[str, CustomerMeta] = {}
    with _open_text(meta_csv) as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), META_HEADER, "meta CSV")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(META_HEADER):
                raise IngestError(f"meta CSV line {lineno}: expected {len(META_HEADER)} cells")
            cid = row[0].strip()
            if cid in metas:
                raise IngestError(f"meta CSV line {lineno}: duplicate customer_id {cid!r}")
            metas[cid] = CustomerMeta(
                cid, _parse_number(row[1]), _parse_number(row[2]), Label.parse(row[3])
            )
    return metas


def _sanitize(values: list[float]) -> list[float]:
    # present voltages/currents >= 0, power factor within [0, 1]
    for i in range(6):
        if values[i] < 0:
            values[i] = math.nan
    if not 0.0 <= values[7] <= 1.0:
        values[7] = math.nan
    return values


def parse_fleet(
    telemetry_csv: Source,
    meta_csv: Source,
    diagnostics: list[str] | None = None,
) -> list[CustomerSeries]:
    """Parse telemetry and metadata into one series per meta customer.

    Rows for customers absent from the meta CSV are dropped and reported in
    ``diagnostics``. Unparseable or out-of-range numeric cells become NaN.
    Several readings within one clock hour collapse to the last of them.
    """
    metas = parse_meta(meta_csv)
    rows: dict[str, tuple[list[int], list[list[float]]]] = {cid: ([], []) for cid in metas}
    unknown: dict[str, int] = {}
    with _open_text(telemetry_csv) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        # a zero-byte telemetry file is simply empty
        if header is not None:
            _check_header(header, TELEMETRY_HEADER, "telemetry CSV")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TELEMETRY_HEADER):
                raise IngestError(f"telemetry CSV line {lineno}: expected {len(TELEMETRY_HEADER)} cells")
            cid = row[0].strip()
            if cid not in rows:
                unknown[cid] = unknown.get(cid, 0) + 1
                continue
            try:
                ts = parse_timestamp(row[1])
            except ValueError:
                raise IngestError(f"telemetry CSV line {lineno}: bad timestamp {row[1]!r}") from None
            stamps, vals = rows[cid]
            if stamps and ts <= stamps[-1]:
                raise IngestError(
                    f"customer {cid!r}: non-monotone timestamp at telemetry CSV line {lineno}"
                )
            stamps.append(ts)
            vals.append(_sanitize([_parse_number(c) for c in row[2:]]))

    for cid, count in unknown.items():
        msg = f"rejected {count} telemetry rows for unknown customer {cid!r}"
        logger.warning(msg)
        if diagnostics is not None:
            diagnostics.append(msg)

    fleet = []
    for cid, meta in metas.items():
        stamps, vals = rows[cid]
        ts = np.asarray(stamps, dtype=np.int64)
        values = np.asarray(vals, dtype=np.float64).reshape(-1, len(READING_FIELDS))
        ts, values = to_hourly(ts, values)
        fleet.append(CustomerSeries(meta, ts, values))
    return fleet


def to_hourly(timestamps: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Floor timestamps to the hour, keeping the last reading in each hour."""
    if len(timestamps) == 0:
        return timestamps, values
    hours = timestamps - timestamps % HOUR
    last = np.ones(len(hours), dtype=bool)
    last[:-1] = hours[1:] != hours[:-1]
    return hours[last], values[last]


def write_telemetry(fleet: Sequence[CustomerSeries], out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TELEMETRY_HEADER)
    for series in fleet:
        cid = series.meta.customer_id
        for ts, row in zip(series.timestamps, series.values):
            writer.writerow([cid, format_timestamp(ts), *(format_number(v) for v in row)])


def write_meta(metas: Sequence[CustomerMeta], out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(META_HEADER)
    for m in metas:
        writer.writerow(
            [m.customer_id, format_number(m.rated_voltage), format_number(m.contracted_power), m.label.value]
        )


def window_positions(first: int, last: int, window_days: int, step_days: int, cadence: int = HOUR) -> list[int]:
    """Candidate window starts for a series covering ``[first, last + cadence)``."""
    span = last + cadence - first
    length, step = window_days * DAY, step_days * DAY
    if span < length:
        return []
    return [first + k * step for k in range((span - length) // step + 1)]


def slide_windows(
    series: CustomerSeries,
    window_days: int = 10,
    step_days: int = 5,
    min_completeness: float = 0.5,
    cadence: int = HOUR,
) -> list[Window]:
    """Cut a series into overlapping fixed-length windows.

    A window is kept only when at least ``min_completeness`` of its expected
    hourly readings are present.
    """
    if window_days <= 0 or step_days <= 0:
        raise ValueError("window_days and step_days must be positive")
    if len(series) == 0:
        return []
    ts = series.timestamps
    expected = window_days * DAY // cadence
    windows = []
    for start in window_positions(int(ts[0]), int(ts[-1]), window_days, step_days, cadence):
        end = start + window_days * DAY
        lo, hi = np.searchsorted(ts, [start, end], side="left")
        if hi - lo < min_completeness * expected:
            continue
        windows.append(
            Window(series.meta.customer_id, start, end, ts[lo:hi], series.values[lo:hi], expected)
        )
    return windows
