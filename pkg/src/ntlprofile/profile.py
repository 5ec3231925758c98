"""Statistical-profile "super images": 2-D Gaussian KDE of feature pairs.

Each of the seven channels plots one feature against another on a fixed
50x50 pixel grid. Row index follows the y feature (row 0 = low end of the
y range), column index follows the x feature.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .features import FeatureTable
from .ingest import Label

GRID = 50
N_CHANNELS = 7
DEFAULT_SIGMA = 1.5
DEFAULT_THRESHOLD = 0.2
MIN_BOX = 3
MAGIC = b"NTLP1"


@dataclass(frozen=True)
class ChannelSpec:
    index: int
    x_feature: str
    y_feature: str
    x_range: tuple[float, float]
    y_range: tuple[float, float]

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            if not hi > lo:
                raise ValueError(f"channel {self.index}: range ({lo}, {hi}) has no width")


_RANGES = {
    "load_rate": (0.0, 1.2),
    "p_norm": (0.0, 1.2),
    "voltage_deviation": (0.0, 0.5),
    "voltage_ud": (0.0, 1.0),
    "current_ud": (0.0, 1.0),
    "power_factor": (0.0, 1.0),
    "calc_pf": (0.0, 1.0),
}


def _spec(index: int, x: str, y: str) -> ChannelSpec:
    return ChannelSpec(index, x, y, _RANGES[x], _RANGES[y])


DEFAULT_CHANNELS: tuple[ChannelSpec, ...] = tuple(
    _spec(i, "load_rate", y)
    for i, y in enumerate(("voltage_deviation", "voltage_ud", "current_ud", "power_factor", "p_norm", "calc_pf"))
) + (_spec(6, "power_factor", "calc_pf"),)


def to_pixels(values: np.ndarray, value_range: tuple[float, float]) -> np.ndarray:
    lo, hi = value_range
    return (np.clip(values, lo, hi) - lo) / (hi - lo) * (GRID - 1)


def render_channel(points: np.ndarray, spec: ChannelSpec, sigma_px: float = DEFAULT_SIGMA) -> np.ndarray:
    """Unnormalized sum of isotropic Gaussians, one per (x, y) point.

    Points with a missing coordinate are skipped. Points are sorted before
    summation so the result does not depend on input order.
    """
    if not sigma_px > 0:
        raise ValueError("sigma_px must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    pts = pts[~np.isnan(pts).any(axis=1)]
    if len(pts) == 0:
        return np.zeros((GRID, GRID))
    px = to_pixels(pts[:, 0], spec.x_range)
    py = to_pixels(pts[:, 1], spec.y_range)
    order = np.lexsort((py, px))
    px, py = px[order], py[order]
    axis = np.arange(GRID, dtype=np.float64)
    two_var = 2.0 * sigma_px * sigma_px
    # exp(-(dx^2 + dy^2)/2s^2) factors into row and column terms
    gx = np.exp(-((axis[None, :] - px[:, None]) ** 2) / two_var)
    gy = np.exp(-((axis[None, :] - py[:, None]) ** 2) / two_var)
    return gy.T @ gx


def normalize_channel(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max(initial=0.0)
    if peak <= 0:
        return np.zeros_like(grid)
    return grid / peak


def find_bbox(grid: np.ndarray, threshold_frac: float = DEFAULT_THRESHOLD) -> tuple[int, int, int, int]:
    """Tightest box ``(x0, y0, x1, y1)`` (inclusive) over pixels above threshold.

    Falls back to the whole grid when nothing qualifies. Boxes narrower than
    three pixels are widened to three, staying inside the grid.
    """
    if not 0 < threshold_frac < 1:
        raise ValueError("threshold_frac must lie in (0, 1)")
    mask = np.asarray(grid) > threshold_frac
    if not mask.any():
        return (0, 0, GRID - 1, GRID - 1)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, x1 = _pad_extent(int(cols[0]), int(cols[-1]))
    y0, y1 = _pad_extent(int(rows[0]), int(rows[-1]))
    return (x0, y0, x1, y1)


def _pad_extent(lo: int, hi: int) -> tuple[int, int]:
    missing = MIN_BOX - (hi - lo + 1)
    if missing <= 0:
        return lo, hi
    lo -= missing // 2
    hi += missing - missing // 2
    if lo < 0:
        lo, hi = 0, hi - lo
    if hi > GRID - 1:
        lo, hi = lo - (hi - (GRID - 1)), GRID - 1
    return lo, hi


@dataclass
class SuperImage:
    customer_id: str
    window_start: str
    label: Label
    channels: np.ndarray  # (7, 50, 50) float32 in [0, 1]
    bboxes: np.ndarray  # (7, 4) int, x0 y0 x1 y1 inclusive
    point_counts: np.ndarray | None = field(default=None)

    @property
    def key(self) -> str:
        return f"{self.customer_id}@{self.window_start}"


def build_super_image(
    table: FeatureTable,
    specs: Sequence[ChannelSpec] = DEFAULT_CHANNELS,
    sigma_px: float = DEFAULT_SIGMA,
    threshold_frac: float = DEFAULT_THRESHOLD,
    label: Label = Label.UNLABELED,
    customer_id: str | None = None,
    window_start: str = "",
) -> SuperImage:
    if sorted(s.index for s in specs) != list(range(N_CHANNELS)):
        raise ValueError("channel specs must cover indices 0-6 exactly once")
    channels = np.zeros((N_CHANNELS, GRID, GRID), dtype=np.float32)
    bboxes = np.zeros((N_CHANNELS, 4), dtype=np.int64)
    counts = np.zeros(N_CHANNELS, dtype=np.int64)
    for spec in specs:
        if len(table):
            pts = np.column_stack([table[spec.x_feature], table[spec.y_feature]])
            counts[spec.index] = int((~np.isnan(pts).any(axis=1)).sum())
        else:
            pts = np.zeros((0, 2))
        grid = normalize_channel(render_channel(pts, spec, sigma_px))
        channels[spec.index] = grid
        bboxes[spec.index] = find_bbox(grid, threshold_frac)
    return SuperImage(
        customer_id if customer_id is not None else table.customer_id,
        window_start,
        label,
        channels,
        bboxes,
        counts,
    )


# -- binary container -------------------------------------------------------

def _write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    return _read_exact(fh, n).decode("utf-8")


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated super-image file")
    return raw


def write_super_image(image: SuperImage, fh: BinaryIO) -> None:
    """Layout: magic, 7x50x50 <f4, 7x4 <u2 boxes, label byte, two strings."""
    fh.write(MAGIC)
    fh.write(np.ascontiguousarray(image.channels, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(image.bboxes, dtype="<u2").tobytes())
    fh.write(bytes([image.label.code]))
    _write_str(fh, image.customer_id)
    _write_str(fh, image.window_start)


def read_super_image(fh: BinaryIO) -> SuperImage:
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise ValueError("not an NTLP1 super-image file")
    n_pix = N_CHANNELS * GRID * GRID
    channels = np.frombuffer(_read_exact(fh, 4 * n_pix), dtype="<f4").reshape(N_CHANNELS, GRID, GRID)
    boxes = np.frombuffer(_read_exact(fh, 2 * 4 * N_CHANNELS), dtype="<u2").reshape(N_CHANNELS, 4)
    label = Label.from_code(_read_exact(fh, 1)[0])
    cid = _read_str(fh)
    start = _read_str(fh)
    return SuperImage(cid, start, label, channels.astype(np.float32), boxes.astype(np.int64))


def save_super_image(image: SuperImage, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_super_image(image, fh)


def load_super_image(path: str | Path) -> SuperImage:
    with open(path, "rb") as fh:
        return read_super_image(fh)


def load_rendered_dir(directory: str | Path) -> list[SuperImage]:
    return [load_super_image(p) for p in sorted(Path(directory).glob("*.ntlp"))]


def channel_to_png(grid: np.ndarray, path: str | Path) -> None:
    """Grey-scale PNG, value*255 rounded, y axis pointing up."""
    from PIL import Image

    pixels = np.rint(np.clip(np.asarray(grid, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(np.flipud(pixels))).save(path)
