"""Glue from parsed telemetry to super images."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

from .features import featurize_window
from .ingest import CustomerSeries, Label, format_timestamp, slide_windows
from .profile import DEFAULT_CHANNELS, DEFAULT_SIGMA, DEFAULT_THRESHOLD, SuperImage, build_super_image

logger = logging.getLogger(__name__)


@dataclass
class RenderOptions:
    sigma_px: float = DEFAULT_SIGMA
    threshold_frac: float = DEFAULT_THRESHOLD
    window_days: int = 10
    step_days: int = 5
    min_completeness: float = 0.5


@dataclass
class RenderStats:
    windows: int = 0
    skipped: int = 0
    per_customer: dict[str, int] = field(default_factory=dict)


def render_series(
    fleet: Iterable[CustomerSeries],
    options: RenderOptions = RenderOptions(),
    labels: dict[str, Label] | None = None,
    stats: RenderStats | None = None,
) -> list[SuperImage]:
    """One super image per retained window, labels from ``labels`` or metadata."""
    stats = stats if stats is not None else RenderStats()
    out = []
    for series in fleet:
        meta = series.meta
        label = (labels or {}).get(meta.customer_id, meta.label)
        windows = slide_windows(series, options.window_days, options.step_days, 0.0)
        kept = 0
        for w in windows:
            if len(w) < options.min_completeness * w.expected_count:
                stats.skipped += 1
                continue
            table = featurize_window(w, meta)
            out.append(
                build_super_image(
                    table,
                    DEFAULT_CHANNELS,
                    options.sigma_px,
                    options.threshold_frac,
                    label,
                    meta.customer_id,
                    format_timestamp(w.start),
                )
            )
            kept += 1
        stats.windows += kept
        stats.per_customer[meta.customer_id] = kept
    if stats.skipped:
        logger.info("skipped %d incomplete windows", stats.skipped)
    return out
