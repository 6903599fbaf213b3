"""Chained chip tracking through a scene series with enlarged search windows."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chips import Chip, ChipGridSpec, chip_frame, cut_chip, usable
from .correlation import UndefinedCorrelation, best_match, ncc_surface
from .raster import Raster, SceneSeries


@dataclass(frozen=True)
class SearchConfig:
    scale_factor: float = 1.5
    min_score: float = 0.0
    max_nodata: float = 0.0
    backend: str = "fft"

    def __post_init__(self):
        if not self.scale_factor > 1.0:
            raise ValueError("scale_factor must be > 1")
        if not -1.0 <= self.min_score <= 1.0:
            raise ValueError("min_score must lie in [-1, 1]")
        if not 0.0 <= self.max_nodata <= 1.0:
            raise ValueError("max_nodata must lie in [0, 1]")


@dataclass(frozen=True)
class TrackStep:
    """One link of a track.

    ``source_index`` is the frame the template came from; it trails
    ``frame_index - 1`` after a frozen step.
    """

    frame_index: int
    offset: tuple[int, int]
    score: float
    accepted: bool
    source_index: int


@dataclass
class TrackRecord:
    grid_index: int
    initial_origin: tuple[int, int]
    steps: list[TrackStep] = field(default_factory=list)
    chips: list[Chip | None] = field(default_factory=list)
    origins: list[tuple[int, int]] = field(default_factory=list)

    @property
    def cumulative_offsets(self) -> list[tuple[int, int]]:
        r0, c0 = self.initial_origin
        return [(r - r0, c - c0) for r, c in self.origins]

    @property
    def complete(self) -> bool:
        return all(s.accepted for s in self.steps)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("ICEFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def enlarge_window(origin, chip_size: int, c: float, frame_shape) -> tuple[int, int, int, int]:
    """Search rectangle ``(row, col, height, width)`` around a chip footprint.

    The window is ``round(c * chip_size)`` on a side, centred on the chip and
    translated back inside the frame when it would cross a border.
    """
    if not c > 1.0:
        raise ValueError("scale factor must be > 1")
    height, width = frame_shape
    r, col = int(origin[0]), int(origin[1])
    if r < 0 or col < 0 or r + chip_size > height or col + chip_size > width:
        raise ValueError("chip does not fit inside the frame")
    size = _round_half_up(c * chip_size)
    if size > height or size > width:
        raise ValueError(f"search window {size} exceeds frame {height}x{width}")
    pad = (size - chip_size) // 2
    r0 = min(max(r - pad, 0), height - size)
    c0 = min(max(col - pad, 0), width - size)
    return r0, c0, size, size


def track_step(prev_chip: Chip, next_frame: Raster, cfg: SearchConfig, frame_index: int = -1):
    """Match ``prev_chip`` inside an enlarged window of ``next_frame``.

    Returns ``(TrackStep, adopted_chip)``. A step with no valid candidate or a
    score below ``cfg.min_score`` is not accepted and adopts nothing.
    """
    size = prev_chip.size
    r0, c0, h, w = enlarge_window(prev_chip.origin, size, cfg.scale_factor, next_frame.shape)
    search = next_frame.pixels[r0 : r0 + h, c0 : c0 + w]
    mask = next_frame.nodata[r0 : r0 + h, c0 : c0 + w]
    origin = (r0 - prev_chip.origin[0], c0 - prev_chip.origin[1])
    try:
        surface = ncc_surface(prev_chip.values, search, cfg.backend, mask, origin)
        match = best_match(surface)
    except UndefinedCorrelation:
        return TrackStep(frame_index, (0, 0), float("nan"), False, prev_chip.frame_index), None
    accepted = match.score >= cfg.min_score
    if not accepted:
        return TrackStep(frame_index, match.offset, match.score, False, prev_chip.frame_index), None
    new_origin = (prev_chip.origin[0] + match.offset[0], prev_chip.origin[1] + match.offset[1])
    adopted = cut_chip(next_frame, new_origin, size, prev_chip.grid_index, frame_index)
    return TrackStep(frame_index, match.offset, match.score, True, prev_chip.frame_index), adopted


def _track_one(series: SceneSeries, chip: Chip, cfg: SearchConfig) -> TrackRecord:
    record = TrackRecord(chip.grid_index, chip.origin)
    current = chip
    for i in range(1, len(series)):
        step, adopted = track_step(current, series.frames[i], cfg, i)
        record.steps.append(step)
        record.chips.append(adopted)
        if adopted is not None:
            current = adopted
        record.origins.append(current.origin)
    return record


def track_series(series: SceneSeries, grid: ChipGridSpec, cfg: SearchConfig, workers: int | None = None) -> list[TrackRecord]:
    """Chain every usable chip of the first frame through the rest of the series."""
    if len(series) < 2:
        raise ValueError("tracking needs at least two frames")
    starts = [c for c in chip_frame(series.frames[0], grid, 0) if usable(c, cfg.max_nodata)]
    workers = default_workers() if workers is None else workers
    if workers <= 1:
        return [_track_one(series, c, cfg) for c in starts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: _track_one(series, c, cfg), starts))


@dataclass(frozen=True)
class VelocitySample:
    frame_index: int
    speed_m_per_day: float
    heading_deg: float | None


def velocity(record: TrackRecord, timestamps, pixel_size_m: float = 30.0) -> list[VelocitySample]:
    """Speed and heading (degrees clockwise from grid north) for each accepted step."""
    ts = list(timestamps)
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("timestamps must be strictly increasing")
    out = []
    for step in record.steps:
        if not step.accepted:
            continue
        dt = ts[step.frame_index] - ts[step.source_index]
        if dt <= 0:
            raise ValueError(f"non-positive time step at frame {step.frame_index}")
        dr, dc = step.offset
        speed = math.hypot(dr, dc) * pixel_size_m / dt
        heading = None
        if dr or dc:
            heading = math.degrees(math.atan2(dc, -dr)) % 360.0
        out.append(VelocitySample(step.frame_index, speed, heading))
    return out


def recoverable_steps(record: TrackRecord, truth_displacements, frame_shape, chip_size: int) -> list[bool]:
    """Which steps have a well-defined true answer: the true footprint stays in the frame.

    Once the true footprint leaves the frame the rest of the track is
    marked unrecoverable.
    """
    truth = np.asarray(truth_displacements)
    h, w = frame_shape
    r0, c0 = record.initial_origin
    flags, ok = [], True
    for step in record.steps:
        dr, dc = truth[step.frame_index]
        r, c = r0 + dr, c0 + dc
        ok = ok and 0 <= r <= h - chip_size and 0 <= c <= w - chip_size
        flags.append(bool(ok))
    return flags
