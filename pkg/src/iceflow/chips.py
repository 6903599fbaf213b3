"""Subscene grid: cut frames into square chips and track their nodata coverage."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import Raster, SceneSeries, write_raster


@dataclass(frozen=True)
class ChipGridSpec:
    chip_size: int = 128
    stride: int | None = None

    def __post_init__(self):
        if self.chip_size < 8:
            raise ValueError("chip_size must be >= 8")
        if self.stride is None:
            object.__setattr__(self, "stride", self.chip_size)
        if not 1 <= self.stride <= self.chip_size:
            raise ValueError("stride must lie in [1, chip_size]")

    def shape(self, height: int, width: int) -> tuple[int, int]:
        """Number of chip rows and columns that fit a frame."""
        if height < self.chip_size or width < self.chip_size:
            raise ValueError(f"frame {height}x{width} is smaller than chip size {self.chip_size}")
        return (
            (height - self.chip_size) // self.stride + 1,
            (width - self.chip_size) // self.stride + 1,
        )

    def origins(self, height: int, width: int) -> list[tuple[int, int]]:
        rows, cols = self.shape(height, width)
        return [(r * self.stride, c * self.stride) for r in range(rows) for c in range(cols)]


@dataclass(frozen=True, eq=False)
class Chip:
    """Subscene ``x^j_i``: frame ``frame_index``, grid position ``grid_index``."""

    values: np.ndarray
    origin: tuple[int, int]
    grid_index: int
    frame_index: int
    nodata_fraction: float
    nodata: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.values.shape[0]


def cut_chip(frame: Raster, origin, size: int, grid_index: int = -1, frame_index: int = -1) -> Chip:
    r, c = int(origin[0]), int(origin[1])
    if r < 0 or c < 0 or r + size > frame.height or c + size > frame.width:
        raise ValueError(f"chip at {origin} of size {size} exceeds frame {frame.shape}")
    values = frame.pixels[r : r + size, c : c + size]
    mask = frame.nodata[r : r + size, c : c + size]
    return Chip(values, (r, c), grid_index, frame_index, float(mask.mean()), mask)


def chip_frame(frame: Raster, spec: ChipGridSpec, frame_index: int = 0) -> list[Chip]:
    """All whole chips of ``frame`` in row-major grid order; trailing partial tiles are dropped."""
    return [
        cut_chip(frame, origin, spec.chip_size, j, frame_index)
        for j, origin in enumerate(spec.origins(frame.height, frame.width))
    ]


def usable(chip: Chip, max_nodata: float = 0.0) -> bool:
    if not 0.0 <= max_nodata <= 1.0:
        raise ValueError("max_nodata must lie in [0, 1]")
    return chip.nodata_fraction <= max_nodata


def write_chip_dataset(series: SceneSeries, spec: ChipGridSpec, directory) -> Path:
    """One ICEF file per chip plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, frame in enumerate(series.frames):
        for chip in chip_frame(frame, spec, i):
            name = f"chip_i{i:03d}_j{chip.grid_index:05d}.icef"
            write_raster(
                Raster(chip.values, chip.nodata, frame.timestamp, frame.pixel_size_m),
                directory / name,
            )
            index.append(
                {
                    "region_id": series.region_id,
                    "i": i,
                    "j": chip.grid_index,
                    "origin": list(chip.origin),
                    "nodata_fraction": chip.nodata_fraction,
                    "path": name,
                }
            )
    path = directory / "index.json"
    path.write_text(json.dumps(index, indent=1) + "\n")
    return path
