"""Single-band rasters, the ICEF container, PGM export and synthetic scenes.

ICEF layout (little-endian)::

    magic  "ICEF"            4 bytes
    version u8 = 1
    width   u32
    height  u32
    pixels  f32[width*height]  row-major, NaN at nodata
    mask    u8[width*height]   0 valid, 1 nodata
    timestamp f64              days since epoch
    pixel_size_m f32

The mask is authoritative; the NaN payload is a cross-check.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np
from scipy import ndimage

MAGIC = b"ICEF"
VERSION = 1
_HEADER = struct.Struct("<4sBII")
_TRAILER = struct.Struct("<df")

PathOrFile = Union[str, os.PathLike, BinaryIO]


class RasterFormatError(ValueError):
    """Malformed or truncated ICEF stream."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Raster:
    """A single-band frame of reflectances in [0, 1].

    ``pixels`` is a float32 ``(height, width)`` array; nodata pixels are
    stored as NaN regardless of what the caller passed in.
    """

    pixels: np.ndarray
    nodata: np.ndarray | None = None
    timestamp: float = 0.0
    pixel_size_m: float = 30.0

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float32)
        if pixels.ndim != 2 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2D grid, got shape {pixels.shape}")
        if self.nodata is None:
            mask = np.zeros(pixels.shape, dtype=bool)
        else:
            mask = np.array(self.nodata, dtype=bool)
            if mask.shape != pixels.shape:
                raise ValueError(f"nodata mask shape {mask.shape} != pixel shape {pixels.shape}")
        pixels[mask] = np.nan
        valid = pixels[~mask]
        if not np.all(np.isfinite(valid)):
            raise ValueError("non-finite pixel outside the nodata mask")
        if valid.size and (valid.min() < 0.0 or valid.max() > 1.0):
            raise ValueError("valid pixels must lie in [0, 1]")
        if not self.pixel_size_m > 0:
            raise ValueError("pixel_size_m must be positive")
        object.__setattr__(self, "pixels", _frozen(pixels))
        object.__setattr__(self, "nodata", _frozen(mask))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "pixel_size_m", float(np.float32(self.pixel_size_m)))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
            and np.array_equal(self.nodata, other.nodata)
            and self.timestamp == other.timestamp
            and self.pixel_size_m == other.pixel_size_m
        )


@dataclass(frozen=True)
class SceneSeries:
    frames: tuple[Raster, ...]
    region_id: str = "synthetic"

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a scene series needs at least one frame")
        first = frames[0]
        for f in frames[1:]:
            if f.shape != first.shape or f.pixel_size_m != first.pixel_size_m:
                raise ValueError("all frames must share width, height and pixel size")
        ts = [f.timestamp for f in frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frame timestamps must be strictly increasing")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    @property
    def timestamps(self) -> list[float]:
        return [f.timestamp for f in self.frames]


# ---------------------------------------------------------------------------
# ICEF container


def raster_to_bytes(r: Raster) -> bytes:
    h, w = r.shape
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, w, h))
    buf.write(r.pixels.astype("<f4", copy=False).tobytes())
    buf.write(r.nodata.astype(np.uint8).tobytes())
    buf.write(_TRAILER.pack(r.timestamp, r.pixel_size_m))
    return buf.getvalue()


def raster_from_bytes(data: bytes) -> Raster:
    if len(data) < _HEADER.size:
        raise RasterFormatError("truncated header")
    magic, version, w, h = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise RasterFormatError(f"unsupported ICEF version {version}")
    n = w * h
    expected = _HEADER.size + 5 * n + _TRAILER.size
    if len(data) < expected:
        raise RasterFormatError(f"truncated payload: {len(data)} of {expected} bytes")
    off = _HEADER.size
    pixels = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(h, w)
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + 4 * n).reshape(h, w)
    if mask.max(initial=0) > 1:
        raise RasterFormatError("mask bytes must be 0 or 1")
    timestamp, pixel_size = _TRAILER.unpack_from(data, off + 5 * n)
    mask = mask.astype(bool)
    if not np.all(np.isfinite(pixels[~mask])):
        raise RasterFormatError("non-finite pixel outside the nodata mask")
    try:
        return Raster(pixels.astype(np.float32), mask, timestamp, pixel_size)
    except ValueError as exc:
        raise RasterFormatError(str(exc)) from exc


def write_raster(r: Raster, destination: PathOrFile) -> None:
    payload = raster_to_bytes(r)
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def read_raster(source: PathOrFile | bytes) -> Raster:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return raster_from_bytes(bytes(source))
    if hasattr(source, "read"):
        return raster_from_bytes(source.read())
    with open(source, "rb") as fh:
        return raster_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# PGM export


def pgm_bytes(grid, lo: float, hi: float) -> bytes:
    """Binary P5 PGM; values map linearly from [lo, hi] to 0..255, NaN to 0."""
    if not lo < hi:
        raise ValueError(f"lo ({lo}) must be < hi ({hi})")
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("PGM export needs a 2D grid")
    nan = ~np.isfinite(g)
    scaled = np.clip((np.where(nan, lo, g) - lo) / (hi - lo), 0.0, 1.0)
    # round half up
    px = np.floor(255.0 * scaled + 0.5).astype(np.uint8)
    px[nan] = 0
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def export_pgm(grid, lo: float, hi: float, destination: PathOrFile) -> None:
    payload = pgm_bytes(grid, lo, hi)
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def read_pgm(source: PathOrFile) -> np.ndarray:
    data = source.read() if hasattr(source, "read") else Path(source).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


# ---------------------------------------------------------------------------
# Manifests


def write_series(series: SceneSeries, directory, prefix: str = "frame") -> Path:
    """Write every frame as ICEF plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, frame in enumerate(series.frames):
        name = f"{prefix}_{i:03d}.icef"
        write_raster(frame, directory / name)
        entries.append({"path": name, "timestamp": frame.timestamp})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"region_id": series.region_id, "frames": entries}, indent=2) + "\n")
    return manifest


def read_series(manifest) -> SceneSeries:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    doc = json.loads(manifest.read_text())
    frames = []
    for entry in doc["frames"]:
        frame = read_raster(manifest.parent / entry["path"])
        if "timestamp" in entry and entry["timestamp"] != frame.timestamp:
            raise RasterFormatError(f"{entry['path']}: timestamp disagrees with manifest")
        frames.append(frame)
    return SceneSeries(tuple(frames), doc.get("region_id", ""))


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic glacier series with known motion.

    ``displacement_field`` holds one ``(dx, dy)`` step per frame transition
    (length ``n_frames - 1``); positive dx moves content right, positive dy
    moves it down. ``texture_scales`` are Gaussian smoothing lengths in pixels,
    one octave of texture each. ``occlusion_prob`` is either a scalar or one
    probability per frame.
    """

    seed: int = 0
    size: int = 128
    n_frames: int = 12
    displacement_field: tuple = ()
    texture_scales: tuple = (1.5, 4.0)
    slope_amplitude: float = 0.5
    occlusion_prob: float | tuple = 0.0
    occlusion_size: int = 32
    noise_snr: float | None = None
    nodata_corner: float = 0.0
    interval_days: float = 16.0
    start_day: float = 0.0
    pixel_size_m: float = 30.0
    region_id: str = "synthetic"

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.size < 1:
            raise ValueError("size must be positive")
        steps = tuple(tuple(float(v) for v in d) for d in self.displacement_field)
        if not steps:
            steps = ((0.0, 0.0),) * (self.n_frames - 1)
        if len(steps) != self.n_frames - 1 or any(len(d) != 2 for d in steps):
            raise ValueError("displacement_field needs one (dx, dy) per frame transition")
        object.__setattr__(self, "displacement_field", steps)
        probs = self.occlusion_probs()
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("occlusion probability must lie in [0, 1]")
        if self.noise_snr is not None and not self.noise_snr > 0:
            raise ValueError("noise_snr must be positive")

    @classmethod
    def constant(cls, dx: float, dy: float, n_frames: int = 12, **kw) -> "SynthSpec":
        return cls(n_frames=n_frames, displacement_field=((dx, dy),) * (n_frames - 1), **kw)

    def occlusion_probs(self) -> tuple[float, ...]:
        p = self.occlusion_prob
        if np.ndim(p) == 0:
            return (float(p),) * self.n_frames
        p = tuple(float(v) for v in p)
        if len(p) != self.n_frames:
            raise ValueError("per-frame occlusion_prob needs one entry per frame")
        return p


@dataclass(frozen=True)
class SynthTruth:
    """Ground truth of a synthetic series.

    ``displacements`` are cumulative ``(drow, dcol)`` shifts of each frame
    relative to frame 0, rounded to the nearest integer. ``exact`` keeps the
    unrounded values. ``occluded`` flags cloud pixels per frame.
    """

    displacements: np.ndarray
    exact: np.ndarray
    occluded: np.ndarray = field(repr=False)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.displacements, axis=0)

    def to_json(self) -> dict:
        return {
            "displacements": self.displacements.tolist(),
            "steps": self.steps.tolist(),
            "exact": self.exact.tolist(),
            "occluded_frames": [int(i) for i in np.flatnonzero(self.occluded.any(axis=(1, 2)))],
        }


def _unit(a: np.ndarray) -> np.ndarray:
    a = a - a.mean()
    s = a.std()
    return a / s if s > 0 else a


def _corner_mask(size: int, frac: float) -> np.ndarray:
    if frac <= 0:
        return np.zeros((size, size), dtype=bool)
    k = frac * size
    r, c = np.mgrid[0:size, 0:size]
    far = size - 1
    return (
        (r + c < k)
        | (r + (far - c) < k)
        | ((far - r) + c < k)
        | ((far - r) + (far - c) < k)
    )


def synth_series(spec: SynthSpec) -> tuple[SceneSeries, SynthTruth]:
    """Render a deterministic series of advected texture with optional clouds."""
    tex_rng, noise_rng, cloud_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)
    )
    size = spec.size
    steps = np.array(spec.displacement_field, dtype=np.float64)  # (n-1, 2) as (dx, dy)
    cum_xy = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    exact = cum_xy[:, ::-1].copy()  # (drow, dcol)
    margin = int(math.ceil(np.abs(cum_xy).max())) + 2
    canvas = size + 2 * margin

    texture = np.zeros((canvas, canvas))
    for scale in spec.texture_scales:
        texture += _unit(ndimage.gaussian_filter(tex_rng.standard_normal((canvas, canvas)), scale, mode="wrap"))
    texture = _unit(texture)
    angle = tex_rng.uniform(0.0, 2.0 * np.pi)
    rr, cc = np.mgrid[0:canvas, 0:canvas] / canvas
    ramp = spec.slope_amplitude * 4.0 * (np.cos(angle) * rr + np.sin(angle) * cc)
    surface = 0.25 * texture + ramp
    lo, hi = surface.min(), surface.max()
    surface = (surface - lo) / (hi - lo) if hi > lo else np.full_like(surface, 0.5)
    surface = 0.05 + 0.7 * surface  # headroom for clouds and noise

    base_r, base_c = np.mgrid[0:size, 0:size].astype(np.float64)
    corners = _corner_mask(size, spec.nodata_corner)
    probs = spec.occlusion_probs()
    frames, occluded = [], []
    for t in range(spec.n_frames):
        dr, dc = exact[t]
        if float(dr).is_integer() and float(dc).is_integer():
            r0, c0 = margin - int(dr), margin - int(dc)
            img = surface[r0 : r0 + size, c0 : c0 + size].copy()
        else:
            coords = np.stack([base_r + margin - dr, base_c + margin - dc])
            img = ndimage.map_coordinates(surface, coords, order=1, mode="nearest")
        if spec.noise_snr is not None:
            sigma = img.std() / math.sqrt(spec.noise_snr)
            img = img + noise_rng.normal(0.0, sigma, img.shape)
        cloud = np.zeros((size, size), dtype=bool)
        # draw unconditionally so one frame's probability never shifts another frame's clouds
        u, cy, cx = cloud_rng.random(3)
        puff = cloud_rng.standard_normal((size, size))
        if u < probs[t]:
            radius = spec.occlusion_size / 2.0
            cloud = (base_r - cy * size) ** 2 + (base_c - cx * size) ** 2 <= radius**2
            puff = ndimage.gaussian_filter(puff, max(1.0, spec.occlusion_size / 8.0), mode="wrap")
            puff = (puff - puff.min()) / max(puff.max() - puff.min(), 1e-12)
            img = np.where(cloud, 0.8 + 0.2 * puff, img)
        img = np.clip(img, 0.0, 1.0)
        frames.append(
            Raster(
                img.astype(np.float32),
                corners,
                spec.start_day + t * spec.interval_days,
                spec.pixel_size_m,
            )
        )
        occluded.append(cloud)
    truth = SynthTruth(np.rint(exact).astype(np.int64), exact, np.array(occluded))
    return SceneSeries(tuple(frames), spec.region_id), truth


def synth_sequences(
    n: int,
    size: int = 32,
    n_frames: int = 10,
    seed: int = 0,
    max_speed: float = 1.5,
    occlude_frame: int | None = None,
    occlude_prob: float = 0.0,
    background_occlusion: float = 0.0,
    occlusion_size: int | None = None,
    texture_scales: Sequence[float] = (1.0, 3.0),
    slope_amplitude: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack of independent chip sequences, one constant drift each.

    Returns ``(sequences, occluded)`` with shapes ``(n, n_frames, size, size)``
    (float64) and ``(n, n_frames)`` (bool).
    """
    seeds = np.random.SeedSequence(seed).generate_state(2 * n, dtype=np.uint64)
    occlusion_size = occlusion_size or int(round(0.75 * size))
    out = np.empty((n, n_frames, size, size))
    flags = np.zeros((n, n_frames), dtype=bool)
    for k in range(n):
        rng = np.random.default_rng(int(seeds[2 * k]))
        dx, dy = rng.uniform(-max_speed, max_speed, 2)
        probs = [background_occlusion] * n_frames
        if occlude_frame is not None:
            probs[occlude_frame] = occlude_prob
        spec = SynthSpec.constant(
            dx,
            dy,
            n_frames=n_frames,
            seed=int(seeds[2 * k + 1]),
            size=size,
            texture_scales=tuple(texture_scales),
            slope_amplitude=slope_amplitude,
            occlusion_prob=tuple(probs),
            occlusion_size=occlusion_size,
        )
        series, truth = synth_series(spec)
        out[k] = np.stack([f.pixels for f in series.frames])
        flags[k] = truth.occluded.any(axis=(1, 2))
    return out, flags
