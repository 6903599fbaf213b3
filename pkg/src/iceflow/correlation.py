"""Normalized cross-correlation between chips and over search windows.

Two surface backends are provided. ``direct`` evaluates the mean-removed
correlation independently at every offset and serves as the reference;
``fft`` gets the numerators from frequency-domain products and the window
means/variances from integral images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Per-pixel variance below this counts as a constant window.
VARIANCE_FLOOR = 1e-12


class UndefinedCorrelation(ValueError):
    """Raised when one operand has zero variance."""


def _as_float(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def ncc(r, s) -> float:
    """Correlation coefficient of two equally shaped grids, clamped to [-1, 1]."""
    r = _as_float(r)
    s = _as_float(s)
    if r.shape != s.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {s.shape}")
    if r.size < 2:
        raise ValueError("need at least 2 pixels")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(s))):
        raise ValueError("non-finite input to ncc")
    dr = r - r.mean()
    ds = s - s.mean()
    var_r = np.sum(dr * dr)
    var_s = np.sum(ds * ds)
    floor = r.size * VARIANCE_FLOOR
    if var_r <= floor or var_s <= floor:
        raise UndefinedCorrelation("zero-variance input: correlation undefined")
    ci = np.sum(dr * ds) / (np.sqrt(var_r) * np.sqrt(var_s))
    return float(min(1.0, max(-1.0, ci)))


@dataclass(frozen=True, eq=False)
class CorrelationSurface:
    """Scores indexed by candidate offset; ``scores[0, 0]`` is ``offset_origin``.

    Invalid offsets (nodata in the window or a constant window) hold NaN.
    """

    scores: np.ndarray
    invalid: np.ndarray
    offset_origin: tuple[int, int] = (0, 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def offset_of(self, index) -> tuple[int, int]:
        return (self.offset_origin[0] + int(index[0]), self.offset_origin[1] + int(index[1]))


@dataclass(frozen=True)
class MatchResult:
    offset: tuple[int, int]
    score: float
    runner_up: float | None = None


def _prepare(template, search, search_nodata):
    t = _as_float(template)
    s = _as_float(search)
    if t.ndim != 2 or s.ndim != 2:
        raise ValueError("template and search must be 2D")
    if t.shape[0] > s.shape[0] or t.shape[1] > s.shape[1]:
        raise ValueError(f"template {t.shape} larger than search region {s.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("template contains nodata or non-finite values")
    bad = ~np.isfinite(s)
    if search_nodata is not None:
        bad = bad | np.asarray(search_nodata, dtype=bool)
    dt = t - t.mean()
    t_energy = np.sum(dt * dt)
    if t_energy <= t.size * VARIANCE_FLOOR:
        raise UndefinedCorrelation("template has zero variance")
    return t, dt, t_energy, s, bad


def _window_sums(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum of every h x w window of ``a`` via an integral image."""
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=ii[1:, 1:])
    return ii[h:, w:] - ii[:-h, w:] - ii[h:, :-w] + ii[:-h, :-w]


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def _surface_direct(dt, t_energy, s, bad):
    h, w = dt.shape
    oh, ow = s.shape[0] - h + 1, s.shape[1] - w + 1
    n = h * w
    scores = np.full((oh, ow), np.nan)
    invalid = _window_sums(bad.astype(np.float64), h, w) > 0.5
    s_clean = np.where(bad, 0.0, s)
    windows = sliding_window_view(s_clean, (h, w))
    t_norm = np.sqrt(t_energy)
    for row in range(oh):
        win = windows[row]  # (ow, h, w)
        mean = win.mean(axis=(1, 2))
        dev = win - mean[:, None, None]
        energy = np.sum(dev * dev, axis=(1, 2))
        num = np.sum(dev * dt, axis=(1, 2))
        flat = energy <= n * VARIANCE_FLOOR
        invalid[row] |= flat
        with np.errstate(divide="ignore", invalid="ignore"):
            scores[row] = num / (t_norm * np.sqrt(energy))
    return scores, invalid


def _surface_fft(dt, t_energy, s, bad):
    h, w = dt.shape
    oh, ow = s.shape[0] - h + 1, s.shape[1] - w + 1
    n = h * w
    good = ~bad
    centre = s[good].mean() if good.any() else 0.0
    s0 = np.where(bad, 0.0, s - centre)
    shape = (_next_pow2(s.shape[0]), _next_pow2(s.shape[1]))
    spec = np.fft.rfft2(s0, shape) * np.conj(np.fft.rfft2(dt, shape))
    num = np.fft.irfft2(spec, shape)[:oh, :ow]
    sums = _window_sums(s0, h, w)
    sq = _window_sums(s0 * s0, h, w)
    energy = sq - sums * sums / n
    invalid = (_window_sums(bad.astype(np.float64), h, w) > 0.5) | (energy <= n * VARIANCE_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = num / (np.sqrt(t_energy) * np.sqrt(np.maximum(energy, 0.0)))
    return scores, invalid


def ncc_surface(template, search, backend: str = "fft", search_nodata=None, offset_origin=(0, 0)) -> CorrelationSurface:
    """Correlation of ``template`` against every same-size subwindow of ``search``."""
    t, dt, t_energy, s, bad = _prepare(template, search, search_nodata)
    if backend == "direct":
        scores, invalid = _surface_direct(dt, t_energy, s, bad)
    elif backend == "fft":
        scores, invalid = _surface_fft(dt, t_energy, s, bad)
    else:
        raise ValueError(f"unknown backend {backend!r}; expected 'direct' or 'fft'")
    scores = np.clip(scores, -1.0, 1.0)
    scores[invalid] = np.nan
    return CorrelationSurface(scores, invalid, (int(offset_origin[0]), int(offset_origin[1])))


def best_match(surface: CorrelationSurface) -> MatchResult:
    """Highest valid score; ties go to the offset nearest the surface centre, then row-major."""
    scores = surface.scores
    valid = ~surface.invalid
    if not valid.any():
        raise UndefinedCorrelation("no valid offset on the correlation surface")
    vals = np.where(valid, scores, -np.inf)
    top = vals.max()
    rows, cols = np.nonzero(vals == top)
    oh, ow = scores.shape
    # doubled coordinates keep the centre distance integral
    dist2 = (2 * rows - (oh - 1)) ** 2 + (2 * cols - (ow - 1)) ** 2
    k = np.lexsort((cols, rows, dist2))[0]
    best = (rows[k], cols[k])
    rest = vals.copy()
    rest[best] = -np.inf
    runner = rest.max()
    return MatchResult(
        surface.offset_of(best),
        float(top),
        float(runner) if np.isfinite(runner) else None,
    )
