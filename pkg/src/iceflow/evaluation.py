"""Per-chip correlation maps, bucket statistics and three-model comparisons."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .baselines import HighPassConfig, highpass, persistence_predict
from .chips import ChipGridSpec
from .correlation import UndefinedCorrelation, ncc
from .raster import SceneSeries
from .tracking import SearchConfig, track_series

LOW_EDGE = 0.3
HIGH_EDGE = 0.7


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    """Per-chip scores on the chip grid; invalid entries hold NaN."""

    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def masked(self, valid: np.ndarray) -> "CorrelationMap":
        keep = self.valid & valid
        return CorrelationMap(np.where(keep, self.values, np.nan), keep)


@dataclass(frozen=True)
class EvalSummary:
    model: str
    mean_correlation: float
    low: float
    medium: float
    high: float
    n_valid: int
    n_total: int

    def row(self) -> list:
        return [self.model, self.mean_correlation, self.low, self.medium, self.high, self.n_valid, self.n_total]


def correlation_map(predictions, targets, validity=None, shape=None) -> CorrelationMap:
    """Entry ``j`` is ``ncc(predictions[j], targets[j])``; constant pairs are invalid."""
    if len(predictions) != len(targets):
        raise ValueError(f"count mismatch: {len(predictions)} predictions vs {len(targets)} targets")
    n = len(predictions)
    validity = np.ones(n, dtype=bool) if validity is None else np.asarray(validity, dtype=bool).reshape(-1)
    if validity.size != n:
        raise ValueError("validity mask does not match the chip count")
    values = np.full(n, np.nan)
    valid = np.zeros(n, dtype=bool)
    for j, (p, t) in enumerate(zip(predictions, targets)):
        if not validity[j]:
            continue
        p, t = np.asarray(p), np.asarray(t)
        if p.shape != t.shape:
            raise ValueError(f"chip {j}: shape mismatch {p.shape} vs {t.shape}")
        try:
            values[j] = ncc(p, t)
            valid[j] = True
        except UndefinedCorrelation:
            pass
    shape = (n,) if shape is None else tuple(shape)
    return CorrelationMap(values.reshape(shape), valid.reshape(shape))


def summarize(cmap: CorrelationMap, model: str = "", edges=(LOW_EDGE, HIGH_EDGE)) -> EvalSummary:
    """Mean and low/medium/high fractions over valid entries; the middle bucket is closed."""
    lo, hi = edges
    vals = cmap.values[cmap.valid]
    if vals.size == 0:
        raise ValueError("no valid entries to summarize")
    n = vals.size
    n_low = int(np.count_nonzero(vals < lo))
    n_high = int(np.count_nonzero(vals > hi))
    n_mid = n - n_low - n_high
    return EvalSummary(model, float(vals.mean()), n_low / n, n_mid / n, n_high / n, n, int(cmap.values.size))


def compare_maps(maps: dict[str, CorrelationMap], base_valid=None) -> dict[str, tuple[CorrelationMap, EvalSummary]]:
    """Restrict every map to the chips valid for all models, then summarize."""
    if not maps:
        raise ValueError("no models to compare")
    shapes = {m.shape for m in maps.values()}
    if len(shapes) != 1:
        raise ValueError(f"mask mismatch: maps have shapes {sorted(shapes)}")
    shared = np.logical_and.reduce([m.valid for m in maps.values()])
    if base_valid is not None:
        shared &= np.asarray(base_valid, dtype=bool).reshape(shared.shape)
    out = {}
    for name, m in maps.items():
        restricted = m.masked(shared)
        out[name] = (restricted, summarize(restricted, name))
    return out


def model_maps(sequences, valid, context_len: int, lead: int = 1, highpass_cfg: HighPassConfig = HighPassConfig(), ml_predictions=None, shape=None) -> dict[str, CorrelationMap]:
    """Correlation maps of each model against frame ``context_len + lead - 1``.

    ``sequences`` is ``(N, T, H, W)``. Persistence scores the last context
    frame, the high-pass model scores the filtered last context frame against
    the filtered target, and ``ml_predictions`` (``(N, H, W)``, optional) are
    scored directly.
    """
    seqs = np.asarray(sequences, dtype=np.float64)
    target_idx = context_len + lead - 1
    if seqs.shape[1] <= target_idx:
        raise ValueError(f"sequences have {seqs.shape[1]} frames, target index {target_idx} missing")
    history = seqs[:, :context_len]
    targets = seqs[:, target_idx]
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    maps = {"persistence": correlation_map([persistence_predict(h) for h in history], targets, valid, shape)}
    hp_pred, hp_tgt = [], []
    for h, t, ok in zip(history, targets, valid):
        if ok:
            hp_pred.append(highpass(persistence_predict(h), highpass_cfg))
            hp_tgt.append(highpass(t, highpass_cfg))
        else:
            hp_pred.append(np.zeros_like(t))
            hp_tgt.append(np.zeros_like(t))
    maps["highpass"] = correlation_map(hp_pred, hp_tgt, valid, shape)
    if ml_predictions is not None:
        maps["ml"] = correlation_map(list(ml_predictions), targets, valid, shape)
    return maps


def tracked_sequences(series: SceneSeries, grid: ChipGridSpec, cfg: SearchConfig, n_frames: int | None = None, workers=None):
    """Chip sequences along the tracked trajectories.

    Returns ``(sequences, valid, grid_shape)``; ``sequences`` has one row per
    grid position. Rows whose starting chip is unusable or whose track froze
    within the first ``n_frames`` frames are invalid (and zero-filled).
    """
    n_frames = len(series) if n_frames is None else n_frames
    if not 2 <= n_frames <= len(series):
        raise ValueError("n_frames must lie in [2, len(series)]")
    first = series.frames[0]
    shape = grid.shape(first.height, first.width)
    n = shape[0] * shape[1]
    size = grid.chip_size
    seqs = np.zeros((n, n_frames, size, size))
    valid = np.zeros(n, dtype=bool)
    for rec in track_series(SceneSeries(series.frames[:n_frames], series.region_id), grid, cfg, workers):
        if not all(s.accepted for s in rec.steps):
            continue
        r, c = rec.initial_origin
        seqs[rec.grid_index, 0] = first.pixels[r : r + size, c : c + size]
        for k, chip in enumerate(rec.chips, start=1):
            seqs[rec.grid_index, k] = chip.values
        valid[rec.grid_index] = True
    return seqs, valid, shape


def compare_models(series: SceneSeries, grid: ChipGridSpec, search: SearchConfig, context_len: int, lead: int = 1, highpass_cfg: HighPassConfig = HighPassConfig(), ml=None, seed: int = 0, workers=None):
    """Track, predict and score persistence, high-pass and (optionally) the learned model.

    ``ml`` is ``(params, ModelConfig)`` or ``None``. Returns
    ``{model: (CorrelationMap, EvalSummary)}`` with one shared validity mask.
    """
    seqs, valid, shape = tracked_sequences(series, grid, search, context_len + lead, workers)
    ml_pred = None
    if ml is not None:
        from .svg import predict_batch

        params, mcfg = ml
        if mcfg.context_len != context_len or mcfg.chip_size != grid.chip_size:
            raise ValueError("model context length / chip size disagree with the evaluation setup")
        ml_pred = np.zeros((seqs.shape[0], grid.chip_size, grid.chip_size))
        idx = np.flatnonzero(valid)
        if idx.size:
            out = predict_batch(seqs[idx, :context_len], params, mcfg, seed, n_future=lead)
            ml_pred[idx] = out[:, lead - 1]
    maps = model_maps(seqs, valid, context_len, lead, highpass_cfg, ml_pred, shape)
    return compare_maps(maps, valid.reshape(shape))


# ---------------------------------------------------------------------------
# report writers


SUMMARY_HEADER = ["model", "mean", "low", "medium", "high", "n_valid", "n_total"]


def write_summary_csv(summaries, destination) -> None:
    with open(destination, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            w.writerow([s.model] + [repr(float(v)) for v in s.row()[1:5]] + [s.n_valid, s.n_total])


def write_per_chip_jsonl(maps: dict[str, CorrelationMap], destination) -> None:
    with open(destination, "w") as fh:
        for name, m in maps.items():
            for j, (v, ok) in enumerate(zip(m.values.reshape(-1), m.valid.reshape(-1))):
                fh.write(json.dumps({"model": name, "j": j, "ci": float(v) if ok else None, "valid": bool(ok)}) + "\n")


def format_table(summaries) -> str:
    """Plain-text table: one column per model, mean then bucket fractions."""
    names = [s.model for s in summaries]
    width = max(12, *(len(n) + 2 for n in names))
    lines = ["".ljust(22) + "".join(n.rjust(width) for n in names)]
    rows = [
        ("Correlation  Mean", [s.mean_correlation for s in summaries]),
        (f"Low     < {LOW_EDGE}", [s.low for s in summaries]),
        (f"Medium  {LOW_EDGE}~{HIGH_EDGE}", [s.medium for s in summaries]),
        (f"High    > {HIGH_EDGE}", [s.high for s in summaries]),
    ]
    for label, vals in rows:
        lines.append(label.ljust(22) + "".join(f"{v:.3g}".rjust(width) for v in vals))
    return "\n".join(lines)
