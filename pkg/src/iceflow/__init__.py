"""Glacier chip tracking by normalized cross-correlation, with persistence,
high-pass and learned stochastic-prediction models scored on the same chips."""

__version__ = "0.1.0"

from .baselines import HighPassConfig, highpass, highpass_predict, persistence_predict
from .chips import Chip, ChipGridSpec, chip_frame, usable
from .correlation import CorrelationSurface, MatchResult, UndefinedCorrelation, best_match, ncc, ncc_surface
from .evaluation import CorrelationMap, EvalSummary, compare_models, correlation_map, summarize
from .raster import Raster, SceneSeries, SynthSpec, export_pgm, read_raster, synth_series, write_raster
from .tracking import SearchConfig, TrackRecord, TrackStep, enlarge_window, track_series, track_step, velocity

__all__ = [
    "Chip",
    "ChipGridSpec",
    "CorrelationMap",
    "CorrelationSurface",
    "EvalSummary",
    "HighPassConfig",
    "MatchResult",
    "Raster",
    "SceneSeries",
    "SearchConfig",
    "SynthSpec",
    "TrackRecord",
    "TrackStep",
    "UndefinedCorrelation",
    "best_match",
    "chip_frame",
    "compare_models",
    "correlation_map",
    "enlarge_window",
    "export_pgm",
    "highpass",
    "highpass_predict",
    "ncc",
    "ncc_surface",
    "persistence_predict",
    "read_raster",
    "summarize",
    "synth_series",
    "track_series",
    "track_step",
    "usable",
    "velocity",
    "write_raster",
]
