"""``iceflow`` command line: synth | chip | track | baseline | train | predict | eval | bench.

Every subcommand accepts ``--config FILE`` (a JSON object of option values,
or a previous ``run.json``); explicit flags override file values. Each run
writes ``run.json`` with the fully resolved options into its output
directory, so ``iceflow <cmd> --config out/run.json --out other`` replays it.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import load_params
from .baselines import HighPassConfig, highpass, persistence_predict
from .chips import ChipGridSpec, write_chip_dataset
from .correlation import ncc_surface
from .evaluation import (
    compare_models,
    format_table,
    tracked_sequences,
    write_per_chip_jsonl,
    write_summary_csv,
)
from .raster import Raster, RasterFormatError, SynthSpec, export_pgm, read_series, synth_sequences, synth_series, write_raster, write_series
from .svg import ModelConfig, TrainConfig, load_model, predict_batch, save_model, train, write_log
from .tracking import SearchConfig, default_workers, recoverable_steps, track_series, velocity

log = logging.getLogger("iceflow")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# defaults per subcommand; flags use SUPPRESS so only explicit ones show up
DEFAULTS = {
    "synth": dict(seed=0, frames=12, size=512, dx=0.0, dy=0.0, scales="1.5,4", slope=0.5, occlusion=0.0,
                  occlusion_size=32, snr=None, corner=0.0, interval=16.0, region="synthetic"),
    "chip": dict(input=None, chip_size=128, stride=None),
    "track": dict(input=None, chip_size=128, scale_factor=1.5, min_score=0.0, max_nodata=0.0, backend="fft",
                  truth=None),
    "baseline": dict(input=None, model="persistence", sigma=2.0, no_binarize=False, threshold=0.0, chip_size=128,
                     context=8, scale_factor=1.5, min_score=0.0, max_nodata=0.0, backend="fft"),
    "train": dict(input=None, synthetic=64, synthetic_occlusion=0.3, seed=0, chip_size=32, z_dim=8, g_dim=32,
                  rnn_layers=2, rnn_units=32, context=8, horizon=2, beta=1e-4, lambda_peak=1.0, peak_window=16,
                  epochs=200, batch_size=8, lr=2e-3, scale_factor=1.5, min_score=0.0, max_nodata=0.0, backend="fft"),
    "predict": dict(input=None, checkpoint=None, samples=1, seed=0, scale_factor=1.5, min_score=0.0, max_nodata=0.0,
                    backend="fft"),
    "eval": dict(input=None, models="persistence,highpass,ml", checkpoint=None, chip_size=None, context=None, lead=1,
                 sigma=2.0, no_binarize=False, threshold=0.0, seed=0, scale_factor=1.5, min_score=0.0,
                 max_nodata=0.0, backend="fft"),
    "bench": dict(sizes="32,64,128,256", repeats=3, seed=0),
}


def _add(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def _search_flags(p):
    _add(p, "--scale-factor", type=float, help="search window / chip size ratio (> 1)")
    _add(p, "--min-score", type=float, help="reject matches scoring below this")
    _add(p, "--max-nodata", type=float, help="largest nodata fraction of a usable chip")
    _add(p, "--backend", choices=["fft", "direct"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iceflow", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option values (e.g. a previous run.json)")
        p.add_argument("--out", help="output directory")
        return p

    p = command("synth", "render a synthetic series with known motion")
    _add(p, "--seed", type=int)
    _add(p, "--frames", type=int)
    _add(p, "--size", type=int)
    _add(p, "--dx", type=float, help="per-frame shift to the right, pixels")
    _add(p, "--dy", type=float, help="per-frame shift downward, pixels")
    _add(p, "--scales", help="texture smoothing lengths, comma-separated")
    _add(p, "--slope", type=float)
    _add(p, "--occlusion", type=float, help="per-frame cloud probability")
    _add(p, "--occlusion-size", type=int)
    _add(p, "--snr", type=float, help="signal-to-noise power ratio of added noise")
    _add(p, "--corner", type=float, help="nodata corner leg as a fraction of size")
    _add(p, "--interval", type=float, help="days between frames")
    _add(p, "--region")

    p = command("chip", "cut every frame into chips")
    _add(p, "--input", help="series manifest.json or its directory")
    _add(p, "--chip-size", type=int)
    _add(p, "--stride", type=int)

    p = command("track", "chain chips through the series")
    _add(p, "--input")
    _add(p, "--chip-size", type=int)
    _search_flags(p)
    _add(p, "--truth", help="truth.json from synth, to count mismatches")

    p = command("baseline", "persistence / high-pass predictions")
    _add(p, "--input")
    _add(p, "--model", choices=["persistence", "highpass"])
    _add(p, "--sigma", type=float)
    _add(p, "--no-binarize", action="store_true")
    _add(p, "--threshold", type=float)
    _add(p, "--chip-size", type=int)
    _add(p, "--context", type=int)
    _search_flags(p)

    p = command("train", "fit the stochastic predictor")
    _add(p, "--input", help="series to draw tracked chip sequences from (default: synthetic)")
    _add(p, "--synthetic", type=int, help="number of synthetic sequences when no --input")
    _add(p, "--synthetic-occlusion", type=float, help="cloud probability on the last context frame")
    _add(p, "--seed", type=int)
    _add(p, "--chip-size", type=int)
    _add(p, "--z-dim", type=int)
    _add(p, "--g-dim", type=int)
    _add(p, "--rnn-layers", type=int)
    _add(p, "--rnn-units", type=int)
    _add(p, "--context", type=int)
    _add(p, "--horizon", type=int)
    _add(p, "--beta", type=float)
    _add(p, "--lambda-peak", type=float)
    _add(p, "--peak-window", type=int)
    _add(p, "--epochs", type=int)
    _add(p, "--batch-size", type=int)
    _add(p, "--lr", type=float)
    _search_flags(p)

    p = command("predict", "sample future chips from a trained model")
    _add(p, "--input")
    _add(p, "--checkpoint")
    _add(p, "--samples", type=int)
    _add(p, "--seed", type=int)
    _search_flags(p)

    p = command("eval", "correlation maps and bucket table per model")
    _add(p, "--input")
    _add(p, "--models", help="comma-separated subset of persistence,highpass,ml")
    _add(p, "--checkpoint")
    _add(p, "--chip-size", type=int)
    _add(p, "--context", type=int)
    _add(p, "--lead", type=int, help="frames after the context to score")
    _add(p, "--sigma", type=float)
    _add(p, "--no-binarize", action="store_true")
    _add(p, "--threshold", type=float)
    _add(p, "--seed", type=int)
    _search_flags(p)

    p = command("bench", "time direct vs FFT correlation surfaces")
    _add(p, "--sizes", help="search sizes, comma-separated")
    _add(p, "--repeats", type=int)
    _add(p, "--seed", type=int)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[command])
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config {args.config}: {exc.msg} at line {exc.lineno}")
        if not isinstance(doc, dict):
            raise UsageError(f"malformed config {args.config}: expected a JSON object")
        if "subcommand" in doc:
            if doc["subcommand"] != command:
                raise UsageError(f"config {args.config} was written by '{doc['subcommand']}', not '{command}'")
            doc = doc.get("args", {})
        unknown = sorted(set(doc) - set(opts) - {"out"})
        if unknown:
            raise UsageError(f"malformed config {args.config}: unknown option(s) {', '.join(unknown)}")
        opts.update({k: v for k, v in doc.items() if k != "out"})
    given = {k: v for k, v in vars(args).items() if k in opts}
    opts.update(given)
    for key in ("input", "truth", "checkpoint"):
        if opts.get(key):
            opts[key] = str(Path(opts[key]).resolve())
    return opts


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, command: str, opts: dict):
    doc = {"subcommand": command, "version": __version__, "args": opts}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _need(opts, key):
    if not opts.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return opts[key]


def _series(opts):
    path = Path(_need(opts, "input"))
    if not path.exists():
        raise DataError(f"input not found: {path}")
    return read_series(path)


def _search(opts) -> SearchConfig:
    try:
        return SearchConfig(opts["scale_factor"], opts["min_score"], opts["max_nodata"], opts["backend"])
    except ValueError as exc:
        raise UsageError(str(exc))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(opts, out):
    n = opts["frames"]
    try:
        spec = SynthSpec.constant(
            opts["dx"], opts["dy"], n_frames=n, seed=opts["seed"], size=opts["size"],
            texture_scales=tuple(_floats(opts["scales"])), slope_amplitude=opts["slope"],
            occlusion_prob=opts["occlusion"], occlusion_size=opts["occlusion_size"], noise_snr=opts["snr"],
            nodata_corner=opts["corner"], interval_days=opts["interval"], region_id=opts["region"],
        )
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(str(exc))
    series, truth = synth_series(spec)
    write_series(series, out)
    (out / "truth.json").write_text(json.dumps(truth.to_json(), indent=1) + "\n")
    print(f"wrote {n} frames of {spec.size}x{spec.size} to {out}")


def cmd_chip(opts, out):
    series = _series(opts)
    try:
        grid = ChipGridSpec(opts["chip_size"], opts["stride"])
        path = write_chip_dataset(series, grid, out)
    except ValueError as exc:
        raise DataError(str(exc))
    print(f"wrote chip index {path}")


def _track_outputs(records, series, out: Path):
    with open(out / "tracks.jsonl", "w") as fh:
        for rec in records:
            for step in rec.steps:
                score = step.score if np.isfinite(step.score) else None
                fh.write(json.dumps({"j": rec.grid_index, "i": step.frame_index, "drow": step.offset[0],
                                     "dcol": step.offset[1], "score": score, "accepted": step.accepted}) + "\n")
    pixel = series.frames[0].pixel_size_m
    with open(out / "velocity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "i", "speed_m_per_day", "heading_deg"])
        for rec in records:
            for v in velocity(rec, series.timestamps, pixel):
                w.writerow([rec.grid_index, v.frame_index, repr(v.speed_m_per_day),
                            "" if v.heading_deg is None else repr(v.heading_deg)])


def cmd_track(opts, out):
    series = _series(opts)
    cfg = _search(opts)
    try:
        grid = ChipGridSpec(opts["chip_size"])
        records = track_series(series, grid, cfg, default_workers())
    except ValueError as exc:
        raise DataError(str(exc))
    _track_outputs(records, series, out)
    n_steps = sum(len(r.steps) for r in records)
    print(f"tracked {len(records)} chips over {len(series)} frames ({n_steps} steps)")
    if opts["truth"]:
        try:
            truth = json.loads(Path(opts["truth"]).read_text())
            disp = np.array(truth["displacements"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"bad truth file {opts['truth']}: {exc}")
        checked = mismatches = 0
        for rec in records:
            ok = recoverable_steps(rec, disp, series.frames[0].shape, grid.chip_size)
            for step, good in zip(rec.steps, ok):
                if not good:
                    continue
                checked += 1
                expected = tuple(disp[step.frame_index] - disp[step.source_index])
                mismatches += (not step.accepted) or tuple(step.offset) != expected
        result = {"checked_steps": checked, "mismatches": int(mismatches)}
        (out / "truth_check.json").write_text(json.dumps(result) + "\n")
        print(f"mismatches: {mismatches} of {checked} recoverable steps")


def _save_chips(out: Path, chips: dict[str, np.ndarray]):
    """Store predictions as ICEF where values fit [0, 1]; always keep an npz of everything."""
    pred_dir = out / "pred"
    pred_dir.mkdir(exist_ok=True)
    for name, arr in chips.items():
        if np.all((arr >= 0) & (arr <= 1)):
            write_raster(Raster(arr.astype(np.float32)), pred_dir / f"{name}.icef")
    np.savez(out / "predictions.npz", **chips)


def cmd_baseline(opts, out):
    series = _series(opts)
    cfg = _search(opts)
    ctx = opts["context"]
    try:
        grid = ChipGridSpec(opts["chip_size"])
        seqs, valid, _ = tracked_sequences(series, grid, cfg, ctx)
        hp = HighPassConfig(opts["sigma"], not opts["no_binarize"], opts["threshold"])
    except ValueError as exc:
        raise DataError(str(exc))
    chips = {}
    for j in np.flatnonzero(valid):
        pred = persistence_predict(seqs[j, :ctx])
        if opts["model"] == "highpass":
            pred = highpass(pred, hp)
        chips[f"j{j:05d}"] = np.asarray(pred, dtype=np.float64)
    _save_chips(out, chips)
    print(f"{opts['model']}: predicted {len(chips)} chips")


def _model_config(opts) -> ModelConfig:
    try:
        return ModelConfig(
            chip_size=opts["chip_size"], z_dim=opts["z_dim"], g_dim=opts["g_dim"], rnn_layers=opts["rnn_layers"],
            rnn_units=opts["rnn_units"], context_len=opts["context"], horizon=opts["horizon"], beta=opts["beta"],
            lambda_peak=opts["lambda_peak"], peak_window=min(opts["peak_window"], opts["chip_size"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_train(opts, out):
    mcfg = _model_config(opts)
    if opts["input"]:
        series = _series(opts)
        try:
            seqs, valid, _ = tracked_sequences(series, ChipGridSpec(mcfg.chip_size), _search(opts), min(len(series), mcfg.seq_len))
        except ValueError as exc:
            raise DataError(str(exc))
        data = seqs[valid]
        if len(data) == 0:
            raise DataError("no complete tracks to train on")
    else:
        data, _ = synth_sequences(opts["synthetic"], mcfg.chip_size, mcfg.seq_len, seed=opts["seed"],
                                  occlude_frame=mcfg.context_len - 1, occlude_prob=opts["synthetic_occlusion"])
    topt = TrainConfig(opts["epochs"], opts["batch_size"], opts["lr"], opts["seed"])
    params, history = train(data, mcfg, topt, progress=lambda e, b: log.info("epoch %d %s", e, b))
    save_model(params, mcfg, out / "model.icew")
    write_log(history, out / "train_log.csv")
    print(f"trained on {len(data)} sequences; recon_l2 {history[0].recon_l2:.4g} -> {history[-1].recon_l2:.4g}")


def _load_model(opts):
    path = Path(_need(opts, "checkpoint"))
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {exc.filename}")
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}")


def cmd_predict(opts, out):
    params, mcfg = _load_model(opts)
    series = _series(opts)
    if len(series) < mcfg.context_len:
        raise DataError(f"series has {len(series)} frames; model needs {mcfg.context_len}")
    try:
        seqs, valid, _ = tracked_sequences(series, ChipGridSpec(mcfg.chip_size), _search(opts), mcfg.context_len)
    except ValueError as exc:
        raise DataError(str(exc))
    idx = np.flatnonzero(valid)
    chips = {}
    for k in range(opts["samples"]):
        if not idx.size:
            break
        pred = predict_batch(seqs[idx], params, mcfg, seed=opts["seed"] + k)
        for row, j in enumerate(idx):
            for f in range(pred.shape[1]):
                chips[f"j{j:05d}_s{k}_f{f + 1}"] = pred[row, f]
    _save_chips(out, chips)
    print(f"predicted {len(idx)} chips x {opts['samples']} samples x {mcfg.horizon} frames")


def cmd_eval(opts, out):
    models = [m.strip() for m in opts["models"].split(",") if m.strip()]
    bad = sorted(set(models) - {"persistence", "highpass", "ml"})
    if bad or not models:
        raise UsageError(f"unknown model(s) {', '.join(bad) or '(none)'}; choose from persistence,highpass,ml")
    ml = _load_model(opts) if "ml" in models else None
    chip_size = opts["chip_size"] or (ml[1].chip_size if ml else 128)
    context = opts["context"] or (ml[1].context_len if ml else 8)
    if ml and (ml[1].chip_size != chip_size or ml[1].context_len != context):
        raise UsageError("--chip-size/--context disagree with the checkpoint's model config")
    series = _series(opts)
    hp = HighPassConfig(opts["sigma"], not opts["no_binarize"], opts["threshold"])
    try:
        results = compare_models(series, ChipGridSpec(chip_size), _search(opts), context, opts["lead"], hp, ml, opts["seed"])
    except ValueError as exc:
        raise DataError(str(exc))
    results = {m: results[m] for m in models}
    summaries = [s for _, s in results.values()]
    write_summary_csv(summaries, out / "summary.csv")
    write_per_chip_jsonl({m: cm for m, (cm, _) in results.items()}, out / "per_chip.jsonl")
    for m, (cm, _) in results.items():
        export_pgm(cm.values, -1.0, 1.0, out / f"map_{m}.pgm")
    print(format_table(summaries))


def cmd_bench(opts, out):
    rng = np.random.default_rng(opts["seed"])
    rows = []
    for size in _ints(opts["sizes"]) if isinstance(opts["sizes"], str) else opts["sizes"]:
        tsize = max(8, size // 2)
        search = rng.random((size, size))
        template = rng.random((tsize, tsize))
        timings, surfaces = {}, {}
        for backend in ("direct", "fft"):
            best = float("inf")
            for _ in range(opts["repeats"]):
                t0 = time.perf_counter()
                surfaces[backend] = ncc_surface(template, search, backend)
                best = min(best, time.perf_counter() - t0)
            timings[backend] = best
        diff = float(np.nanmax(np.abs(surfaces["direct"].scores - surfaces["fft"].scores)))
        rows.append([size, tsize, timings["direct"], timings["fft"], diff])
        print(f"search {size:4d} template {tsize:4d}: direct {timings['direct']:.4f}s fft {timings['fft']:.4f}s max|diff| {diff:.2e}")
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["search_size", "template_size", "direct_s", "fft_s", "max_abs_diff"])
        w.writerows(rows)


COMMANDS = {
    "synth": cmd_synth, "chip": cmd_chip, "track": cmd_track, "baseline": cmd_baseline,
    "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        if not args.command:
            raise UsageError("iceflow: a subcommand is required (synth, chip, track, baseline, train, predict, eval, bench)")
        opts = resolve(args.command, args)
        out = _out_dir(args)
        log.info("resolved config: %s", json.dumps(opts, sort_keys=True))
        _write_run(out, args.command, opts)
        COMMANDS[args.command](opts, out)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, RasterFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: file not found: {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
