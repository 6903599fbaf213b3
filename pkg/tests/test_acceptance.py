"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary under "acceptance criteria".
"""

import json
import math
import time

import numpy as np
from scipy import integrate

from iceflow import autodiff as ad
from iceflow.chips import ChipGridSpec
from iceflow.cli import main
from iceflow.correlation import UndefinedCorrelation, ncc, ncc_surface
from iceflow.raster import Raster, SynthSpec, raster_to_bytes, read_raster, synth_sequences, synth_series
from iceflow.svg import ModelConfig, TrainConfig, elbo_step, init_params, kl_diag_gaussian, train
from iceflow.tracking import SearchConfig, recoverable_steps, track_series

from test_autodiff import op_cases


def record(log, n, ok, detail):
    log.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


def test_criterion_1_backend_equivalence(acceptance_log):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, mask_ok = 0.0, True
    for _ in range(200):
        sh = int(rng.integers(16, 161))
        sw = int(rng.integers(16, 161))
        th = int(rng.integers(16, sh + 1))
        tw = int(rng.integers(16, sw + 1))
        template, search = rng.random((th, tw)), rng.random((sh, sw))
        d = ncc_surface(template, search, "direct")
        f = ncc_surface(template, search, "fft")
        mask_ok &= bool(np.array_equal(d.invalid, f.invalid))
        worst = max(worst, float(np.nanmax(np.abs(d.scores - f.scores))))
    elapsed = time.perf_counter() - start
    ok = mask_ok and worst < 1e-6 and elapsed < 60
    record(acceptance_log, 1, ok, f"max|direct-fft| = {worst:.2e} over 200 pairs in {elapsed:.1f}s")


def test_criterion_2_correlation_properties(acceptance_log):
    rng = np.random.default_rng(77)
    chips = []
    for k in range(1000):
        size = int(rng.integers(2, 33))
        if k % 2:
            chips.append(rng.random((size, size)))
        else:
            # smooth texture with a trend, closer to real imagery
            a = np.cumsum(rng.normal(size=(size, size)), axis=1)
            chips.append((a - a.min()) / (np.ptp(a) + 1e-9))
    sym_ok, worst_affine, worst_self = True, 0.0, 0.0
    for k, r in enumerate(chips):
        s = rng.random(r.shape)
        sym_ok &= ncc(r, s) == ncc(s, r)
        a, b = float(rng.uniform(0.01, 100)), float(rng.uniform(-10, 10))
        worst_affine = max(worst_affine, abs(ncc(a * r + b, s) - ncc(r, s)))
        worst_self = max(worst_self, abs(ncc(r, r) - 1.0))
    raises = 0
    for r in chips[:100]:
        try:
            ncc(np.full_like(r, 0.5), r)
        except UndefinedCorrelation:
            raises += 1
    ok = sym_ok and worst_affine < 1e-9 and worst_self < 1e-12 and raises == 100
    detail = f"symmetry exact={sym_ok}, affine {worst_affine:.1e}, self {worst_self:.1e}, zero-variance raised {raises}/100"
    record(acceptance_log, 2, ok, detail)


def _tracking_score(snr, seeds):
    exact = within = total = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        steps = tuple((int(a), int(b)) for a, b in rng.integers(-16, 17, (11, 2)))
        spec = SynthSpec(seed=seed, size=384, n_frames=12, displacement_field=steps, noise_snr=snr)
        series, truth = synth_series(spec)
        disp = truth.displacements
        for rec in track_series(series, ChipGridSpec(64), SearchConfig(scale_factor=1.5)):
            for step, ok in zip(rec.steps, recoverable_steps(rec, disp, series.frames[0].shape, 64)):
                if not ok:
                    continue
                want = disp[step.frame_index] - disp[step.source_index]
                err = np.abs(np.array(step.offset) - want).max() if step.accepted else np.inf
                total += 1
                exact += err == 0
                within += err <= 1
    return exact, within, total


def test_criterion_3_tracking_oracle(acceptance_log):
    exact, _, total = _tracking_score(None, (1, 2, 3))
    _, within, total_noisy = _tracking_score(10.0, (1, 2, 3))
    frac_exact = exact / total
    frac_noisy = within / total_noisy
    ok = total > 100 and frac_exact == 1.0 and frac_noisy >= 0.95
    detail = (f"noise-free exact {exact}/{total} ({frac_exact:.1%}); "
              f"SNR 10 within 1 px {within}/{total_noisy} ({frac_noisy:.1%})")
    record(acceptance_log, 3, ok, detail)


def test_criterion_4_gradients(acceptance_log):
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for case in range(29):
        name, f, x = op_cases(np.random.default_rng(100 + case))[case]
        exclude = (lambda d: np.abs(d) < 1e-4) if "relu" in name else None
        err = ad.grad_check_report(f, x, 1e-5, exclude=exclude).max_rel_error
        if err >= worst_op:
            worst_op, worst_name = err, name
    rng = np.random.default_rng(5)
    x0, h0, c0 = rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 4)), rng.uniform(-1, 1, (2, 4))
    w = ad.Tensor(rng.uniform(-1, 1, (7, 16)), requires_grad=True)
    b = rng.uniform(-1, 1, 16)
    lstm_err = ad.grad_check(lambda t: ad.sum(ad.lstm_cell(x0, h0, c0, t, b)[0]), w, 1e-5)
    worst_op = max(worst_op, lstm_err)

    cfg = ModelConfig(chip_size=32, z_dim=8, context_len=4, horizon=2)
    params = init_params(cfg, 0)
    seqs, _ = synth_sequences(2, 32, cfg.seq_len, seed=0)
    noise = np.random.default_rng(1).standard_normal((cfg.seq_len - 1, 2, cfg.z_dim))
    worst_model, checked, skipped = 0.0, 0, 0
    for pname, target in params.items():

        def loss(t, pname=pname):
            return elbo_step(seqs, {**params, pname: t}, cfg, "train", noise=noise).total

        idx = np.random.default_rng(0).choice(target.size, min(target.size, 24), replace=False)
        rep = ad.grad_check_report(loss, target, 1e-4, indices=idx, skip_kinks=True)
        worst_model = max(worst_model, rep.max_rel_error)
        checked += rep.checked
        skipped += rep.skipped
    elapsed = time.perf_counter() - start
    ok = worst_op < 1e-6 and worst_model < 1e-4 and elapsed < 300
    detail = (f"worst operator {worst_op:.1e} ({worst_name}); full model {worst_model:.1e} over "
              f"{checked} coordinates ({skipped} at kinks skipped) in {elapsed:.0f}s")
    record(acceptance_log, 4, ok, detail)


def _quad_kl(mq, sq, mp, sp):
    def integrand(x):
        lq = -0.5 * ((x - mq) / sq) ** 2 - math.log(sq)
        lp = -0.5 * ((x - mp) / sp) ** 2 - math.log(sp)
        return math.exp(lq) / math.sqrt(2 * math.pi) * (lq - lp)

    return integrate.quad(integrand, mq - 40 * sq, mq + 40 * sq, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


def test_criterion_5_kl_oracle(acceptance_log):
    rng = np.random.default_rng(50)
    worst = 0.0
    for _ in range(50):
        mq, mp = rng.normal(0, 2, 2)
        sq, sp = rng.uniform(0.2, 3, 2)
        worst = max(worst, abs(kl_diag_gaussian([mq], [sq], [mp], [sp]) - _quad_kl(mq, sq, mp, sp)))
    m = rng.normal(0, 3, (10_000, 2))
    s = np.exp(rng.uniform(-3, 3, (10_000, 2)))
    kls = np.array([kl_diag_gaussian([a], [b], [c], [d]) for (a, c), (b, d) in zip(m, s)])
    ok = worst < 1e-6 and (kls >= 0).all()
    record(acceptance_log, 5, ok, f"max |closed form - quadrature| = {worst:.1e}; min KL over 1e4 pairs = {kls.min():.2e}")


def test_criterion_6_training_sanity(acceptance_log):
    seqs, _ = synth_sequences(64, 32, 10, seed=0)
    cfg = ModelConfig(chip_size=32)
    opt = TrainConfig(epochs=200, seed=0)
    start = time.perf_counter()
    _, log_a = train(seqs, cfg, opt)
    _, log_b = train(seqs, cfg, opt)
    elapsed = time.perf_counter() - start
    first, last = log_a[0].recon_l2, log_a[-1].recon_l2
    identical = [r.as_row() for r in log_a] == [r.as_row() for r in log_b]
    ok = last < 0.5 * first and identical and elapsed < 1200
    detail = f"recon_l2 {first:.4f} -> {last:.4f} ({last / first:.2f}x); reruns identical={identical}; {elapsed:.0f}s for both"
    record(acceptance_log, 6, ok, detail)


def test_criterion_7_occlusion_benchmark(acceptance_log, occlusion_benchmark):
    results = occlusion_benchmark["results"]
    means = {m: s.mean_correlation for m, (_, s) in results.items()}
    sums = [abs(s.low + s.medium + s.high - 1.0) for _, s in results.values()]
    shared = len({s.n_valid for _, s in results.values()}) == 1
    ok = means["ml"] > means["persistence"] and max(sums) <= 1e-12 and shared
    detail = ", ".join(f"{m} {v:.3f}" for m, v in means.items()) + f"; max |fractions - 1| = {max(sums):.1e}"
    record(acceptance_log, 7, ok, detail)


def test_criterion_8_round_trip_and_replay(acceptance_log, tmp_path):
    rng = np.random.default_rng(8)
    identical = 0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 64, 2))
        mask = rng.random((h, w)) < rng.uniform(0, 0.5)
        r = Raster(rng.random((h, w)).astype(np.float32), mask, float(rng.uniform(0, 1e5)), float(rng.uniform(1, 100)))
        data = raster_to_bytes(r)
        back = read_raster(data)
        identical += back == r and raster_to_bytes(back) == data

    def run(*argv):
        return main([str(a) for a in argv])

    scene, model = tmp_path / "scene", tmp_path / "model"
    codes = [
        run("synth", "--seed", 11, "--frames", 8, "--size", 128, "--dx", 1.4, "--dy", -0.6, "--snr", 30, "--out", scene),
        run("train", "--synthetic", 8, "--epochs", 2, "--chip-size", 32, "--context", 4, "--horizon", 1, "--out", model),
    ]
    replays = {}
    for cmd, extra, files in (
        ("track", ["--chip-size", 32, "--min-score", 0.3], ["tracks.jsonl", "velocity.csv"]),
        ("eval", ["--models", "persistence,highpass,ml", "--checkpoint", model / "model.icew", "--lead", 1],
         ["summary.csv", "per_chip.jsonl", "map_persistence.pgm", "map_highpass.pgm", "map_ml.pgm"]),
    ):
        first, second = tmp_path / f"{cmd}_1", tmp_path / f"{cmd}_2"
        codes.append(run(cmd, "--input", scene, *extra, "--out", first))
        codes.append(run(cmd, "--config", first / "run.json", "--out", second))
        replays[cmd] = all((first / f).read_bytes() == (second / f).read_bytes() for f in files + ["run.json"])
        assert json.loads((first / "run.json").read_text())["subcommand"] == cmd
    ok = identical == 100 and all(c == 0 for c in codes) and all(replays.values())
    detail = f"ICEF round trip {identical}/100 identical; run.json replay track={replays['track']} eval={replays['eval']}"
    record(acceptance_log, 8, ok, detail)
