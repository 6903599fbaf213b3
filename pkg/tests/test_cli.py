import csv
import json

import numpy as np
import pytest

from iceflow.cli import main
from iceflow.raster import read_pgm, read_raster


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert run("synth", "--seed", 7, "--frames", 12, "--size", 512, "--dx", 3, "--dy", -2, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    assert run("synth", "--seed", 3, "--frames", 6, "--size", 96, "--dx", 1, "--dy", 1, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def small_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    code = run("train", "--synthetic", 8, "--epochs", 2, "--chip-size", 16, "--context", 4, "--horizon", 1,
               "--g-dim", 8, "--rnn-units", 8, "--z-dim", 2, "--out", out)
    assert code == 0
    return out


def test_synth_outputs_are_deterministic(scene, tmp_path):
    assert run("synth", "--seed", 7, "--frames", 12, "--size", 512, "--dx", 3, "--dy", -2, "--out", tmp_path) == 0
    names = sorted(p.name for p in scene.iterdir())
    assert "manifest.json" in names and "truth.json" in names and "run.json" in names
    assert len([n for n in names if n.endswith(".icef")]) == 12
    for name in names:
        assert (scene / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_synth_truth_sign_convention(scene):
    truth = json.loads((scene / "truth.json").read_text())
    assert truth["displacements"][1] == [-2, 3]


def test_track_recovers_truth(scene, tmp_path, capsys):
    assert run("track", "--input", scene, "--truth", scene / "truth.json", "--out", tmp_path) == 0
    check = json.loads((tmp_path / "truth_check.json").read_text())
    assert check["mismatches"] == 0 and check["checked_steps"] > 50
    assert "mismatches: 0 of" in capsys.readouterr().out
    steps = [json.loads(line) for line in open(tmp_path / "tracks.jsonl")]
    interior = [s for s in steps if s["j"] == 5]
    assert all((s["drow"], s["dcol"]) == (-2, 3) for s in interior)
    rows = list(csv.DictReader(open(tmp_path / "velocity.csv")))
    v = next(r for r in rows if r["j"] == "5")
    assert float(v["speed_m_per_day"]) == pytest.approx(np.hypot(3, 2) * 30 / 16)


def test_track_replay_from_run_json(small_scene, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("track", "--input", small_scene, "--chip-size", 32, "--min-score", 0.2, "--out", a) == 0
    assert run("track", "--config", a / "run.json", "--out", b) == 0
    for name in ("tracks.jsonl", "velocity.csv", "run.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    resolved = json.loads((a / "run.json").read_text())
    assert resolved["subcommand"] == "track" and resolved["args"]["min_score"] == 0.2


def test_flags_override_config(small_scene, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"input": str(small_scene), "chip_size": 32, "min_score": 0.1}))
    assert run("track", "--config", cfg, "--min-score", 0.4, "--out", tmp_path / "o") == 0
    args = json.loads((tmp_path / "o" / "run.json").read_text())["args"]
    assert args["min_score"] == 0.4 and args["chip_size"] == 32


def test_chip_index(small_scene, tmp_path):
    assert run("chip", "--input", small_scene, "--chip-size", 32, "--out", tmp_path) == 0
    index = json.loads((tmp_path / "index.json").read_text())
    assert len(index) == 6 * 9


def test_baselines(small_scene, tmp_path):
    for model in ("persistence", "highpass"):
        out = tmp_path / model
        assert run("baseline", "--input", small_scene, "--model", model, "--chip-size", 32, "--context", 4, "--out", out) == 0
        preds = np.load(out / "predictions.npz")
        assert len(preds.files) == 9
        chip = read_raster(out / "pred" / f"{preds.files[0]}.icef")
        assert chip.shape == (32, 32)
    hp = np.load(tmp_path / "highpass" / "predictions.npz")
    assert set(np.unique(hp[hp.files[0]])) <= {0.0, 1.0}


def test_train_outputs(small_model):
    lines = (small_model / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,recon_l2,peak_l2,kl,total" and len(lines) == 3
    assert (small_model / "model.icew").read_bytes()[:4] == b"ICEW"
    cfg = json.loads((small_model / "model.json").read_text())
    assert cfg["chip_size"] == 16 and cfg["context_len"] == 4


def test_predict(small_model, tmp_path):
    scene = tmp_path / "s"
    assert run("synth", "--seed", 1, "--frames", 4, "--size", 48, "--out", scene) == 0
    out = tmp_path / "p"
    assert run("predict", "--input", scene, "--checkpoint", small_model / "model.icew", "--samples", 2, "--out", out) == 0
    preds = np.load(out / "predictions.npz")
    assert len(preds.files) == 9 * 2
    assert all(0 < preds[k].min() and preds[k].max() < 1 for k in preds.files)


def test_eval_three_models(small_model, tmp_path, capsys):
    scene = tmp_path / "s"
    assert run("synth", "--seed", 2, "--frames", 6, "--size", 64, "--dx", 1, "--out", scene) == 0
    out = tmp_path / "e"
    code = run("eval", "--input", scene, "--models", "persistence,highpass,ml",
               "--checkpoint", small_model / "model.icew", "--lead", 1, "--out", out)
    assert code == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["model"] for r in rows] == ["persistence", "highpass", "ml"]
    for r in rows:
        assert abs(float(r["low"]) + float(r["medium"]) + float(r["high"]) - 1) <= 1e-12
    assert len({r["n_valid"] for r in rows}) == 1
    assert read_pgm(out / "map_ml.pgm").shape == (4, 4)
    assert "Correlation  Mean" in capsys.readouterr().out
    replay = tmp_path / "r"
    assert run("eval", "--config", out / "run.json", "--out", replay) == 0
    for name in ("summary.csv", "per_chip.jsonl", "map_ml.pgm"):
        assert (out / name).read_bytes() == (replay / name).read_bytes()


def test_bench(tmp_path):
    assert run("bench", "--sizes", "32,48", "--repeats", 1, "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert [r["search_size"] for r in rows] == ["32", "48"]
    assert all(float(r["max_abs_diff"]) < 1e-6 for r in rows)


def test_usage_errors(tmp_path, capsys):
    assert run() == 1
    assert run("track", "--bogus", "--out", tmp_path) == 1
    assert run("track", "--out", tmp_path) == 1
    assert run("synth") == 1
    assert run("eval", "--models", "oracle", "--input", tmp_path, "--out", tmp_path) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("track", "--config", bad, "--out", tmp_path) == 1
    bad.write_text(json.dumps({"scale_factor": 1.5, "colour": "blue"}))
    assert run("track", "--config", bad, "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "colour" in err
    assert all(line.count("\n") == 0 for line in err.strip().splitlines())


def test_data_errors(tmp_path, small_scene):
    assert run("track", "--input", tmp_path / "missing", "--out", tmp_path) == 2
    broken = tmp_path / "broken"
    broken.mkdir()
    manifest = json.loads((small_scene / "manifest.json").read_text())
    (broken / "manifest.json").write_text(json.dumps(manifest))
    for f in small_scene.glob("*.icef"):
        (broken / f.name).write_bytes(b"JUNK" + f.read_bytes()[4:])
    assert run("track", "--input", broken, "--out", tmp_path / "o") == 2
    assert run("eval", "--input", small_scene, "--models", "ml", "--checkpoint", tmp_path / "nope.icew", "--out", tmp_path / "e") == 2


def test_threads_env_does_not_change_output(small_scene, tmp_path, monkeypatch):
    assert run("track", "--input", small_scene, "--chip-size", 32, "--out", tmp_path / "one") == 0
    monkeypatch.setenv("ICEFLOW_THREADS", "4")
    assert run("track", "--input", small_scene, "--chip-size", 32, "--out", tmp_path / "four") == 0
    assert (tmp_path / "one" / "tracks.jsonl").read_bytes() == (tmp_path / "four" / "tracks.jsonl").read_bytes()
