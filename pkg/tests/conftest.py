import numpy as np
import pytest

from iceflow import evaluation as ev
from iceflow import svg
from iceflow.raster import synth_sequences

_ACCEPTANCE: list[str] = []

# occlusion benchmark: clouds over the last context frame of 30% of sequences
BENCH_CONTEXT = 4
BENCH_HORIZON = 2
BENCH_OCCLUSION = 0.3


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


@pytest.fixture(scope="session")
def occlusion_benchmark():
    """Model trained on partly clouded sequences, scored on a held-out set."""
    ctx, hor = BENCH_CONTEXT, BENCH_HORIZON
    train_seqs, _ = synth_sequences(128, 32, ctx + hor, seed=1, occlude_frame=ctx - 1, occlude_prob=BENCH_OCCLUSION)
    test_seqs, flags = synth_sequences(128, 32, ctx + hor, seed=2, occlude_frame=ctx - 1, occlude_prob=BENCH_OCCLUSION)
    cfg = svg.ModelConfig(chip_size=32, z_dim=8, context_len=ctx, horizon=hor)
    params, log = svg.train(train_seqs, cfg, svg.TrainConfig(epochs=60, seed=0))
    lead = hor
    pred = svg.predict_batch(test_seqs[:, :ctx], params, cfg, seed=5)[:, lead - 1]
    maps = ev.model_maps(test_seqs, np.ones(len(test_seqs), bool), ctx, lead, ml_predictions=pred)
    return dict(
        cfg=cfg,
        params=params,
        log=log,
        test=test_seqs,
        occluded=flags[:, ctx - 1],
        predictions=pred,
        lead=lead,
        results=ev.compare_maps(maps),
    )


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
