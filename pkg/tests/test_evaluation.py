import hashlib

import numpy as np
import pytest

from tavce.checkpoint import TrainConfig, checkpoint_bytes
from tavce.encoders import ModelDims, init_params
from tavce.errors import DimensionMismatchError
from tavce.evaluation import (
    EvalReport,
    binomial_band,
    evaluate,
    generate_frames,
    parse_report_binary,
    parse_report_text,
    reconstruction_from_frames,
    retrieval_accuracy,
    run_ablation,
    separation_stats,
)
from tavce.synthdata import GeneratorConfig, generate_dataset
from tavce.training import train_stage1, train_stage2

DATA = generate_dataset(GeneratorConfig(seed=2, num_sequences=4, T=12))
PARAMS = init_params(0, ModelDims())


@pytest.fixture(scope="module")
def ckpts():
    metric = train_stage1(DATA, TrainConfig(stage=1, iterations=2)).checkpoint
    gen = train_stage2(DATA, metric, TrainConfig(stage=2, iterations=2)).checkpoint
    return metric, gen


@pytest.mark.parametrize("tau", [0, 1, 2, 3])
def test_exhaustive_negative_counts(tau):
    rep = separation_stats(DATA, PARAMS, tau)
    per_seq = 0
    for i in range(1, 12):
        window = range(max(0, i - tau), min(12, i + tau + 1))
        per_seq += 12 - len(window)
    assert rep.num_neg == len(DATA) * per_seq
    assert rep.num_pos == len(DATA) * 11


def test_cosines_bounded_and_consistent():
    rep = separation_stats(DATA, PARAMS, 2)
    for arr in (rep.pos_cosines, rep.neg_cosines):
        assert np.all(np.abs(arr) <= 1.0 + 1e-6)
    assert rep.separation == pytest.approx(rep.mean_pos_cosine - rep.mean_neg_cosine)


def test_order_independence():
    a = separation_stats(DATA, PARAMS, 2)
    b = separation_stats(list(reversed(DATA)), PARAMS, 2)
    assert (a.mean_pos_cosine, a.mean_neg_cosine, a.num_neg) == (b.mean_pos_cosine, b.mean_neg_cosine, b.num_neg)
    assert retrieval_accuracy(DATA, PARAMS) == retrieval_accuracy(DATA[::-1], PARAMS)


def test_thread_count_does_not_change_results(monkeypatch):
    base = separation_stats(DATA, PARAMS, 2)
    monkeypatch.setenv("TAVCE_THREADS", "3")
    par = separation_stats(DATA, PARAMS, 2)
    assert base.pos_cosines.tobytes() == par.pos_cosines.tobytes()
    assert base.neg_cosines.tobytes() == par.neg_cosines.tobytes()


def test_chance_level():
    _, chance = retrieval_accuracy(generate_dataset(GeneratorConfig(num_sequences=1, T=32)), PARAMS)
    assert chance == 1 / 31


def test_ground_truth_frames_reproduce_positive_mean():
    generated = [s.frames[1:] for s in DATA]
    mse, psnr, tc, _ = reconstruction_from_frames(DATA, generated, PARAMS)
    assert mse == 0.0 and psnr == float("inf")
    assert tc == pytest.approx(separation_stats(DATA, PARAMS, 2).mean_pos_cosine, abs=1e-12)


def test_gray_prediction_mse_is_pixel_variance():
    target = np.concatenate([s.frames[1:] for s in DATA]).astype(np.float64)
    gray = target.mean()
    generated = [np.full_like(s.frames[1:], gray, dtype=np.float64) for s in DATA]
    mse, _, _, _ = reconstruction_from_frames(DATA, generated, PARAMS)
    assert mse == pytest.approx(target.var(), rel=1e-9)


def test_evaluation_does_not_mutate_checkpoints(ckpts):
    metric, gen = ckpts
    before = [hashlib.sha256(checkpoint_bytes(c)).hexdigest() for c in ckpts]
    evaluate(DATA, metric, gen, 2)
    after = [hashlib.sha256(checkpoint_bytes(c)).hexdigest() for c in ckpts]
    assert before == after


def test_generate_frames_shapes(ckpts):
    _, gen = ckpts
    frames = generate_frames(DATA[:1], gen.params(), True)
    assert frames[0].shape == (11, 1, 32, 32)


def test_report_text_and_binary_agree(ckpts):
    metric, gen = ckpts
    rep = evaluate(DATA, metric, gen, 2, config={"seed": 0})
    text = parse_report_text(rep.to_text())
    binary = parse_report_binary(rep.to_binary())
    assert text == binary
    assert set(text) >= {"separation", "retrieval_top1", "mse", "psnr", "temporal_consistency"}
    assert rep.to_text().startswith("# seed = 0\n")


def test_dimension_mismatch_on_eval():
    other = generate_dataset(GeneratorConfig(num_sequences=1, T=8, A_dim=32))
    with pytest.raises(DimensionMismatchError):
        separation_stats(other, PARAMS, 2)


def test_binomial_band():
    assert binomial_band(0.5, 100) == pytest.approx(0.15)


def test_ablation_grid_small(ckpts):
    metric, _ = ckpts
    grid = run_ablation(DATA, DATA, metric, TrainConfig(stage=2, iterations=2))
    assert len(grid.cells) == 4
    for cell in grid.cells:
        assert np.isfinite([cell.report.mse, cell.report.psnr, cell.report.temporal_consistency]).all()
    again = run_ablation(DATA, DATA, metric, TrainConfig(stage=2, iterations=2))
    assert grid.to_tsv() == again.to_tsv()
    assert grid.to_tsv().splitlines()[0].startswith("cerl\tcar\tmse")


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        separation_stats([], PARAMS, 2)


def test_report_without_reconstruction_omits_fields():
    rep = EvalReport(separation_stats(DATA, PARAMS, 2), 0.1, 0.09)
    assert "mse" not in parse_report_text(rep.to_text())
