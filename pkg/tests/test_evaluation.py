from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chromapred.evaluation import (
    SATURATED_DB,
    EvalReport,
    Histogram,
    chroma_gini,
    evaluate_model,
    gini,
    log_histogram,
    predict_blocks,
    psnr,
)
from chromapred.integerize import quantize_model
from chromapred.model import SchemeId, build_spec, fuse_model, init_weights

from conftest import TINY, random_block


def test_gini_examples():
    assert gini(np.array([1, 1, 1, 1])) == pytest.approx(0.75)
    assert gini(np.array([0, 5, 0])) == pytest.approx(0.0)
    assert gini(np.array([3, 1])) == pytest.approx(0.375)


def test_gini_rejects_empty_histogram():
    with pytest.raises(ValueError):
        gini(np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.integers(1, 64), elements=st.integers(0, 1000)))
def test_gini_bounds(counts):
    if counts.sum() == 0:
        return
    g = gini(counts)
    assert -1e-12 <= g <= 1 - 1 / len(counts) + 1e-12


def test_psnr_examples():
    gt = np.zeros((2, 4, 4))
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)
    assert psnr(gt, gt) == SATURATED_DB
    assert psnr(gt + 0.1 * 255, gt, peak=255.0) == pytest.approx(20.0)


def test_psnr_falls_as_noise_grows():
    rng = np.random.default_rng(0)
    gt = rng.random((2, 16, 16))
    noise = rng.normal(size=gt.shape)
    values = [psnr(gt + s * noise, gt) for s in (0.001, 0.01, 0.05, 0.2)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_histogram_counts_and_log():
    h = log_histogram(np.array([0.0, 0.0, 0.5, 1.0]), bins=4)
    assert h.counts.tolist() == [2, 0, 1, 1]
    assert np.allclose(h.log_counts(), np.log10(1 + np.array([2, 0, 1, 1])))
    assert h.bins == 4


def test_histogram_clips_out_of_range():
    h = log_histogram(np.array([-0.5, 1.5]), bins=8)
    assert h.counts[0] == 1 and h.counts[-1] == 1


def test_uniform_noise_histogram_is_flat():
    rng = np.random.default_rng(1)
    n, bins = 10 ** 6, 64
    h = log_histogram(rng.random(n), bins)
    expected = n / bins
    sigma = np.sqrt(n * (1 / bins) * (1 - 1 / bins))
    assert np.all(np.abs(h.counts - expected) <= 5 * sigma)
    assert gini(h) == pytest.approx(1 - 1 / bins, abs=1e-4)


def test_chroma_gini_constant_planes():
    cb = np.full((8, 8), 0.5)
    assert chroma_gini(cb, cb) == (0.0, 0.0)


def test_histogram_wraps_counts():
    assert gini(Histogram(np.array([1, 1]))) == pytest.approx(0.5)


# --------------------------------------------------------------------------
# reports

@pytest.fixture(scope="module")
def blocks():
    rng = np.random.default_rng(2)
    return [random_block(rng, n) for n in (4, 8, 16) for _ in range(5)]


def test_perfect_predictor_saturates(blocks):
    rep = evaluate_model(lambda b: b.Z, blocks, "oracle")
    assert all(r.psnr_db == SATURATED_DB for r in rep.rows)
    assert rep.scheme == "external"


def test_mid_grey_on_mid_grey_content():
    rng = np.random.default_rng(3)
    bl = random_block(rng, 8, bitdepth=10)
    bl.z[:] = 512
    rep = evaluate_model(512 / 1023, [bl], "grey")
    assert rep.rows[0].psnr_db == SATURATED_DB
    assert rep.scheme == "constant"


def test_report_rows_per_size(blocks):
    w = fuse_model(init_weights(build_spec(SchemeId(), TINY), 0))
    rep = evaluate_model(w, blocks, "tiny")
    assert [r.size for r in rep.rows] == [4, 8, 16]
    assert all(r.n_blocks == 5 for r in rep.rows)
    assert all(r.flops > 0 for r in rep.rows)
    assert rep.phase == "inference" and rep.params == w.n_params


def test_csv_round_trip(blocks):
    rep = evaluate_model(0.5, blocks, "grey")
    back = EvalReport.from_csv(rep.to_csv())
    assert back == rep


def test_predict_blocks_keeps_input_order(blocks):
    w = fuse_model(init_weights(build_spec(SchemeId(), TINY), 0))
    shuffled = blocks[::-1]
    preds = predict_blocks(w, shuffled)
    assert [p.shape[-1] for p in preds] == [b.n for b in shuffled]


def test_integer_report_close_to_float(trained_scheme1, corpus_blocks):
    fused = fuse_model(trained_scheme1)
    qm = quantize_model(fused)
    sample = corpus_blocks[::10]
    f = evaluate_model(fused, sample).psnr_by_size()
    i = evaluate_model(qm, sample).psnr_by_size()
    for n in f:
        assert abs(f[n] - i[n]) <= 0.5, (n, f[n], i[n])
