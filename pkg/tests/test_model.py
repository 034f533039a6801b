import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chromapred.model import (
    FORMAT_VERSION,
    BlockInput,
    ModelFormatError,
    SchemeId,
    build_spec,
    count_flops,
    count_params,
    dumps_model,
    extract_reference_array,
    forward,
    forward_batch,
    fuse_model,
    init_weights,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
)


def sid(scheme="1", phase="train", variant="default"):
    return SchemeId.from_variant(scheme, phase, variant)


def channel_seq(spec, branch):
    layers = spec.branch(branch)
    return [layers[0].in_ch] + [l.out_ch for l in layers]


# --- specs and counts

def test_scheme1_train_layer_list():
    spec = build_spec(sid())
    assert channel_seq(spec, "cc") == [3, 32, 32]
    assert channel_seq(spec, "luma") == [1, 64, 64]
    assert channel_seq(spec, "head") == [32, 32, 2]
    assert [spec.layer(n).k for n in ("luma1", "luma2", "head1", "head2")] == [3, 3, 3, 1]
    assert [(spec.layer(n).in_ch, spec.layer(n).out_ch) for n in ("att_f", "att_g", "att_x")] == [
        (32, 16), (64, 16), (64, 32)]
    assert spec.temperature == 0.5


def test_scheme1_inference_layers():
    spec = build_spec(sid(phase="inference"))
    (luma,), (head,) = spec.branch("luma"), spec.branch("head")
    assert (luma.k, luma.in_ch, luma.out_ch) == (5, 1, 64)
    assert (head.k, head.in_ch, head.out_ch) == (3, 32, 2)


def test_scheme2_keeps_encoder_drops_decoder():
    train, inf = build_spec(sid("2")), build_spec(sid("2", "inference"))
    assert channel_seq(train, "cc") == [3, 32, 3] and channel_seq(inf, "cc") == [3, 32, 3]
    assert train.has_decoder and not inf.has_decoder
    assert all(l.activation == "leaky_relu" and l.alpha == 0.2 for l in inf.branch("cc"))
    assert inf.layer("att_x").out_ch == 3 and channel_seq(train, "head") == [3, 3, 2]


def test_param_counts():
    assert count_params(build_spec(sid())) == 51714
    assert count_params(build_spec(sid(phase="inference"))) == 7074
    assert count_params(build_spec(sid("2", "inference"))) == 3710
    spec = build_spec(sid())
    assert sum(l.n_params for l in spec.branch("luma") + spec.branch("head")) == 46882
    s2 = build_spec(sid("2"))
    assert count_params(s2) == 39778
    assert count_params(s2) - sum(l.n_params for l in s2.branch("decoder")) == 39650


def test_variant_param_counts():
    assert count_params(build_spec(sid(variant="baseline-nonlinear"))) == 51714
    assert count_params(build_spec(sid(variant="single-layer"))) == 7074
    assert count_params(build_spec(sid("2", variant="no-sparsity"))) == 39778


@pytest.mark.parametrize("kwargs", [
    dict(scheme="scheme3"), dict(phase="deploy"),
    dict(baseline_nonlinear_luma=True, single_layer_luma=True),
    dict(scheme="scheme2", single_layer_luma=True), dict(sparsity_enabled=False),
])
def test_unknown_combinations_rejected(kwargs):
    with pytest.raises(ValueError):
        SchemeId(**kwargs)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError, match="unknown variant"):
        SchemeId.from_variant("1", "train", "tiny")


def test_flop_convention_unit():
    # 1x1 conv 3 -> 32 over b=17 positions
    assert 2 * 1 * 3 * 32 * 17 == 3264
    spec = build_spec(sid())
    cc_only = sum(2 * l.in_ch * l.out_ch * 17 for l in spec.branch("cc"))
    assert cc_only == 3264 + 2 * 32 * 32 * 17


FLOPS = {  # golden values of the package's counting convention, N = 4, 8, 16
    ("1", "train"): [1699344, 6735872, 27464640],
    ("1", "inference"): [250896, 992768, 4579776],
    ("2", "train"): [1301712, 5144192, 20734272],
    ("2", "inference"): [127472, 504640, 2276480],
}


@pytest.mark.parametrize("key", list(FLOPS))
def test_flop_golden_values(key):
    spec = build_spec(sid(*key))
    assert [count_flops(spec, n) for n in (4, 8, 16)] == FLOPS[key]


def test_flop_ordering():
    for n in (4, 8, 16):
        s2i, s1i, s1t = (count_flops(build_spec(sid(*k)), n) for k in (("2", "inference"), ("1", "inference"), ("1", "train")))
        assert s2i < s1i < s1t


def test_flop_hand_sum_scheme1_inference_n8():
    n, b = 8, 33
    luma = 2 * 25 * 1 * 64 * n * n  # pad-once grid: one 5x5 pass yields N x N
    head = 2 * 9 * 32 * 2 * n * n
    cc = 2 * (3 * 32 + 32 * 32) * b
    att = 2 * 32 * 16 * b + 2 * (64 * 16 + 64 * 32) * n * n + 2 * 16 * n * n * b + 2 * n * n * b * 32 + 5 * n * n * b
    assert count_flops(build_spec(sid(phase="inference")), n) == luma + head + cc + att


# --- reference extraction

@pytest.mark.parametrize("n", [4, 8, 16])
def test_boundary_width(n):
    plane = np.random.default_rng(0).random((40, 40))
    assert extract_reference_array(plane, plane, plane, (20, 20), n).shape == (3, 4 * n + 1)


def test_block_at_origin_all_missing():
    plane = np.random.default_rng(0).random((16, 16))
    assert np.all(extract_reference_array(plane, plane, plane, (0, 0), 4) == 0.5)


def test_ramp_plane_ordering():
    w = 32
    plane = np.arange(32 * w, dtype=np.float64).reshape(32, w)
    s = extract_reference_array(plane, plane, plane, (8, 8), 4)
    expected = [plane[y, 7] for y in range(15, 7, -1)] + [plane[7, 7]] + [plane[7, x] for x in range(8, 16)]
    assert np.array_equal(s[0], expected) and np.array_equal(s[2], expected)


def test_partial_availability_and_mask():
    plane = np.ones((20, 20))
    avail = np.ones(17, dtype=bool)
    avail[:3] = False
    s, mask = extract_reference_array(plane, plane, plane, (4, 4), 4, availability=avail, return_mask=True)
    assert np.all(s[:, :3] == 0.5) and np.all(s[:, 3:] == 1.0) and not mask[:3].any()


def test_block_outside_plane():
    plane = np.zeros((10, 10))
    with pytest.raises(ValueError, match="outside"):
        extract_reference_array(plane, plane, plane, (8, 8), 4)


def test_block_input_validation():
    with pytest.raises(ValueError):
        BlockInput(np.zeros((1, 5, 5)), np.zeros((3, 21)))
    with pytest.raises(ValueError):
        BlockInput(np.zeros((1, 4, 4)), np.zeros((3, 16)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        BlockInput(np.full((1, 4, 4), 1.5), np.zeros((3, 17)))


# --- forward

@pytest.mark.parametrize("scheme", ["1", "2"])
@pytest.mark.parametrize("n", [4, 8, 16])
def test_forward_shapes_and_attention_rows(scheme, n):
    rng = np.random.default_rng(n)
    w = init_weights(build_spec(sid(scheme)), 1)
    pred, a = forward(w, BlockInput(rng.random((1, n, n)), rng.random((3, 4 * n + 1))))
    assert pred.shape == (2, n, n) and a.shape == (n * n, 4 * n + 1)
    assert np.all(np.abs(a.sum(axis=1) - 1) <= 1e-9) and a.min() >= 0
    assert 0 <= pred.min() and pred.max() <= 1


def test_identical_boundary_columns_give_constant_attended_features():
    rng = np.random.default_rng(3)
    w = init_weights(build_spec(sid()), 2)
    s0 = np.repeat(rng.random((1, 3, 1)), 33, axis=2)
    cache = {}
    forward_batch(w, rng.random((1, 1, 8, 8)), s0, cache)
    s_col = cache["s_content"][0, :, 0]
    assert np.allclose(cache["attended"][0], s_col[:, None], atol=1e-12)


@pytest.mark.parametrize("scheme,variant", [("1", "default"), ("2", "default"), ("2", "no-sparsity"),
                                            ("1", "baseline-nonlinear"), ("1", "single-layer")])
def test_fused_equals_train_forward(scheme, variant):
    rng = np.random.default_rng(4)
    w = init_weights(build_spec(sid(scheme, "train", variant)), 3)
    for layer in w.layers.values():
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    fw = fuse_model(w)
    assert fw.spec.phase == "inference" and not fw.spec.has_decoder
    for n in (4, 8, 16):
        x0, s0 = rng.random((3, 1, n, n)), rng.random((3, 3, 4 * n + 1))
        c1, c2 = {}, {}
        forward_batch(w, x0, s0, c1)
        forward_batch(fw, x0, s0, c2)
        assert np.max(np.abs(c1["raw"] - c2["raw"])) <= 1e-10


def test_one_weight_set_serves_all_sizes():
    w = init_weights(build_spec(sid()), 0)
    before = {k: v.weights.copy() for k, v in w.layers.items()}
    for n in (4, 8, 16):
        forward_batch(w, np.full((1, 1, n, n), 0.3), np.full((1, 3, 4 * n + 1), 0.6))
    assert all(np.array_equal(before[k], w.layers[k].weights) for k in before)


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    w = init_weights(build_spec(sid("2")), 9)
    x0, s0 = rng.random((2, 1, 8, 8)), rng.random((2, 3, 33))
    assert forward_batch(w, x0, s0)[0].tobytes() == forward_batch(w, x0, s0)[0].tobytes()


def test_forward_rejects_bad_boundary():
    w = init_weights(build_spec(sid()), 0)
    with pytest.raises(ValueError):
        forward_batch(w, np.zeros((1, 1, 4, 4)), np.zeros((1, 3, 33)))


# --- init and files

def test_init_deterministic_glorot():
    a, b = init_weights(build_spec(sid()), 42), init_weights(build_spec(sid()), 42)
    for (na, xa), (_, xb) in zip(a.arrays(), b.arrays()):
        assert np.array_equal(xa, xb), na
    luma2 = a.layers["luma2"].weights
    bound = np.sqrt(6 / (64 * 9 * 2))
    assert np.abs(luma2).max() <= bound and np.abs(luma2).max() > 0.9 * bound
    assert all(np.all(l.bias == 0) for l in a.layers.values())
    assert a.n_params == 51714


def test_model_file_round_trip(tmp_path):
    w = init_weights(build_spec(sid("2")), 7)
    path = tmp_path / "m.json"
    save_model(w, path)
    again = load_model(path)
    assert dumps_model(again) == path.read_text()
    for (_, x), (_, y) in zip(w.arrays(), again.arrays()):
        assert np.array_equal(x, y)


def test_model_file_version_mismatch():
    doc = model_to_dict(init_weights(build_spec(sid()), 0))
    doc["format_version"] = FORMAT_VERSION + 1
    with pytest.raises(ModelFormatError, match="version"):
        model_from_dict(doc)


def test_model_file_wrong_weight_count():
    doc = json.loads(dumps_model(init_weights(build_spec(sid()), 0)))
    doc["layers"][0]["weights"].pop()
    with pytest.raises(ModelFormatError, match="cc1"):
        model_from_dict(doc)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_round_trip_preserves_arbitrary_floats(seed):
    w = init_weights(build_spec(sid(phase="inference")), 0)
    rng = np.random.default_rng(seed)
    for layer in w.layers.values():
        layer.weights[...] = rng.normal(scale=10.0 ** rng.integers(-8, 8), size=layer.weights.shape)
    again = model_from_dict(json.loads(dumps_model(w)))
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(w.arrays(), again.arrays()))
