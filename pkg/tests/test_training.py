import csv

import numpy as np
import pytest

from chromapred.dataset import stack_blocks
from chromapred.model import SchemeId, build_spec, dumps_model, init_weights
from chromapred.training import (
    LOG_COLUMNS,
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    ae_loss,
    backward,
    evaluate_loss,
    mse_loss,
    split_validation,
    total_loss,
    train_multimodel,
)
from conftest import TINY, random_block
from gradcheck import gradient_errors, make_problem

SCHEMES = [("1", "default"), ("1", "baseline-nonlinear"), ("1", "single-layer"), ("2", "default"), ("2", "no-sparsity")]


# --- losses

def test_mse_examples():
    z = np.random.default_rng(0).random((2, 4, 4))
    assert mse_loss(z, z) == 0
    assert mse_loss(z + 0.1, z) == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(ValueError, match="shape"):
        mse_loss(z, z[:, :2])


def test_mse_matches_loop_oracle():
    rng = np.random.default_rng(1)
    p, z = rng.random((2, 4, 4)), rng.random((2, 4, 4))
    acc = 0.0
    for c in range(2):
        for y in range(4):
            for x in range(4):
                acc += (z[c, y, x] - p[c, y, x]) ** 2
    assert abs(mse_loss(p, z) - acc / 32) <= 1e-14


def test_ae_loss_examples():
    rng = np.random.default_rng(2)
    s1 = rng.random((32, 17))
    assert ae_loss(s1, s1, np.zeros((3, 17)), 1.0, 0.01) == 0
    assert ae_loss(s1, s1, np.ones((3, 17)), 1.0, 1.0) == pytest.approx(1.0)
    rec, s2 = rng.random((32, 17)), rng.normal(size=(3, 17))
    oracle = 0.7 / (32 * 17) * sum((a - b) ** 2 for a, b in zip(s1.ravel(), rec.ravel())) \
        + 0.2 / (3 * 17) * sum(abs(v) for v in s2.ravel())
    assert abs(ae_loss(s1, rec, s2, 0.7, 0.2) - oracle) <= 1e-14


def test_total_loss_examples():
    assert total_loss(1.0, 1.0, TrainConfig()) == 2.0
    assert total_loss(0.3, 5.0, TrainConfig(lambda_ae=0.0)) == 0.3
    assert total_loss(0.3, 0.5, TrainConfig(lambda_reg=2.0, lambda_ae=0.5)) == pytest.approx(0.85)


def test_scheme1_total_is_regression_loss():
    w, (x0, s0, z) = make_problem(SchemeId())
    loss = evaluate_loss(w, x0, s0, z, TrainConfig())
    assert loss.ae == 0 and loss.total == loss.reg >= 0


def test_no_sparsity_variant_ignores_lambda_s():
    w, (x0, s0, z) = make_problem(SchemeId.from_variant("2", "train", "no-sparsity"))
    a = evaluate_loss(w, x0, s0, z, TrainConfig(lambda_s=0.0)).total
    b = evaluate_loss(w, x0, s0, z, TrainConfig(lambda_s=5.0)).total
    assert a == b


@pytest.mark.parametrize("cfg", [dict(sizes=()), dict(sizes=(4, 32)), dict(lambda_s=-1.0), dict(validation_fraction=1.0)])
def test_train_config_validation(cfg):
    with pytest.raises(ValueError):
        TrainConfig(**cfg)


# --- gradients

@pytest.mark.parametrize("scheme,variant", SCHEMES)
def test_gradients_match_finite_differences(scheme, variant):
    errors = gradient_errors(SchemeId.from_variant(scheme, "train", variant))
    bad = {k: v for k, v in errors.items() if v > 1e-4}
    assert not bad, bad


def test_logit_projection_bias_gradient_is_zero():
    # the bias adds one constant per attention row, which the softmax cancels
    w, batch = make_problem(SchemeId())
    _, grads = backward(w, batch, TrainConfig())
    assert np.abs(grads["att_f"][1]).max() <= 1e-15


def test_zero_model_constant_target_head_bias_only():
    w = init_weights(build_spec(SchemeId(), TINY), 0)
    for layer in w.layers.values():
        layer.weights[:] = 0
    w.layers["head2"].bias[:] = 0.25
    rng = np.random.default_rng(0)
    batch = (rng.random((2, 1, 4, 4)), rng.random((2, 3, 17)), np.zeros((2, 2, 4, 4)))
    _, grads = backward(w, batch, TrainConfig())
    # loss = mean over both channels of 0.25^2; each channel's bias owns half the samples
    assert np.allclose(grads["head2"][1], 2 * 0.25 / 2)
    assert all(np.all(g[0] == 0) for k, g in grads.items() if k != "head2")


def test_duplicated_batch_same_gradient():
    w, (x0, s0, z) = make_problem(SchemeId.from_variant("2"))
    cfg = TrainConfig()
    _, g1 = backward(w, (x0, s0, z), cfg)
    _, g2 = backward(w, tuple(np.concatenate([a, a]) for a in (x0, s0, z)), cfg)
    for k in g1:
        assert np.allclose(g1[k][0], g2[k][0], atol=1e-14) and np.allclose(g1[k][1], g2[k][1], atol=1e-14)


def test_non_finite_loss_names_layer():
    w, batch = make_problem(SchemeId())
    w.layers["luma2"].weights[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="luma2"):
        backward(w, batch, TrainConfig())


# --- optimiser

def test_adam_zero_gradient_leaves_weights():
    w = init_weights(build_spec(SchemeId(), TINY), 0)
    before = [a.copy() for _, a in w.arrays()]
    grads = {k: (np.zeros_like(l.weights), np.zeros_like(l.bias)) for k, l in w.layers.items()}
    adam_step(w, grads, AdamState(), TrainConfig())
    assert all(np.array_equal(a, b) for a, (_, b) in zip(before, w.arrays()))


def test_adam_first_step_by_hand():
    w = init_weights(build_spec(SchemeId(), TINY), 0)
    cfg = TrainConfig(learning_rate=1e-3)
    w0 = w.layers["head2"].bias.copy()
    grads = {"head2": (np.zeros_like(w.layers["head2"].weights), np.ones(2))}
    state = adam_step(w, grads, AdamState(), cfg)[1]
    # m_hat = 1, v_hat = 1 after bias correction
    assert np.allclose(w.layers["head2"].bias, w0 - 1e-3 * 1 / (1 + 1e-8), atol=1e-18)
    assert state.t == 1


# --- loop

def small_set(n_per_size=6, seed=0):
    rng = np.random.default_rng(seed)
    return [random_block(rng, n) for n in (4, 8, 16) for _ in range(n_per_size)]


def test_one_batch_gives_three_steps_per_epoch():
    cfg = TrainConfig(epochs=2, batch_size=32, validation_fraction=0.0)
    w = train_multimodel(small_set(), cfg, SchemeId(), widths=TINY)
    assert w.metadata["steps"] == 6


def test_sizes_stepped_in_ascending_order(monkeypatch):
    import chromapred.training as tr

    seen = []
    real = tr.backward

    def spy(w, batch, cfg):
        seen.append(batch[0].n)
        return real(w, batch, cfg)

    monkeypatch.setattr(tr, "backward", spy)
    cfg = TrainConfig(epochs=1, batch_size=2, validation_fraction=0.0)
    tr.train_multimodel(small_set(4), cfg, SchemeId(), widths=TINY)
    assert seen == [4, 8, 16, 4, 8, 16]


def test_epoch_touches_every_sample_once(monkeypatch):
    import chromapred.training as tr

    seen = []
    real = tr.backward

    def spy(w, batch, cfg):
        seen.extend(id(b) for b in batch)
        return real(w, batch, cfg)

    monkeypatch.setattr(tr, "backward", spy)
    data = small_set(7)
    tr.train_multimodel(data, TrainConfig(epochs=1, batch_size=3, validation_fraction=0.0), SchemeId(), widths=TINY)
    assert sorted(seen) == sorted(id(b) for b in data)


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
    a = train_multimodel(small_set(), cfg, SchemeId.from_variant("2"), widths=TINY)
    b = train_multimodel(small_set(), cfg, SchemeId.from_variant("2"), widths=TINY)
    assert dumps_model(a) == dumps_model(b)


def test_log_and_checkpoint(tmp_path):
    log, ckpt = tmp_path / "train.csv", tmp_path / "ckpt.json"
    cfg = TrainConfig(epochs=2, batch_size=4)
    train_multimodel(small_set(), cfg, SchemeId(), log_path=log, checkpoint=ckpt, widths=TINY)
    rows = list(csv.reader(log.open()))
    assert rows[0] == LOG_COLUMNS
    assert len(rows) == 1 + 3 * 3  # epoch 0 plus two epochs, one row per size
    assert rows[1][3] == "" and float(rows[-1][5]) > 0
    assert ckpt.exists()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train_multimodel([], TrainConfig(), SchemeId())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_good(tmp_path):
    cfg = TrainConfig(epochs=1, learning_rate=1e300, batch_size=2, validation_fraction=0.0)
    ckpt = tmp_path / "last.json"
    with pytest.raises(TrainingDiverged) as info:
        train_multimodel(small_set(4), cfg, SchemeId(), checkpoint=ckpt, widths=TINY)
    assert ckpt.exists()
    assert all(np.all(np.isfinite(a)) for _, a in info.value.last_good.arrays())


def test_validation_split_per_size():
    train, val = split_validation(small_set(10), 0.1)
    assert all(len(val[n]) == 1 and len(train[n]) == 9 for n in (4, 8, 16))


def test_overfit_eight_blocks():
    rng = np.random.default_rng(7)
    blocks = [random_block(rng, 4) for _ in range(8)]
    x0, s0, z = stack_blocks(blocks)
    cfg = TrainConfig(epochs=500, batch_size=8, learning_rate=1e-3, sizes=(4,), validation_fraction=0.0)
    init = init_weights(build_spec(SchemeId()), 0)
    before = evaluate_loss(init, x0, s0, z, cfg).reg
    w = train_multimodel(blocks, cfg, SchemeId(), init=init)
    after = evaluate_loss(w, x0, s0, z, cfg).reg
    assert after < 0.1 * before
