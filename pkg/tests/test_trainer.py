"""Training loop: batching, the optimizer, checkpoints, determinism, and the
ablation switches."""

import json

import numpy as np
import pytest

from gatefuse import model, trainer
from gatefuse.data import DataError
from gatefuse.engine import NumericError
from gatefuse.model import ModalityBundle, TokenFeatureMatrix
from gatefuse.trainer import (AdamState, Checkpoint, DivergenceError,
                              TrainConfig, load_checkpoint, make_batches,
                              optimizer_step, save_checkpoint, train)
from gatefuse.weighting import LossWeightState
from helpers import (params_equal, tiny_loss_cfg, tiny_model_cfg,
                     tiny_records, tiny_train_cfg)


# ---------------------------------------------------------------------------
# batching

def test_batch_sizes_with_small_tail():
    batches = make_batches(10, 4, seed=0, epoch=0)
    assert [len(b) for b in batches] == [4, 4, 2]
    seen = np.sort(np.concatenate(batches))
    np.testing.assert_array_equal(seen, np.arange(10))


def test_tail_of_one_is_dropped():
    batches = make_batches(9, 4, seed=0, epoch=0)
    assert [len(b) for b in batches] == [4, 4]


def test_same_seed_epoch_is_identical():
    a = make_batches(50, 8, seed=3, epoch=2)
    b = make_batches(50, 8, seed=3, epoch=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_different_seeds_differ():
    a = np.concatenate(make_batches(100, 10, seed=0, epoch=0))
    b = np.concatenate(make_batches(100, 10, seed=1, epoch=0))
    assert not np.array_equal(a, b)


def test_different_epochs_differ():
    a = np.concatenate(make_batches(100, 10, seed=0, epoch=0))
    b = np.concatenate(make_batches(100, 10, seed=0, epoch=1))
    assert not np.array_equal(a, b)


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        make_batches(0, 4, seed=0, epoch=0)


# ---------------------------------------------------------------------------
# optimizer

def test_zero_gradient_keeps_parameters():
    params = {"w": np.ones((2, 2))}
    grads = {"w": np.zeros((2, 2))}
    cfg = tiny_train_cfg(learning_rate=0.1, weight_decay=0.0)
    optimizer_step(params, grads, AdamState(), cfg, t=1)
    np.testing.assert_array_equal(params["w"], np.ones((2, 2)))


def test_first_step_hand_value():
    # p=1, g=1, lr=0.1, no decay: bias-corrected update is lr*g/(|g|+eps)
    params = {"p": np.array([1.0])}
    grads = {"p": np.array([1.0])}
    cfg = tiny_train_cfg(learning_rate=0.1, weight_decay=0.0)
    optimizer_step(params, grads, AdamState(), cfg, t=1)
    assert params["p"][0] == pytest.approx(0.9, abs=1e-8)


def test_decoupled_weight_decay_applied_before_update():
    params = {"p": np.array([2.0])}
    grads = {"p": np.array([0.0])}
    cfg = tiny_train_cfg(learning_rate=0.1, weight_decay=0.5)
    optimizer_step(params, grads, AdamState(), cfg, t=1)
    assert params["p"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-12)


def test_non_finite_gradient_names_parameter():
    params = {"good": np.ones(2), "bad": np.ones(2)}
    grads = {"good": np.ones(2), "bad": np.array([1.0, np.nan])}
    with pytest.raises(NumericError, match="bad"):
        optimizer_step(params, grads, AdamState(), tiny_train_cfg(), t=1)


def test_optimizer_deterministic():
    rng = np.random.default_rng(0)
    base = {"w": rng.standard_normal((3, 3))}
    cfg = tiny_train_cfg(learning_rate=0.01, weight_decay=0.01)

    def run():
        params = {k: v.copy() for k, v in base.items()}
        moments = AdamState()
        g_rng = np.random.default_rng(1)
        for t in range(1, 101):
            grads = {"w": g_rng.standard_normal((3, 3))}
            optimizer_step(params, grads, moments, cfg, t=t)
        return params["w"]

    np.testing.assert_array_equal(run(), run())


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_bitwise(tmp_path):
    records = tiny_records()
    cfg = tiny_model_cfg()
    ckpt, _ = train(records, cfg, tiny_loss_cfg(), tiny_train_cfg(steps=3),
                    config_hash="abc123", config={"model.width": 8})
    path = tmp_path / "ckpt.bin"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert params_equal(ckpt.params, back.params)
    assert params_equal(ckpt.moments.m, back.moments.m)
    assert params_equal(ckpt.moments.v, back.moments.v)
    np.testing.assert_array_equal(ckpt.weight_state.lambdas,
                                  back.weight_state.lambdas)
    assert back.step == ckpt.step and back.config_hash == "abc123"

    bundle = records[0].bundle("trigger")
    a = model.encode(ckpt.params, bundle, cfg)
    b = model.encode(back.params, bundle, cfg)
    np.testing.assert_array_equal(a.f, b.f)


def test_checkpoint_truncation_rejected(tmp_path):
    ckpt, _ = train(tiny_records(), tiny_model_cfg(), tiny_loss_cfg(),
                    tiny_train_cfg(steps=1))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(ckpt, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 100])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "ckpt.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DataError, match="not a checkpoint"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# the loop

def test_two_runs_are_bitwise_identical():
    records = tiny_records()

    def run():
        return train(records, tiny_model_cfg(), tiny_loss_cfg(),
                     tiny_train_cfg(steps=6))

    ck1, m1 = run()
    ck2, m2 = run()
    assert params_equal(ck1.params, ck2.params)
    assert json.dumps(m1) == json.dumps(m2)


def test_metrics_log_structure_and_recurrence():
    cfg = tiny_train_cfg(steps=8)
    _, metrics = train(tiny_records(), tiny_model_cfg(), tiny_loss_cfg(), cfg)
    assert len(metrics) == 8
    prev_sum = 6.0
    for i, line in enumerate(metrics):
        assert line["step"] == i
        assert set(line["losses"]) == {"v2t", "pml", "pdc", "plc", "v2v", "t2t"}
        lam = np.array(line["lambdas"])
        assert np.all(lam > 0)
        want = cfg.weighting_beta + (1 - cfg.weighting_beta) * prev_sum
        assert abs(lam.sum() - want) <= 1e-12
        prev_sum = lam.sum()


def test_fixed_weights_stay_at_init():
    _, metrics = train(tiny_records(), tiny_model_cfg(), tiny_loss_cfg(),
                       tiny_train_cfg(steps=4, fixed_weights=True))
    for line in metrics:
        np.testing.assert_array_equal(line["lambdas"], np.ones(6))


def test_disable_cmal_zeroes_its_weights():
    _, metrics = train(tiny_records(), tiny_model_cfg(), tiny_loss_cfg(),
                       tiny_train_cfg(steps=4, disable_cmal=True))
    for line in metrics:
        assert line["lambdas"][0] == 0.0 and line["lambdas"][1] == 0.0
        assert all(x > 0 for x in line["lambdas"][2:])
        assert line["losses"]["v2t"] == 0.0 and line["losses"]["pml"] == 0.0


def test_disable_gating_changes_training():
    records = tiny_records()
    _, base = train(records, tiny_model_cfg(), tiny_loss_cfg(),
                    tiny_train_cfg(steps=3))
    _, bypass = train(records, tiny_model_cfg(), tiny_loss_cfg(),
                      tiny_train_cfg(steps=3, disable_gating=True))
    assert base[0]["total"] != bypass[0]["total"]


def test_overfit_one_batch_halves_loss():
    records = tiny_records(pairs=8, seed=21)
    cfg = tiny_train_cfg(steps=200, batch_size=8, learning_rate=3e-3)
    _, metrics = train(records, tiny_model_cfg(), tiny_loss_cfg(), cfg)
    assert metrics[-1]["total"] < 0.5 * metrics[0]["total"]


def test_gradient_consistency_mode_runs_clean():
    records = tiny_records()
    cfg = tiny_train_cfg(steps=3, check_grad_consistency=True)
    train(records, tiny_model_cfg(precision="f64"), tiny_loss_cfg(), cfg)


def test_divergence_aborts_with_step():
    records = tiny_records()
    cfg_m = tiny_model_cfg()
    params = model.init_params(cfg_m, seed=0)
    params["proj_v.w"][0, 0] = np.nan
    with pytest.raises(DivergenceError) as err:
        train(records, cfg_m, tiny_loss_cfg(), tiny_train_cfg(steps=5),
              params=params)
    assert err.value.step == 0
    assert "step 0" in str(err.value)


def test_resume_continues_the_batch_stream(tmp_path):
    records = tiny_records(pairs=12)
    full_cfg = tiny_train_cfg(steps=6, batch_size=4)
    ck_full, m_full = train(records, tiny_model_cfg(), tiny_loss_cfg(), full_cfg)

    half_cfg = tiny_train_cfg(steps=3, batch_size=4)
    ck_half, _ = train(records, tiny_model_cfg(), tiny_loss_cfg(), half_cfg,
                       config_hash="h")
    ck_resumed, m_tail = train(records, tiny_model_cfg(), tiny_loss_cfg(),
                               full_cfg, resume=ck_half, config_hash="h")
    assert params_equal(ck_full.params, ck_resumed.params)
    assert [m["step"] for m in m_tail] == [3, 4, 5]
    assert json.dumps(m_full[3:]) == json.dumps(m_tail)


def test_training_needs_two_pairs():
    with pytest.raises(DataError):
        train(tiny_records(pairs=1), tiny_model_cfg(), tiny_loss_cfg(),
              tiny_train_cfg())


def test_train_with_missing_modalities():
    records = tiny_records(pairs=12, missing_rate=0.3, seed=5)
    _, metrics = train(records, tiny_model_cfg(), tiny_loss_cfg(),
                       tiny_train_cfg(steps=4, batch_size=6))
    assert len(metrics) == 4
    assert all(np.isfinite(line["total"]) for line in metrics)
