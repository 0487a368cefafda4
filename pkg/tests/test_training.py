import math

import numpy as np
import pytest

from vcbm import tape
from vcbm.lcbm import VCBM, Prediction
from vcbm.synthdata import assign_splits, generate
from vcbm.training import (
    SGD,
    NumericError,
    TrainConfig,
    TrainState,
    ablate,
    evaluate,
    joint_loss,
    lambda_gradient_check,
    load_checkpoint,
    loss_terms,
    save_checkpoint,
    split_samples,
    train,
    validate_axis,
    write_table,
)

SHAPE = (16, 24, 24, 3)


def fake_prediction(man_logits, expl_logits):
    man = tape.parameter(np.asarray(man_logits, dtype=float))
    expl = tape.parameter(np.asarray(expl_logits, dtype=float))
    return Prediction(expl, expl, tape.sigmoid(expl), man, tape.softmax(man, axis=-1))


def small_config(**kw):
    base = dict(epochs=3, dim=4, k=3, batch_size=8, learning_rate=1e-2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def fresh_model(cfg, samples):
    return VCBM.init(cfg.model_config(samples[0].front_u8.shape[1:]), cfg.seed)


@pytest.fixture(scope="module")
def splits():
    return split_samples(assign_splits(generate(60, 9, SHAPE), seed=9))


def test_uniform_logits_closed_form():
    pred = fake_prediction(np.zeros((3, 7)), np.zeros((3, 17)))
    y = [0, 4, 6]
    e = np.eye(3, 17)
    l_y, l_c = loss_terms(pred, y, e)
    assert abs(l_y.item() - math.log(7)) < 1e-9
    assert abs(l_c.item() - 17 * math.log(2)) < 1e-9
    assert abs(joint_loss(pred, y, e, 0.5).item() - (math.log(7) + 0.5 * 17 * math.log(2))) < 1e-9


def test_lambda_zero_is_task_loss_only():
    rng = np.random.default_rng(0)
    pred = fake_prediction(rng.normal(size=(2, 7)), rng.normal(size=(2, 17)))
    y, e = [1, 2], rng.integers(0, 2, (2, 17))
    l_y, _ = loss_terms(pred, y, e)
    assert joint_loss(pred, y, e, 0.0).item() == l_y.item()


def test_confident_correct_predictions_approach_zero_loss():
    man = np.full((1, 7), -50.0)
    man[0, 3] = 50.0
    e = np.zeros((1, 17))
    e[0, [2, 5]] = 1
    pred = fake_prediction(man, np.where(e > 0, 60.0, -60.0))
    assert joint_loss(pred, [3], e, 0.5).item() < 1e-20


def test_invalid_targets():
    pred = fake_prediction(np.zeros((1, 7)), np.zeros((1, 17)))
    with pytest.raises(ValueError):
        joint_loss(pred, [7], np.zeros((1, 17)), 0.5)
    with pytest.raises(ValueError):
        joint_loss(pred, [0], np.full((1, 17), 0.5), 0.5)
    with pytest.raises(ValueError):
        joint_loss(pred, [0], np.zeros((1, 17)), -1.0)


def test_lambda_zero_gradient_path(splits):
    cfg = small_config(lam=0.0)
    model = fresh_model(cfg, splits["train"])
    check = lambda_gradient_check(model, splits["train"][:4], cfg)
    assert check["passed"], check


def test_config_roundtrip_and_validation():
    cfg = TrainConfig(lam=0.25, tubelet=[4, 8, 8], gaze_variant="crop")
    d = cfg.to_dict()
    assert d["lambda"] == 0.25 and "lam" not in d and d["gaze_variant"] == "crop:16"
    assert TrainConfig.from_dict(d) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lamda": 1})
    for bad in ({"lam": -0.1}, {"shuffle_severity": 3}, {"batch_size": 0}, {"gaze_variant": "x"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_sgd_momentum_freeze_and_clip():
    params = {"a": tape.parameter([1.0]), "ltm.weight_logits": tape.parameter([0.0]), "ltm.positions": tape.parameter([0.95])}
    opt = SGD(params, lr=0.1, momentum=0.9, frozen=["ltm.weight_logits"])
    for _ in range(2):
        for p in params.values():
            p.grad = np.array([-1.0])
        opt.step()
    # v1 = g, v2 = 0.9 g + g
    assert params["a"].data[0] == pytest.approx(1.0 + 0.1 + 0.19)
    assert params["ltm.weight_logits"].data[0] == 0.0
    assert params["ltm.positions"].data[0] == 1.0


def test_train_loss_decreases_on_planted_concepts():
    samples = split_samples(assign_splits(generate(200, 2, SHAPE), seed=2))
    cfg = small_config(epochs=10, lam=0.5, k=5, dim=8)
    _, log = train(fresh_model(cfg, samples["train"]), samples["train"], samples["val"], cfg)
    losses = log.column("train_total_loss")
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_log_parts_add_up(splits):
    cfg = small_config(epochs=2)
    _, log = train(fresh_model(cfg, splits["train"]), splits["train"], splits["val"], cfg)
    for row in log.rows:
        for split in ("train", "val"):
            total = row[f"{split}_L_Y"] + cfg.lam * row[f"{split}_L_C"] + row[f"{split}_l1"]
            assert abs(row[f"{split}_total_loss"] - total) < 1e-9


def test_training_is_deterministic(splits, tmp_path):
    cfg = small_config(epochs=2)
    m1, log1 = train(fresh_model(cfg, splits["train"]), splits["train"], splits["val"], cfg)
    m2, log2 = train(fresh_model(cfg, splits["train"]), splits["train"], splits["val"], cfg)
    assert log1.rows == log2.rows
    for k, v in m1.state_dict().items():
        np.testing.assert_array_equal(v, m2.state_dict()[k])
    log1.to_csv(tmp_path / "a.csv")
    log2.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_resume_matches_uninterrupted(splits, tmp_path):
    full_cfg = small_config(epochs=4)
    full, full_log = train(fresh_model(full_cfg, splits["train"]), splits["train"], splits["val"], full_cfg)

    half_cfg = small_config(epochs=2)
    state = TrainState()
    half, _ = train(fresh_model(half_cfg, splits["train"]), splits["train"], splits["val"], half_cfg, state)
    save_checkpoint(tmp_path / "c.json", half, half_cfg, state)
    model, cfg, state = load_checkpoint(tmp_path / "c.json", resume=True)
    assert state.epoch == 2
    resumed, log = train(model, splits["train"], splits["val"], cfg.replace(epochs=4), state)
    assert [r["epoch"] for r in log.rows] == [0, 1, 2, 3]
    assert log.rows == full_log.rows
    for k, v in full.state_dict().items():
        np.testing.assert_array_equal(v, resumed.state_dict()[k])


def test_checkpoint_holds_best_parameters(splits, tmp_path):
    cfg = small_config(epochs=2)
    state = TrainState()
    model, _ = train(fresh_model(cfg, splits["train"]), splits["train"], splits["val"], cfg, state)
    save_checkpoint(tmp_path / "c.json", model, cfg, state)
    loaded, cfg2, _ = load_checkpoint(tmp_path / "c.json")
    assert cfg2 == cfg
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, loaded.state_dict()[k])
    a = evaluate(model, splits["val"], cfg).report.row()
    assert a == evaluate(loaded, splits["val"], cfg).report.row()


def test_non_finite_loss_aborts_with_location(splits):
    cfg = small_config(epochs=1)
    model = fresh_model(cfg, splits["train"])
    model.bottleneck.final_bias.data[0] = np.nan
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train(model, splits["train"], splits["val"], cfg)


def test_train_rejects_overlapping_splits(splits):
    cfg = small_config(epochs=1)
    with pytest.raises(ValueError):
        train(fresh_model(cfg, splits["train"]), splits["train"], splits["train"][:3], cfg)


def test_evaluate_is_deterministic_and_uses_fixed_frames(splits):
    cfg = small_config(shuffle_severity=16)
    model = fresh_model(cfg, splits["train"])
    a, b = evaluate(model, splits["val"], cfg), evaluate(model, splits["val"], cfg)
    np.testing.assert_array_equal(a.maneuver_probs, b.maneuver_probs)


def test_ablation_values_validated_before_training(splits):
    with pytest.raises(ValueError, match="axis"):
        validate_axis("dropout", [1], small_config(), SHAPE[1:])
    with pytest.raises(ValueError, match="'3'"):
        ablate(splits, "severity", [1, "3"], small_config())
    with pytest.raises(ValueError):
        ablate(splits, "clusters", [1, 100], small_config())
    with pytest.raises(ValueError):
        ablate(splits, "components", ["ltm", "bogus"], small_config())


@pytest.mark.parametrize(
    "axis,values",
    [
        ("clusters", [1, 3, 5, 7, 10]),
        ("lambda", [0, 0.01, 0.5, 1.0]),
        ("severity", [1, 2, 4, 8, 16]),
        ("gaze_variant", ["none", "overlaid", "crop:8"]),
        ("components", ["none", "ltm", "lcbm", "ltm+lcbm"]),
    ],
)
def test_axis_values_accepted(axis, values):
    cfgs = validate_axis(axis, values, small_config(), (64, 64, 3))
    assert len(cfgs) == len(values)
    if axis == "components":
        assert [(c.ltm_on, c.lcbm_on) for c in cfgs] == [(False, False), (True, False), (False, True), (True, True)]


def test_ablation_table(splits, tmp_path):
    rows = ablate(splits, "components", ["none", "ltm+lcbm"], small_config(epochs=1))
    assert [r["value"] for r in rows] == ["none", "ltm+lcbm"]
    write_table(rows, tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "axis,value,seed,action_acc,action_f1,expl_acc,expl_f1,expl_f1_macro,expl_f1_micro"


def test_frozen_distance_weights_stay_put(splits):
    cfg = small_config(epochs=1, freeze_distance_weights=True)
    model = fresh_model(cfg, splits["train"])
    before = model.clusters.weight_logits.data.copy()
    train(model, splits["train"], splits["val"], cfg)
    np.testing.assert_array_equal(model.clusters.weight_logits.data, before)


def test_probabilities_into_f(splits):
    cfg = small_config(epochs=1, use_probabilities_for_f=True)
    model = fresh_model(cfg, splits["train"])
    g = np.zeros((1, 16, 24, 24, 3))
    pred = model.forward_batch(g, g)
    ref = pred.expl_probs.data @ model.bottleneck.final_weight.data.T + model.bottleneck.final_bias.data
    np.testing.assert_allclose(pred.maneuver_logits.data, ref, atol=1e-12)
