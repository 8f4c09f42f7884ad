from dataclasses import replace

import numpy as np
import pytest

from flowvo.errors import Diverged
from flowvo.losses import LossValue
from flowvo.model import PoseNet, PoseNetConfig
from flowvo.synthgen import SceneConfig
from flowvo.trainer import (
    DESK_SCENE,
    EXPERIMENT_DEFAULTS,
    EXPERIMENTS,
    TEST_ENVS,
    TRAIN_ENVS,
    Adam,
    LossCurve,
    TrainConfig,
    apply_rcr,
    batch_at,
    build_dataset,
    evaluate,
    experiment_data_quantity,
    experiment_up_to_scale,
    generalization_gap,
    new_net,
    run_experiment,
    train,
)

SCENE = SceneConfig(seed=3)


@pytest.fixture(scope="module")
def data():
    return build_dataset(SCENE, TRAIN_ENVS, 200), build_dataset(SCENE, TEST_ENVS, 40)


def test_default_schedule():
    cfg = TrainConfig(iterations=800)
    assert [cfg.lr_at(s) for s in (0, 399, 400, 699, 700, 799)] == [
        1e-4, 1e-4, 2e-5, 2e-5, 4e-6, 4e-6]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(milestones=(0.8, 0.5))
    with pytest.raises(ValueError):
        TrainConfig(variant="l2")
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_nested_sizes(data):
    small = build_dataset(SCENE, TRAIN_ENVS, 50)
    np.testing.assert_array_equal(small.flows, data[0].flows[:50])


def test_zero_iterations(data):
    net = new_net(TrainConfig())
    before = {k: v.copy() for k, v in net.params.items()}
    _, curve = train(net, data[0], {}, TrainConfig(iterations=0))
    assert len(curve) == 0
    for k in before:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_empty_dataset_and_channel_mismatch(data):
    with pytest.raises(ValueError):
        train(new_net(TrainConfig()), data[0].subset(0), {}, TrainConfig(iterations=1))
    with pytest.raises(ValueError):
        train(new_net(TrainConfig(use_il=False)), data[0], {}, TrainConfig(iterations=1))


def test_training_is_deterministic(data):
    cfg = TrainConfig(iterations=6, batch_size=8, eval_every=3, use_rcr=True, lr=1e-3,
                      noise_sigma=0.5, noise_dropout=0.1, lam=0.1)
    a, ca = train(new_net(cfg), data[0], {"test": data[1]}, cfg)
    b, cb = train(new_net(cfg), data[0], {"test": data[1]}, cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert ca.steps == [3, 6] and ca.train == cb.train


def test_dataset_not_mutated(data):
    flows = data[0].flows.copy()
    cfg = TrainConfig(iterations=2, batch_size=4, use_rcr=True, noise_sigma=1.0)
    train(new_net(cfg), data[0], {}, cfg)
    np.testing.assert_array_equal(data[0].flows, flows)


def test_resume_matches_uninterrupted(data):
    cfg = TrainConfig(iterations=8, batch_size=8, eval_every=4, lr=1e-3, use_rcr=True)
    full, _ = train(new_net(cfg), data[0], {}, cfg)
    saved = {}

    def keep(step, net, opt):
        if step == 4:
            saved["net"] = net.copy()
            saved["state"] = np.concatenate([a.ravel() for a in opt.state_arrays()])
            saved["t"] = opt.t

    train(new_net(cfg), data[0], {}, replace(cfg), checkpoint=keep)
    net = saved["net"]
    opt = Adam(net.params)
    opt.load_state(saved["state"], saved["t"])
    resumed, _ = train(net, data[0], {}, cfg, start_step=4, optimizer=opt)
    for k in full.params:
        np.testing.assert_array_equal(resumed.params[k], full.params[k])


def test_batches_with_il_channels(data):
    cfg = TrainConfig(batch_size=5, use_rcr=True)
    x, _, oracle, masks, motions = batch_at(data[0], cfg, 0)
    assert x.shape == (5, 48, 64, 4) and masks.shape == (5, 48, 64) and motions.shape == (5, 6)
    assert not np.array_equal(x[..., 2:], np.broadcast_to(data[0].il(np.arange(1)), x[..., 2:].shape))


def test_apply_rcr_il_varies(data):
    cropped = apply_rcr(data[1], 0)
    assert cropped.ils.shape == (40, 48, 64, 2)
    assert not np.allclose(cropped.ils[0], cropped.ils[1])


def test_divergence_detected(data):
    net = PoseNet(PoseNetConfig(seed=0))
    for k in net.params:
        net.params[k][...] = np.nan
    with pytest.raises(Diverged):
        train(net, data[0], {}, TrainConfig(iterations=1))
    curve = LossCurve()
    with pytest.raises(Diverged):
        curve.append(1, LossValue(float("nan"), 0, 0), {})


def test_training_reduces_loss(data):
    cfg = TrainConfig(iterations=150, lr=1e-3, batch_size=16, eval_every=150, lam=0.0)
    net = new_net(cfg)
    before = evaluate(net, data[0], cfg.variant, True)
    _, curve = train(net, data[0], {}, cfg)
    assert curve.train[-1].total < 0.5 * before.total


def test_experiments_small(data):
    cfg = TrainConfig(iterations=4, batch_size=4, eval_every=2)
    res = experiment_data_quantity([20, 40, 80], cfg, data[0], data[1])
    assert sorted(res) == [20, 40, 80]
    with pytest.raises(ValueError):
        experiment_data_quantity([0, 10, 20], cfg, data[0], data[1])
    with pytest.raises(ValueError):
        experiment_data_quantity([10, 20], cfg, data[0], data[1])
    pair = experiment_up_to_scale(cfg, data[0], {"heldout": data[1]}, variants=("full", "full"))
    assert generalization_gap(pair["full"], "heldout") == generalization_gap(pair["full"], "heldout")


def test_run_experiment_table():
    cfg = TrainConfig(iterations=2, batch_size=4, eval_every=2)
    report = run_experiment("rcr_il", cfg, train_count=20, test_count=8)
    assert [r[0] for r in report.rows] == ["no_rcr_no_il", "no_rcr_il", "rcr_no_il", "rcr_il"]
    assert report.header == ["run", "rcr", "il", "train", "test_rcr", "test_fixed"]
    with pytest.raises(ValueError):
        run_experiment("nope", cfg)
    assert DESK_SCENE.depth_range[0] > 0


def test_experiment_defaults_cover_every_experiment():
    assert set(EXPERIMENT_DEFAULTS) == set(EXPERIMENTS)
    for entry in EXPERIMENT_DEFAULTS.values():
        assert isinstance(entry["cfg"], TrainConfig)
    assert EXPERIMENT_DEFAULTS["data_quantity"]["sizes"] == (1000, 5000, 20000)
