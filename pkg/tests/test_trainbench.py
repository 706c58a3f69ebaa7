import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from graspsight import dataio, models
from graspsight import trainbench as tb
from graspsight.models import ModelFreeNet, PredictiveNet, SurrogateNet
from graspsight.trainbench import ClassifierData, ComparisonReport, ExperimentScore, TrainConfig
from graspsight.worldsim import WorldParams

P = WorldParams()


@pytest.fixture(scope="module")
def tiny():
    return dataio.generate_records(P, dataio.GenParams(n=96, seed=2), workers=1)


def small_net(cls=SurrogateNet, seed=0):
    return cls(64, (4, 8), 16, seed=seed, stem="strided")


# --------------------------------------------------------------------------
# configs


def test_train_config_validation():
    TrainConfig().validate()
    for bad in (dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0),
                dict(early_stop_patience=5, epochs=3), dict(occlusion_tau=1.5)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_comparison_config_validation():
    tb.ComparisonConfig().validate()
    for bad in (dict(seeds=()), dict(estimator_inputs="real"), dict(stem="wide")):
        with pytest.raises(ValueError):
            tb.ComparisonConfig(**bad).validate()


# --------------------------------------------------------------------------
# evaluation


def test_constant_probability_on_a_balanced_split():
    labels = np.array([0, 1] * 25, dtype=np.float32)
    r = tb.confusion(np.full(50, 0.6), labels)
    assert r.accuracy == 0.5
    assert (r.tp, r.fp, r.tn, r.fn, r.n) == (25, 25, 0, 0, 50)


def test_exactly_one_half_predicts_failure():
    r = tb.confusion(np.array([0.5, 0.5, 0.5000001]), np.array([0, 1, 1]))
    assert (r.tp, r.fp, r.tn, r.fn) == (1, 0, 1, 1)


@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=200))
def test_counts_match_a_recount(pairs):
    p = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    r = tb.confusion(p, y)
    assert r.tp + r.fp + r.tn + r.fn == r.n == len(pairs)
    correct = sum((a > 0.5) == b for a, b in pairs)
    assert r.accuracy == correct / len(pairs)


def test_evaluate_rejects_an_empty_split(tiny):
    data = tb.classifier_data(tiny, tb.InputKind.DURING)
    with pytest.raises(tb.EmptySplitError):
        tb.evaluate(small_net(), data.subset(np.arange(0)))
    with pytest.raises(tb.EmptySplitError):
        tb.confusion(np.zeros(0), np.zeros(0))


def test_evaluate_agrees_with_per_sample_predictions(tiny):
    data = tb.classifier_data(tiny, tb.InputKind.BEFORE_COMMAND)
    net = small_net(ModelFreeNet, seed=3)
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p.data[:] = rng.normal(0, 0.2, p.shape)
    report = tb.evaluate(net, data)
    single = [net.forward(data.images[i:i + 1], data.commands[i:i + 1]).item() for i in range(len(data))]
    assert report.accuracy == np.mean((np.array(single) > 0.5) == data.labels.astype(bool))


def test_generated_inputs_need_one_image_per_record(tiny):
    with pytest.raises(ValueError):
        tb.classifier_data(tiny, tb.InputKind.GENERATED)
    with pytest.raises(ValueError):
        tb.classifier_data(tiny, tb.InputKind.GENERATED, np.zeros((3, 1, 64, 64)))


# --------------------------------------------------------------------------
# classifier training


def test_constant_labels_are_learned_quickly(tiny):
    data = tb.classifier_data(tiny, tb.InputKind.DURING)
    ones = ClassifierData(data.images, data.commands, np.ones(len(data), dtype=np.float32))
    result = tb.train_classifier(small_net(), ones, ones, TrainConfig(epochs=2, early_stop_patience=2))
    assert result.best.val.accuracy == 1.0


def test_training_is_deterministic(tiny):
    data = tb.classifier_data(tiny, tb.InputKind.BEFORE_COMMAND)
    cfg = TrainConfig(epochs=2, batch_size=16, early_stop_patience=2, seed=4)
    a = tb.train_classifier(small_net(ModelFreeNet, 1), data, data, cfg)
    b = tb.train_classifier(small_net(ModelFreeNet, 1), data, data, cfg)
    assert [h.to_dict() for h in a.history] == [h.to_dict() for h in b.history]
    for name, p in a.net.params.items():
        assert np.array_equal(p.data, b.net.params[name].data)


def test_best_epoch_is_kept(tiny):
    data = tb.classifier_data(tiny, tb.InputKind.DURING)
    result = tb.train_classifier(small_net(seed=2), data.subset(np.arange(64)), data.subset(np.arange(64, 96)),
                                 TrainConfig(epochs=3, batch_size=16, early_stop_patience=3))
    best = max(h.val.accuracy for h in result.history)
    assert result.best.val.accuracy == best
    assert tb.evaluate(result.net, data.subset(np.arange(64, 96))).accuracy == best


def test_non_finite_loss_raises(tiny):
    data = tb.classifier_data(tiny, tb.InputKind.DURING)
    bad = ClassifierData(np.full_like(data.images, np.nan), data.commands, data.labels)
    with pytest.raises(tb.TrainingDivergedError):
        tb.train_classifier(small_net(), bad, data, TrainConfig(epochs=1, early_stop_patience=1))


def test_empty_training_split(tiny):
    data = tb.classifier_data(tiny, tb.InputKind.DURING)
    with pytest.raises(tb.EmptySplitError):
        tb.train_classifier(small_net(), data.subset(np.arange(0)), data, TrainConfig(epochs=1, early_stop_patience=1))


# --------------------------------------------------------------------------
# predictor training


def test_static_scenes_are_copied_through(tiny):
    pd = tb.PredictiveData.from_dataset(tiny)
    static = tb.PredictiveData(pd.before, pd.before.copy(), pd.commands)
    result = tb.train_predictive(PredictiveNet(seed=1), static, static,
                                 TrainConfig(epochs=5, batch_size=16, learning_rate=3e-3, early_stop_patience=5))
    assert result.best.val_loss < 1e-3


def test_predictive_loss_trend(tiny):
    pd = tb.PredictiveData.from_dataset(tiny)
    result = tb.train_predictive(PredictiveNet(seed=2), pd, pd,
                                 TrainConfig(epochs=3, batch_size=16, learning_rate=3e-3, early_stop_patience=3))
    losses = [h.train_loss for h in result.history]
    assert all(np.isfinite(losses))
    assert all(b <= 1.1 * a for a, b in zip(losses, losses[1:]))


# --------------------------------------------------------------------------
# grids and PGM files


def test_grid_layout(tiny):
    pd = tb.PredictiveData.from_dataset(tiny)
    grid = tb.render_prediction_grid(PredictiveNet(seed=1), pd, 1)
    assert grid.shape == (64, 192)
    assert grid.min() >= 0 and grid.max() <= 1
    assert np.array_equal(grid[:, :64], pd.before[0, 0])
    assert tb.render_prediction_grid(PredictiveNet(seed=1), pd, 4).shape == (256, 192)
    with pytest.raises(ValueError):
        tb.render_prediction_grid(PredictiveNet(seed=1), pd, len(pd) + 1)


def test_training_changes_the_grid(tiny):
    pd = tb.PredictiveData.from_dataset(tiny)
    untrained = tb.render_prediction_grid(PredictiveNet(seed=3), pd, 2)
    trained = tb.train_predictive(PredictiveNet(seed=3), pd, pd,
                                  TrainConfig(epochs=1, batch_size=16, early_stop_patience=1)).net
    assert np.abs(tb.render_prediction_grid(trained, pd, 2) - untrained).max() > 0


def test_pgm_roundtrip(tmp_path):
    image = np.linspace(0, 1, 6 * 9).reshape(6, 9)
    path = tmp_path / "g.pgm"
    tb.write_pgm(path, image)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n9 6\n255\n")
    assert len(blob) == len(b"P5\n9 6\n255\n") + 54
    assert np.array_equal(tb.decode_pgm(blob), np.round(image * 255).astype(np.uint8))


def test_pgm_payload_may_contain_whitespace_bytes():
    image = np.full((2, 2), 32 / 255)  # byte 0x20 is a space
    assert np.array_equal(tb.decode_pgm(tb.encode_pgm(image)), np.full((2, 2), 32, np.uint8))
    with pytest.raises(ValueError):
        tb.decode_pgm(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        tb.decode_pgm(tb.encode_pgm(image)[:-1])


# --------------------------------------------------------------------------
# reports


def _report(seed, mf, sur, pipe):
    return ComparisonReport(seed, 7, 1.0, {"model-free": ExperimentScore(0.9, mf),
                                           "surrogate": ExperimentScore(0.9, sur),
                                           "pipeline": ExperimentScore(0.9, pipe)}, 0.001, 10, 2)


def test_multi_seed_medians_and_ordering():
    rep = tb.MultiSeedReport([_report(1, 0.70, 0.90, 0.80), _report(2, 0.72, 0.88, 0.82),
                              _report(3, 0.60, 0.95, 0.99)])
    assert rep.median("model-free") == 0.70 and rep.median("pipeline") == 0.82
    assert all(rep.ordering().values())
    worse = tb.MultiSeedReport([_report(1, 0.85, 0.88, 0.80)])
    assert worse.ordering() == {"surrogate >= 0.85": True, "surrogate - model-free >= 0.05": False,
                                "model-free < pipeline": False, "pipeline <= surrogate": True}


def test_report_formats():
    rep = tb.MultiSeedReport([_report(1, 0.70, 0.90, 0.80)])
    d = json.loads(rep.to_json())
    assert set(d["median"]) == set(tb.EXPERIMENTS)
    assert all(set(v) == {"train_accuracy", "val_accuracy"} for v in d["median"].values())
    text = rep.to_text()
    assert "surrogate" in text and "ok   pipeline <= surrogate" in text
