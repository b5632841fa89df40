import time

import numpy as np
import pytest

from src.errors import ConfigError, TransferContractError
from src.models.presets import preset
from src.models.surgery import build_hybrid, plan_cut
from src.quantum.vqc import VqcConfig
from src.tools.dataset import ANOMALOUS, NORMAL, holdout_split, synth_dataset
from src.trainer import (
    Metrics,
    TrainConfig,
    cross_validate,
    evaluate,
    fit,
    train_classical,
    train_qtl,
)

SMALL_VQC = VqcConfig(n_qubits=2, n_layers=1)


class Constant:
    """Stand-in model that always predicts one class."""

    def __init__(self, label):
        self.label = label

    def predict_proba(self, batch):
        probs = np.zeros((len(batch), 2))
        probs[:, self.label] = 1.0
        return probs


class Oracle:
    """Reads the label back from a marker pixel."""

    def predict_proba(self, batch):
        anomalous = batch[:, 0, 0, 0] > 0
        return np.stack([~anomalous, anomalous], axis=1).astype(float)


@pytest.fixture(scope="module")
def tiny():
    return synth_dataset(10, 32, seed=0)


def hybrid_for(qtl="QTL-M-1", seed=0):
    graph = preset("CM-T", seed=0)
    return build_hybrid(graph, plan_cut(graph, qtl), SMALL_VQC, seed=seed, allow_untrained=True)


def test_metrics_from_counts():
    labels = np.array([1, 1, 1, 0, 0])
    predictions = np.array([1, 1, 0, 1, 0])
    m = Metrics.from_predictions(labels, predictions)
    assert (m.tp, m.fp, m.tn, m.fn) == (2, 1, 1, 1)
    assert m.f1 == pytest.approx(2 / 3)
    assert m.accuracy == pytest.approx(0.6)


def test_constant_normal_predictor(tiny):
    m = evaluate(Constant(NORMAL), tiny)
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert m.accuracy == 0.5


def test_perfect_predictor(tiny):
    marked = tiny.images.copy()
    marked[:, 0, 0, 0] = np.where(tiny.labels == ANOMALOUS, 1.0, -1.0)
    data = type(tiny)(marked, tiny.labels.copy(), tiny.mean, tiny.std)
    m = evaluate(Oracle(), data)
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
    assert m.loss == pytest.approx(0.0, abs=1e-9)


def test_evaluate_ignores_order(tiny):
    graph = preset("CM-T", seed=2)
    order = np.random.default_rng(0).permutation(len(tiny))
    a, b = evaluate(graph, tiny), evaluate(graph, tiny.subset(order))
    assert (a.tp, a.fp, a.tn, a.fn) == (b.tp, b.fp, b.tn, b.fn)
    assert a.loss == pytest.approx(b.loss, rel=1e-12)


def test_evaluate_rejects_unknown_and_empty(tiny):
    with pytest.raises(ConfigError):
        evaluate(object(), tiny)
    with pytest.raises(ConfigError):
        evaluate(Constant(0), tiny.subset([]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(test_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=32).validate(n_train=16)
    assert TrainConfig.hybrid().epochs == 40


def test_train_classical_is_deterministic(tiny):
    config = TrainConfig(batch_size=4, epochs=2, restarts=2, seed=3)
    a = train_classical("CM-T", tiny, config)
    b = train_classical("CM-T", tiny, config)
    assert a.seeds == [3, 4] and a.best == b.best
    for key in a.model.params:
        np.testing.assert_array_equal(a.model.params[key], b.model.params[key])
    assert a.records[0].train_loss == b.records[0].train_loss
    assert len(a.records[1]) == 2
    assert a.model.trained
    assert list(a.records[0].to_frame().columns)[-1] == "test_loss_norm"


def test_train_classical_checks_shapes_first(tiny):
    with pytest.raises(Exception, match="CM-2"):
        train_classical("CM-2", tiny, TrainConfig(batch_size=4, epochs=1, restarts=1))


def test_zero_epochs_leave_head_untouched(tiny):
    hybrid = hybrid_for()
    before = {k: v.copy() for k, v in hybrid.head.params.items()}
    record = train_qtl(hybrid, tiny, TrainConfig.hybrid(epochs=0, batch_size=4))
    assert len(record) == 0
    for key, value in before.items():
        np.testing.assert_array_equal(hybrid.head.params[key], value)


def test_only_the_head_learns(tiny):
    hybrid = hybrid_for("QTL-M-2")
    prefix = {k: v.copy() for k, v in hybrid.frozen_prefix.params.items()}
    head = {k: v.copy() for k, v in hybrid.head.params.items()}
    record = train_qtl(hybrid, tiny, TrainConfig.hybrid(epochs=5, batch_size=4, learning_rate=0.01))
    assert len(record) == 5
    for key, value in prefix.items():
        np.testing.assert_array_equal(hybrid.frozen_prefix.params[key], value)
    assert all(not np.array_equal(hybrid.head.params[k], head[k]) for k in ("pre.weight", "vqc.angles"))


def test_cached_features_match_recomputed(tiny):
    cached, direct = hybrid_for(seed=2), hybrid_for(seed=2)
    train, test = holdout_split(tiny, 0.2, seed=0)
    a = train_qtl(cached, train, TrainConfig.hybrid(epochs=3, batch_size=4, cache_features=True), test=test)
    b = train_qtl(direct, train, TrainConfig.hybrid(epochs=3, batch_size=4, cache_features=False), test=test)
    for key in cached.head.params:
        np.testing.assert_allclose(cached.head.params[key], direct.head.params[key], rtol=0, atol=1e-9)
    np.testing.assert_allclose(a.test_loss, b.test_loss, rtol=0, atol=1e-9)


def test_unfrozen_prefix_refused(tiny):
    hybrid = hybrid_for()
    hybrid.frozen_prefix.layers[0].frozen = False
    with pytest.raises(TransferContractError):
        train_qtl(hybrid, tiny, TrainConfig.hybrid(epochs=1, batch_size=4))


def test_fit_without_training_rule(tiny):
    record = fit(Constant(1), tiny, tiny, TrainConfig(), seed=0, label="noop")
    assert record.label == "noop" and len(record) == 0


def test_cross_validate_constant_model(tiny):
    seeds = []

    def builder(seed):
        seeds.append(seed)
        return Constant(NORMAL)

    cv = cross_validate(builder, tiny, 2, TrainConfig(seed=5, batch_size=4))
    assert seeds == [5, 6]
    assert [m.accuracy for m in cv.metrics] == [0.5, 0.5]
    assert cv.mean_f1 == 0.0
    assert cv.summary["accuracy"] == {"mean": 0.5, "std": 0.0}


def test_cross_validate_summary_and_workers(tiny):
    config = TrainConfig.hybrid(epochs=2, batch_size=4, learning_rate=0.01)
    serial = cross_validate(lambda s: hybrid_for(seed=s), tiny, 3, config)
    pooled = cross_validate(lambda s: hybrid_for(seed=s), tiny, 3, TrainConfig.hybrid(
        epochs=2, batch_size=4, learning_rate=0.01, workers=2))
    assert [m.to_dict() for m in serial.metrics] == [m.to_dict() for m in pooled.metrics]
    assert serial.mean_f1 == pytest.approx(np.mean([m.f1 for m in serial.metrics]))
    assert [r.label for r in serial.records] == ["fold0", "fold1", "fold2"]
    assert len(serial.models) == 3


@pytest.mark.slow
def test_golden_classical_then_transfer():
    started = time.time()
    data = synth_dataset(100, 32, seed=0)
    config = TrainConfig(batch_size=16, epochs=30, learning_rate=0.002, restarts=1, seed=0)
    result = train_classical("CM-T", data, config)
    curve = result.records[result.best].train_loss
    assert curve[-1] < curve[0]
    assert evaluate(result.model, data).accuracy >= 0.95

    graph = result.model
    plan = plan_cut(graph, "QTL-M-1")
    five_by_three = VqcConfig(n_qubits=5, n_layers=3)
    cv = cross_validate(lambda s: build_hybrid(graph, plan, five_by_three, seed=s), data, 6,
                        TrainConfig.hybrid(epochs=40, batch_size=16, learning_rate=0.01))
    assert cv.mean_f1 >= 0.9
    assert all(r.train_loss[-1] < r.train_loss[0] for r in cv.records)
    # 单核台式机上整个流程需在十分钟内跑完
    assert time.time() - started < 600
