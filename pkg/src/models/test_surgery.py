import numpy as np
import pytest

from src.errors import ConfigError, TransferContractError
from src.models.layers import LayerGraph, forward
from src.models.presets import preset
from src.models.surgery import (
    build_hybrid,
    hybrid_counts,
    param_report,
    plan_cut,
    reduction_replaced,
    reduction_total,
)
from src.quantum.vqc import VqcConfig

FIVE_BY_THREE = VqcConfig(n_qubits=5, n_layers=3)


@pytest.mark.parametrize("model,qtl,n_ip,replaced", [
    ("CM-2", "QTL-M-1", 64, 1_074),
    ("CM-2", "QTL-M-2", 128, 9_330),
    ("CM-2", "QTL-M-3", 2048, 271_602),
    ("CM-3", "QTL-M-1", 64, 1_074),
    ("CM-3", "QTL-M-3", 8192, 1_058_034),
    ("CM-1", "QTL-M-1", 64, 2_642),
    ("CM-1", "QTL-M-3", 3200, 420_626),
])
def test_plan_cut(model, qtl, n_ip, replaced):
    graph = preset(model, seed=None)
    plan = plan_cut(graph, qtl)
    assert plan.n_ip == n_ip
    assert plan.replaced_param_sum == replaced
    cut = graph.layers[plan.cut_index]
    assert cut.kind == "dense" and cut.in_dim == n_ip
    assert all(s.kind in ("dense", "dropout", "activation") for s in graph.layers[plan.cut_index:])


def test_cm1_cuts_replace_three_four_five_dense_layers():
    graph = preset("CM-1", seed=None)
    replaced = [sum(s.kind == "dense" for s in graph.layers[plan_cut(graph, q).cut_index:])
                for q in ("QTL-M-1", "QTL-M-2", "QTL-M-3")]
    assert replaced == [3, 4, 5]


def test_plan_cut_errors():
    graph = preset("CM-2", seed=None)
    with pytest.raises(ConfigError, match=r"available widths: \[2048, 128, 64, 16\]"):
        plan_cut(graph, "custom", width=999)
    with pytest.raises(ConfigError):
        plan_cut(graph, "custom")
    with pytest.raises(ConfigError):
        plan_cut(graph, "QTL-M-9")
    assert plan_cut(graph, "custom", width=16).replaced_param_sum == 34


@pytest.mark.parametrize("model,totals", [
    ("CM-2", (533_790, 525_854, 273_182)),
    ("CM-3", (1_125_150, 1_117_214, 108_830)),
])
def test_hybrid_totals(model, totals):
    counts = hybrid_counts(preset(model, seed=None), FIVE_BY_THREE)
    assert tuple(counts[q][0] for q in ("QTL-M-1", "QTL-M-2", "QTL-M-3")) == totals
    # constructed and published totals agree for these two models
    assert all(constructed == reference for constructed, reference in counts.values())


def test_cm1_totals_against_published_count():
    counts = hybrid_counts(preset("CM-1", seed=None), FIVE_BY_THREE)
    assert [counts[q][1] for q in ("QTL-M-1", "QTL-M-2", "QTL-M-3")] == [1_074_078, 1_066_142, 671_774]


def test_param_report_widest_cut():
    report = param_report(preset("CM-2", seed=None), "QTL-M-3", FIVE_BY_THREE)
    assert (report.w_pre, report.w_vqc, report.w_post, report.w_dqn) == (10_245, 45, 12, 10_302)
    assert report.classical_total == 534_482
    assert report.hybrid_total == 273_182
    assert report.reduction_total == pytest.approx(48.89, abs=0.01)
    assert report.reduction_replaced == pytest.approx(96.21, abs=0.01)


def test_param_report_cm3():
    report = param_report(preset("CM-3", seed=None), "QTL-M-3")
    assert report.hybrid_total == 108_830
    assert report.reduction_total == pytest.approx(90.33, abs=0.01)


def test_reduction_formulas():
    assert reduction_replaced(271_602, 10_302) == pytest.approx(96.21, abs=0.01)
    assert reduction_replaced(500, 500) == 0.0
    assert reduction_replaced(500, 0) == 100.0
    assert reduction_total(534_482, 273_182) == pytest.approx(48.89, abs=0.01)
    assert reduction_total(1_125_842, 108_830) == pytest.approx(90.33, abs=0.01)
    assert reduction_total(10, 10) == 0.0
    assert reduction_total(3 * 534_482, 3 * 273_182) == pytest.approx(reduction_total(534_482, 273_182))
    assert reduction_replaced(100, 1_000) < 0
    with pytest.raises(ConfigError):
        reduction_replaced(0, 10)
    with pytest.raises(ConfigError):
        reduction_total(0, 10)


@pytest.mark.parametrize("model,qtl,total", [("CM-2", "QTL-M-3", 273_182), ("CM-3", "QTL-M-3", 108_830)])
def test_built_hybrid_counts(model, qtl, total):
    graph = preset(model, seed=0)
    hybrid = build_hybrid(graph, plan_cut(graph, qtl), FIVE_BY_THREE, seed=1, allow_untrained=True)
    assert hybrid.param_count() == total


def test_untrained_graph_rejected():
    graph = preset("CM-T", seed=0)
    with pytest.raises(ConfigError, match="untrained"):
        build_hybrid(graph, plan_cut(graph, "QTL-M-1"), FIVE_BY_THREE)


def test_plan_must_match_graph():
    cm2 = preset("CM-2", seed=None)
    graph = preset("CM-T", seed=0)
    with pytest.raises(ConfigError):
        build_hybrid(graph, plan_cut(cm2, "QTL-M-1"), FIVE_BY_THREE, allow_untrained=True)


def test_prefix_is_verbatim_frozen_copy():
    graph = preset("CM-T", seed=0)
    graph.trained = True
    plan = plan_cut(graph, "QTL-M-1")
    hybrid = build_hybrid(graph, plan, FIVE_BY_THREE, seed=3)
    assert all(s.frozen for s in hybrid.frozen_prefix.layers)
    assert not any(s.frozen for s in graph.layers)
    reference = LayerGraph("ref", graph.layers[:plan.cut_index], graph.input_shape,
                           params={k: v for k, v in graph.params.items() if int(k.split(".")[0]) < plan.cut_index})
    x = np.random.default_rng(10).normal(size=(10, 1, 32, 32))
    expected, _ = forward(reference, x)
    np.testing.assert_allclose(hybrid.features(x), expected, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        hybrid.frozen_prefix.params["0.weight"][0, 0, 0, 0] = 1.0
    probs = hybrid.predict_proba(x)
    assert probs.shape == (10, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_head_seed_controls_initialization():
    graph = preset("CM-T", seed=0)
    plan = plan_cut(graph, "QTL-M-2")
    a = build_hybrid(graph, plan, FIVE_BY_THREE, seed=5, allow_untrained=True)
    b = build_hybrid(graph, plan, FIVE_BY_THREE, seed=5, allow_untrained=True)
    c = build_hybrid(graph, plan, FIVE_BY_THREE, seed=6, allow_untrained=True)
    np.testing.assert_array_equal(a.head.pre_weight, b.head.pre_weight)
    assert not np.array_equal(a.head.pre_weight, c.head.pre_weight)
    assert a.head.n_ip == 128


def test_unfrozen_prefix_detected():
    graph = preset("CM-T", seed=0)
    hybrid = build_hybrid(graph, plan_cut(graph, "QTL-M-1"), FIVE_BY_THREE, allow_untrained=True)
    hybrid.check_frozen()
    hybrid.frozen_prefix.layers[0].frozen = False
    with pytest.raises(TransferContractError, match="layer 0"):
        hybrid.check_frozen()
