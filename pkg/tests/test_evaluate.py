import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcost.evaluate import (
    EmptyInput, EvalReport, WrongSampleCount, ZeroVariance, confidence_error_correlation,
    edge_error_report, evaluate_model, mape, mape_with_count, mse, pass_at_k, shifted_states,
    split_records, validate_report, workload_group,
)
from dfcost.model import METRICS, init_model, make_config
from dfcost.oracle import evaluate_cycles
from dfcost.synth import GenConfig, build_dataset
from dfcost.train import TrainConfig, train_static


@pytest.fixture(scope="module")
def records():
    return list(build_dataset(GenConfig(seed=6), 60))


def test_mape_examples():
    assert mape([110, 90], [100, 100]) == pytest.approx(10.0)
    assert mape([100], [100]) == 0.0
    m, excluded = mape_with_count([5, 110], [0, 100])
    assert m == pytest.approx(10.0) and excluded == 1
    with pytest.raises(EmptyInput):
        mape([], [])
    with pytest.raises(EmptyInput):
        mape([1.0], [0.0])
    with pytest.raises(ValueError):
        mape([1, 2], [1])


def test_mse_example():
    assert mse([1, 3], [2, 5]) == pytest.approx(2.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(1e-3, 1e6)), min_size=1, max_size=30))
def test_mape_nonnegative(pairs):
    p, t = zip(*pairs)
    assert mape(p, t) >= 0


def test_pearson_examples():
    assert confidence_error_correlation([0.9, 0.5, 0.1], [0.0, 1.0, 2.0]) == pytest.approx(-1.0)
    assert confidence_error_correlation([0.1, 0.5, 0.9], [0.0, 1.0, 2.0]) == pytest.approx(1.0)
    with pytest.raises(ZeroVariance):
        confidence_error_correlation([0.5, 0.5, 0.5], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 100)), min_size=3, max_size=20))
def test_pearson_bounded(pairs):
    c, e = zip(*pairs)
    try:
        r = confidence_error_correlation(c, e)
    except ZeroVariance:
        return
    assert -1.0 <= r <= 1.0


def test_edge_bins_partition():
    train = list(range(1, 101))
    truth = np.array([1, 2, 50, 60, 99, 100, 3, 97])
    pred = truth * 1.1
    rep = edge_error_report(pred, truth, train)
    assert rep.edge_count + rep.central_count == len(truth)
    assert rep.lower == pytest.approx(np.percentile(train, 5))
    assert rep.edge_mape == pytest.approx(10.0) and rep.central_mape == pytest.approx(10.0)
    assert rep.ratio == pytest.approx(1.0)


def test_edge_bins_detect_edge_degradation():
    train = np.linspace(10, 1000, 200)
    truth = np.array([5, 8, 500, 400, 300, 2000])
    pred = np.where((truth < 60) | (truth > 950), truth * 2, truth)
    rep = edge_error_report(pred, truth, train)
    assert rep.edge_mape == pytest.approx(100.0) and rep.central_mape == 0.0
    assert rep.ratio is None


def test_pass_at_k():
    best, med = pass_at_k([[90, 100, 130, 70, 200]], [100], k=5)
    assert best == 0.0 and med == pytest.approx(0.0)
    best, med = pass_at_k([[110, 120, 130, 140, 150]], [100], k=5)
    assert best == pytest.approx(10.0) and med == pytest.approx(30.0)
    with pytest.raises(WrongSampleCount):
        pass_at_k([[1, 2]], [1], k=5)


def test_group_split_keeps_variants_together(records):
    train, test = split_records(records, 0.25, seed=0)
    assert len(train) + len(test) == len(records)
    assert not {workload_group(r.id) for r in train} & {workload_group(r.id) for r in test}
    assert split_records(records, 0.25, seed=0) == (train, test)


def test_shifted_states_range(records):
    states = shifted_states(records, 1.5, 3.0, 32, seed=0, per_workload=2)
    assert states
    for w, inp, truth in states:
        assert all(48 <= v <= 96 for _, v in inp.bindings)
        assert evaluate_cycles(w, inp) == truth < 10**6


def test_schema_rejects_bad_reports():
    ok = EvalReport(metrics={"power": {"mape": 1.0, "mse": 0.1, "count": 3, "excluded": 0}})
    validate_report(ok)
    bad = ok.to_dict()
    bad["metrics"]["power"]["mape"] = -1.0
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)
    bad = ok.to_dict()
    bad["confidence_pearson"] = 1.5
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)


def test_evaluate_model_report(records):
    model = init_model(make_config(embed_dim=32, heads=4, ff_dim=64, local_layers=1), 0)
    train, test = split_records(records, 0.3, 0)
    train_static(model, train, TrainConfig(epochs=1))
    rep = evaluate_model(model, test, train, samples=5, seed=0)
    validate_report(rep)
    assert set(rep.metrics) == set(METRICS) == set(rep.edge) == set(rep.pass_at_5)
    for m in METRICS:
        e = rep.edge[m]
        assert e["edge_count"] + e["central_count"] + rep.metrics[m]["excluded"] == len(test)
        assert rep.pass_at_5[m]["best_of"] <= rep.pass_at_5[m]["median_of"] + 1e-9
    assert rep.confidence_pearson is None or -1 <= rep.confidence_pearson <= 1
    assert rep.to_json() == rep.to_json()
    assert not math.isnan(rep.metrics["cycles"]["mape"])
