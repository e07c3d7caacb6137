"""Metrics, evaluation reports and the ablation harness."""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from dfcost.calibrate import CalibConfig, calibrate_loop, cycles_mape
from dfcost.codec import encode_value
from dfcost.ir import RuntimeInput, Workload
from dfcost.model import METRICS, CostModel, init_model, make_config
from dfcost.oracle import evaluate_cycles
from dfcost.synth import DatasetRecord, GenConfig, build_dataset
from dfcost.train import TrainConfig, predict, predict_batch, prepare_examples, train_static

REPORT_SCHEMA = "eval_report.schema.json"


class EmptyInput(ValueError):
    pass


class ZeroVariance(ValueError):
    pass


class WrongSampleCount(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def _pairs(preds, truths):
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise EmptyInput("no predictions")
    return p, t


def mape_with_count(preds, truths) -> tuple[float, int]:
    """(MAPE in percent, number of zero-truth pairs excluded)."""
    p, t = _pairs(preds, truths)
    keep = t != 0
    if not keep.any():
        raise EmptyInput("every truth is zero")
    return float(np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep])) * 100), int((~keep).sum())


def mape(preds, truths) -> float:
    return mape_with_count(preds, truths)[0]


def mse(preds, truths) -> float:
    p, t = _pairs(preds, truths)
    return float(np.mean((p - t) ** 2))


def confidence_error_correlation(confidences, squared_errors) -> float:
    c = np.asarray(confidences, dtype=np.float64)
    e = np.asarray(squared_errors, dtype=np.float64)
    if c.shape != e.shape:
        raise ValueError("length mismatch")
    if c.size < 3:
        raise ValueError("need at least 3 pairs")
    if c.std() == 0 or e.std() == 0:
        raise ZeroVariance("a sequence is constant")
    return float(np.clip(np.corrcoef(c, e)[0, 1], -1.0, 1.0))


@dataclass(frozen=True)
class EdgeReport:
    edge_mape: Optional[float]
    central_mape: Optional[float]
    edge_count: int
    central_count: int
    lower: float
    upper: float

    @property
    def ratio(self) -> Optional[float]:
        if self.edge_mape is None or not self.central_mape:
            return None
        return self.edge_mape / self.central_mape


def edge_error_report(preds, truths, train_labels, lower_pct: float = 5.0,
                      upper_pct: float = 95.0) -> EdgeReport:
    """MAPE split into edge (outside the training percentile band) and central bins."""
    p, t = _pairs(preds, truths)
    lo, hi = np.percentile(np.asarray(train_labels, dtype=np.float64), [lower_pct, upper_pct])
    usable = t != 0
    edge = usable & ((t < lo) | (t > hi))
    central = usable & ~edge

    def bin_mape(sel):
        return None if not sel.any() else float(np.mean(np.abs(p[sel] - t[sel]) / np.abs(t[sel])) * 100)

    return EdgeReport(bin_mape(edge), bin_mape(central), int(edge.sum()), int(central.sum()), float(lo), float(hi))


def pass_at_k(samples_per_item: Sequence[Sequence[float]], truths, k: int = 5) -> tuple[float, float]:
    """(best-of-k MAPE, median-of-k MAPE)."""
    t = np.asarray(truths, dtype=np.float64)
    if len(samples_per_item) != len(t):
        raise ValueError("one sample list per truth")
    if any(len(s) != k for s in samples_per_item):
        raise WrongSampleCount(f"every item needs exactly {k} samples")
    s = np.asarray(samples_per_item, dtype=np.float64)
    best = s[np.arange(len(t)), np.argmin(np.abs(s - t[:, None]), axis=1)]
    return mape(best, t), mape(np.median(s, axis=1), t)


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)        # metric -> {mape, mse, count, excluded}
    edge: dict = field(default_factory=dict)           # metric -> EdgeReport fields
    regression: dict = field(default_factory=dict)     # same as metrics/edge for the regression head
    confidence_pearson: Optional[float] = None
    confidence_metric: str = "ff"
    pass_at_5: dict = field(default_factory=dict)      # metric -> {best_of, median_of}
    ablation: dict = field(default_factory=dict)       # arm -> {on, off, delta}
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def report_schema() -> dict:
    return json.loads(resources.files("dfcost").joinpath(REPORT_SCHEMA).read_text(encoding="utf-8"))


def validate_report(report) -> None:
    import jsonschema

    data = report.to_dict() if isinstance(report, EvalReport) else report
    jsonschema.validate(json.loads(json.dumps(data)), report_schema())


def _metric_block(pred, truth) -> dict:
    m, excluded = mape_with_count(pred, truth)
    return {"mape": m, "mse": mse(pred, truth), "count": int(len(truth)), "excluded": excluded}


def evaluate_model(model: CostModel, test: Sequence[DatasetRecord], train: Sequence[DatasetRecord],
                   samples: int = 0, seed: int = 0) -> EvalReport:
    """Digit-head and regression-head errors on ``test``; edge bins from ``train`` labels."""
    ex = prepare_examples(model, test)
    out = predict_batch(model, ex)
    rep = EvalReport(meta={"test_records": len(test), "train_records": len(train)})
    for m in METRICS:
        truth = np.array([e.values[m] for e in ex])
        train_labels = [getattr(r.labels, m) for r in train]
        rep.metrics[m] = _metric_block(out[m]["value"], truth)
        rep.regression[m] = _metric_block(out[m]["regression"], truth)
        rep.edge[m] = asdict(edge_error_report(out[m]["value"], truth, train_labels))
        rep.regression[m]["edge"] = asdict(edge_error_report(out[m]["regression"], truth, train_labels))
    cm = rep.confidence_metric
    truth = np.array([e.values[cm] for e in ex])
    try:
        rep.confidence_pearson = confidence_error_correlation(out[cm]["confidence"], (out[cm]["value"] - truth) ** 2)
    except (ZeroVariance, ValueError):
        rep.confidence_pearson = None
    if samples > 1:
        for m in METRICS:
            sets, truths = [], []
            for k, rec in enumerate(test):
                preds = predict(model, rec.workload, beam_width=1, samples=samples, seed=seed + k)
                sets.append(preds[m].samples)
                truths.append(getattr(rec.labels, m))
            best, med = pass_at_k(sets, truths, k=samples)
            rep.pass_at_5[m] = {"best_of": best, "median_of": med}
    return rep


# ---------------------------------------------------------------------------
# data helpers


def workload_group(record_id: str) -> str:
    """Records that share a workload (input variants) share a group."""
    return record_id.rsplit("-", 1)[0]


def split_records(records: Sequence[DatasetRecord], test_fraction: float, seed: int):
    """Held-out split by workload so input variants never straddle the split."""
    groups = sorted({workload_group(r.id) for r in records})
    random.Random(seed).shuffle(groups)
    test_groups = set(groups[:round(len(groups) * test_fraction)])
    train = [r for r in records if workload_group(r.id) not in test_groups]
    test = [r for r in records if workload_group(r.id) in test_groups]
    return train, test


def shifted_states(records: Sequence[DatasetRecord], lo: float, hi: float, base: int,
                   seed: int, per_workload: int = 1, width: int = 6) -> list[tuple[Workload, RuntimeInput, int]]:
    """Inputs drawn from [ceil(lo*base), floor(hi*base)] for every workload
    with input symbols; states whose cycles overflow ``width`` are dropped."""
    rng = random.Random(seed)
    seen, out = set(), []
    for rec in records:
        g = workload_group(rec.id)
        w = rec.workload
        if g in seen or not w.input_symbols:
            continue
        seen.add(g)
        for _ in range(per_workload):
            inp = RuntimeInput(tuple((s, rng.randint(math.ceil(lo * base), math.floor(hi * base)))
                                     for s in w.input_symbols))
            truth = evaluate_cycles(w, inp)
            try:
                encode_value(truth, 10, width)
            except ValueError:
                continue
            out.append((replace(w, input=inp), inp, truth))
    return out


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationConfig:
    n_records: int = 2000
    seed: int = 0
    test_fraction: float = 0.2
    model: dict = field(default_factory=dict)      # ModelConfig overrides
    train: dict = field(default_factory=dict)      # TrainConfig overrides
    calibrate: dict = field(default_factory=dict)  # CalibConfig overrides
    arms: tuple = ("encoding", "head", "dpo", "mask")
    shift: tuple = (1.5, 3.0)
    calib_states: int = 200
    format: str = "reasoning"


def _train_arm(cfg: AblationConfig, train, **model_overrides) -> CostModel:
    kw = dict(cfg.model)
    kw.update(model_overrides)
    isolate = kw.pop("isolate", True)
    model = init_model(make_config(isolate=isolate, **kw), cfg.seed)
    train_static(model, train, replace(TrainConfig(seed=cfg.seed), **cfg.train))
    return model


def _mapes(model: CostModel, test) -> dict:
    ex = prepare_examples(model, test)
    out = predict_batch(model, ex)
    return {m: mape(out[m]["value"], [e.values[m] for e in ex]) for m in METRICS}


def _paired(on: dict, off: dict) -> dict:
    return {"on": on, "off": off, "delta": {k: off[k] - on[k] for k in on}}


def run_ablation(cfg: AblationConfig, records: Optional[Sequence[DatasetRecord]] = None) -> EvalReport:
    """Train each arm under identical seeds and budgets; report paired deltas
    as (off − on), so a positive delta means the component helps."""
    if records is None:
        records = list(build_dataset(GenConfig(seed=cfg.seed, format=cfg.format), cfg.n_records))
    train, test = split_records(records, cfg.test_fraction, cfg.seed)
    base = _train_arm(cfg, train)
    report = evaluate_model(base, test, train)
    report.meta.update({"seed": cfg.seed, "n_records": len(records), "arms": list(cfg.arms)})
    base_mapes = {m: report.metrics[m]["mape"] for m in METRICS}
    for arm in cfg.arms:
        if arm == "encoding":
            off = _mapes(_train_arm(cfg, train, isolate=False, magnitude=False), test)
            report.ablation[arm] = _paired(base_mapes, off)
        elif arm == "mask":
            off = _mapes(_train_arm(cfg, train, masked=False), test)
            report.ablation[arm] = _paired(base_mapes, off)
        elif arm == "head":
            off = {m: report.regression[m]["mape"] for m in METRICS}
            on_edge = {m: report.edge[m]["edge_mape"] for m in METRICS}
            off_edge = {m: report.regression[m]["edge"]["edge_mape"] for m in METRICS}
            report.ablation[arm] = _paired(base_mapes, off)
            report.ablation[arm]["edge"] = {"on": on_edge, "off": off_edge}
        elif arm == "dpo":
            lo, hi = cfg.shift
            stream = shifted_states(train, lo, hi, 32, cfg.seed + 1, per_workload=4)[:cfg.calib_states]
            held = shifted_states(test, lo, hi, 32, cfg.seed + 2)
            before = cycles_mape(base, held)
            ccfg = replace(CalibConfig(seed=cfg.seed), **cfg.calibrate)
            calibrate_loop(base, [(w, i) for w, i, _ in stream], cfg=ccfg)
            after = cycles_mape(base, held)
            report.ablation[arm] = _paired({"cycles": after}, {"cycles": before})
        else:
            raise ValueError(f"unknown ablation arm {arm!r}")
    validate_report(report)
    return report
