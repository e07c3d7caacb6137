"""Static training, prediction and checkpoints for the cost model."""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from dfcost.codec import DigitCode, DigitDistribution, Tokenizer, decode_beam, encode_value
from dfcost.ir import RuntimeInput, Workload
from dfcost.model import (
    FEATURE_FIELDS,
    METRICS,
    CostModel,
    EncodedWorkload,
    ModelConfig,
    batch_contexts,
    encode_workload,
    forward,
    make_batch,
    model_tokenizer,
)
from dfcost.synth import DatasetRecord, rename_locals

CHECKPOINT_FORMAT = "dfcost-checkpoint"
CHECKPOINT_VERSION = 1


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    grad_clip: float = 1.0
    seed: int = 0
    aux_weight: float = 0.25
    reg_weight: float = 1.0
    # stop starting new epochs after this many seconds
    time_budget_s: Optional[float] = None
    # per-epoch chance that a record is shown with renamed arrays/temporaries
    rename_prob: float = 0.0


@dataclass
class TrainResult:
    epoch_losses: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# targets


def metric_integer(labels, metric: str) -> int:
    """Integer code target: milli-power, deci-area, raw ff and cycles."""
    if metric == "power":
        return labels.power_milli
    if metric == "area":
        return labels.area_deci
    if metric == "ff":
        return labels.ff
    if metric == "cycles":
        return labels.cycles
    raise KeyError(metric)


def integer_to_metric(v: float, metric: str) -> float:
    if metric == "power":
        return v / 1000
    if metric == "area":
        return v / 10
    return v


def metric_value(labels, metric: str) -> float:
    return float(getattr(labels, metric))


@dataclass
class Example:
    encoded: EncodedWorkload
    digits: dict          # metric -> tuple of digits
    feature_digits: Optional[tuple]  # (fields, width) or None for direct records
    values: dict          # metric -> float label in natural units


def prepare_examples(model: CostModel, records: Sequence[DatasetRecord]) -> list[Example]:
    cfg = model.cfg
    tok = model_tokenizer(model)
    out = []
    for rec in records:
        digits = {m: encode_value(metric_integer(rec.labels, m), cfg.base, cfg.width(m)).digits for m in METRICS}
        feats = None
        if rec.format == "reasoning":
            feats = tuple(encode_value(getattr(rec.features, f), cfg.base, cfg.feature_width).digits
                          for f in FEATURE_FIELDS)
        values = {m: metric_value(rec.labels, m) for m in METRICS}
        out.append(Example(encode_workload(rec.workload, tok), digits, feats, values))
    return out


def set_regression_range(model: CostModel, records: Sequence[DatasetRecord]) -> None:
    vals = np.array([[metric_value(r.labels, m) for m in METRICS] for r in records], dtype=np.float64)
    model.reg_lo.copy_(torch.tensor(vals.min(0), dtype=torch.float32))
    model.reg_hi.copy_(torch.tensor(np.maximum(vals.max(0), vals.min(0) + 1e-6), dtype=torch.float32))


def _batch_loss(model: CostModel, examples: Sequence[Example], hyper: TrainConfig):
    batch = make_batch([e.encoded for e in examples], model.cfg.masked)
    ctx = batch_contexts(model, batch)
    losses = {}
    for m in METRICS:
        target = torch.tensor([e.digits[m] for e in examples], dtype=torch.long)
        logits = model.decode_logits(m, ctx[m], target, target.shape[1])
        losses[m] = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))
    total = sum(losses[m] for m in METRICS) / len(METRICS)
    if hyper.reg_weight > 0:
        lo, hi = model.reg_lo, model.reg_hi
        reg = 0.0
        for j, m in enumerate(METRICS):
            y = torch.tensor([e.values[m] for e in examples], dtype=torch.float32)
            y = ((y - lo[j]) / (hi[j] - lo[j])).clamp(0, 1)
            reg = reg + F.mse_loss(model.regressors[m](ctx[m]), y)
        losses["regression"] = reg / len(METRICS)
        total = total + hyper.reg_weight * losses["regression"]
    with_feats = [i for i, e in enumerate(examples) if e.feature_digits is not None]
    if hyper.aux_weight > 0 and with_feats:
        nf = len(FEATURE_FIELDS)
        c = ctx["features"][with_feats].repeat_interleave(nf, dim=0)
        fields = torch.arange(nf).repeat(len(with_feats))
        target = torch.tensor([d for i in with_feats for d in examples[i].feature_digits], dtype=torch.long)
        logits = model.feature_decoder(c, target, target.shape[1], field=fields)
        losses["features"] = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))
        total = total + hyper.aux_weight * losses["features"]
    return total, losses


def batch_order(examples: Sequence[Example], batch_size: int, rng: random.Random) -> list[list[int]]:
    """Shuffled batches of similar-length workloads (less padding)."""
    idx = list(range(len(examples)))
    rng.shuffle(idx)
    chunk = batch_size * 16
    batches = []
    for s in range(0, len(idx), chunk):
        part = sorted(idx[s:s + chunk], key=lambda i: examples[i].encoded.segmap.length)
        batches += [part[k:k + batch_size] for k in range(0, len(part), batch_size)]
    rng.shuffle(batches)
    return batches


def train_static(model: CostModel, dataset: Sequence[DatasetRecord], hyper: TrainConfig = TrainConfig(),
                 examples: Optional[list[Example]] = None,
                 on_epoch: Optional[Callable[[int, float], None]] = None):
    """Minimize mean digit cross-entropy over the four metrics.

    Regression heads and the reasoning-feature head train alongside on the
    same trunk. Returns (model, TrainResult).
    """
    if not dataset:
        raise EmptyDataset("no training records")
    torch.manual_seed(hyper.seed)
    rng = random.Random(hyper.seed)
    set_regression_range(model, dataset)
    examples = examples if examples is not None else prepare_examples(model, dataset)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
    steps_per_epoch = math.ceil(len(examples) / hyper.batch_size)
    total_steps = max(1, hyper.epochs * steps_per_epoch)

    def lr_at(step: int) -> float:
        if step < hyper.warmup_steps:
            return hyper.lr * (step + 1) / hyper.warmup_steps
        frac = (step - hyper.warmup_steps) / max(1, total_steps - hyper.warmup_steps)
        return hyper.lr * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))

    result = TrainResult()
    start = time.perf_counter()
    aug_rng = random.Random(f"{hyper.seed}:rename")
    tok = model_tokenizer(model)
    model.train()
    for epoch in range(hyper.epochs):
        if hyper.time_budget_s is not None and time.perf_counter() - start > hyper.time_budget_s:
            break
        shown = examples
        if hyper.rename_prob > 0:
            shown = [replace(e, encoded=encode_workload(rename_locals(rec.workload, aug_rng), tok))
                     if aug_rng.random() < hyper.rename_prob else e
                     for e, rec in zip(examples, dataset)]
        running, count = 0.0, 0
        for batch in batch_order(examples, hyper.batch_size, rng):
            for g in opt.param_groups:
                g["lr"] = lr_at(result.steps)
            loss, _ = _batch_loss(model, [shown[i] for i in batch], hyper)
            opt.zero_grad()
            loss.backward()
            if hyper.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, hyper.grad_clip)
            opt.step()
            result.steps += 1
            running += loss.item() * len(batch)
            count += len(batch)
        result.epoch_losses.append(running / count)
        if on_epoch is not None:
            on_epoch(epoch, result.epoch_losses[-1])
    model.eval()
    result.seconds = time.perf_counter() - start
    return model, result


# ---------------------------------------------------------------------------
# prediction


@dataclass
class MetricPrediction:
    value: float
    code: DigitCode
    confidence: float
    regression: float
    samples: list = field(default_factory=list)
    distribution: Optional[DigitDistribution] = None


def _step_fn(model: CostModel, metric: str, ctx: torch.Tensor):
    def step(prefixes):
        t = len(prefixes[0])
        prefix = torch.tensor(prefixes, dtype=torch.long).reshape(len(prefixes), t)
        with torch.no_grad():
            logits = model.decode_logits(metric, ctx.expand(len(prefixes), -1), prefix, t + 1)[:, -1]
        return torch.softmax(logits.double(), dim=-1).numpy()
    return step


def _sample(model: CostModel, metric: str, ctx: torch.Tensor, n: int, gen: torch.Generator) -> list[int]:
    width = model.cfg.width(metric)
    prefix = torch.zeros((n, 0), dtype=torch.long)
    with torch.no_grad():
        for t in range(width):
            logits = model.decode_logits(metric, ctx.expand(n, -1), prefix, t + 1)[:, -1]
            d = torch.multinomial(torch.softmax(logits.double(), dim=-1), 1, generator=gen)
            prefix = torch.cat([prefix, d], dim=1)
    base = model.cfg.base
    return [DigitCode(base, width, tuple(int(x) for x in row)).value for row in prefix]


def predict(model: CostModel, workload: Workload, input: Optional[RuntimeInput] = None,
            beam_width: int = 1, samples: int = 1, seed: int = 0,
            tokenizer: Optional[Tokenizer] = None) -> dict:
    """Per-metric predictions; cycles is omitted when no input is available."""
    if input is not None:
        workload = replace(workload, input=input)
    elif workload.input is None and not workload.input_symbols:
        workload = replace(workload, input=RuntimeInput())
    has_input = workload.input is not None
    enc = encode_workload(workload, tokenizer or model_tokenizer(model), include_data=has_input)
    out = forward(model, enc.stream, enc.segmap, enc.mask)
    gen = torch.Generator().manual_seed(seed)
    preds = {}
    for j, m in enumerate(METRICS):
        if m == "cycles" and not has_input:
            continue
        ctx = out.contexts[m].unsqueeze(0)
        best = decode_beam(_step_fn(model, m, ctx), beam_width, model.cfg.width(m), batched=True)[0]
        lo, hi = float(model.reg_lo[j]), float(model.reg_hi[j])
        p = MetricPrediction(
            value=integer_to_metric(best.code.value, m),
            code=best.code,
            confidence=best.confidence,
            regression=lo + out.regression[m] * (hi - lo),
            distribution=out.distributions[m] if m == "cycles" else None,
        )
        if samples > 1:
            p.samples = [integer_to_metric(v, m) for v in _sample(model, m, ctx, samples, gen)]
        preds[m] = p
    return preds


@torch.no_grad()
def predict_batch(model: CostModel, examples: Sequence[Example], batch_size: int = 32) -> dict:
    """Greedy digit values, final-digit confidences and regression values
    for many examples via the batched path. Returns metric -> dict of arrays."""
    out = {m: {"value": [], "confidence": [], "regression": []} for m in METRICS}
    for s in range(0, len(examples), batch_size):
        part = examples[s:s + batch_size]
        ctx = batch_contexts(model, make_batch([e.encoded for e in part], model.cfg.masked))
        for j, m in enumerate(METRICS):
            width = model.cfg.width(m)
            prefix = torch.zeros((len(part), 0), dtype=torch.long)
            conf = None
            for t in range(width):
                logits = model.decode_logits(m, ctx[m], prefix, t + 1)[:, -1]
                p = torch.softmax(logits.double(), dim=-1)
                conf, d = p.max(dim=-1)
                prefix = torch.cat([prefix, d.unsqueeze(1)], dim=1)
            for row in prefix.tolist():
                out[m]["value"].append(integer_to_metric(DigitCode(model.cfg.base, width, tuple(row)).value, m))
            out[m]["confidence"] += conf.tolist()
            lo, hi = float(model.reg_lo[j]), float(model.reg_hi[j])
            out[m]["regression"] += (lo + model.regressors[m](ctx[m]) * (hi - lo)).tolist()
    return {m: {k: np.asarray(v) for k, v in d.items()} for m, d in out.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CostModel, path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocabulary": model_tokenizer(model).to_dict(),
        "state": model.state_dict(),
    }, path)


def load_checkpoint(path) -> CostModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob['version']}")
    cfg = ModelConfig.from_dict(blob["config"])
    Tokenizer.from_dict(blob["vocabulary"])
    model = CostModel(cfg)
    model.load_state_dict(blob["state"])
    model.eval()
    return model
