"""Online calibration of the cycles pathway from profiler feedback.

Each step predicts cycles for a new (workload, input) state, profiles the
truth, stores a (truth, prediction) preference pair in a sliding window and
applies a DPO update on a minibatch drawn from that window. A frozen copy of
the static model is the reference policy.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from dfcost.codec import DigitCode, encode_value
from dfcost.ir import RuntimeInput, Workload
from dfcost.model import (
    CostModel,
    batch_contexts,
    clone_model,
    encode_workload,
    local_encodings,
    make_batch,
    model_tokenizer,
)
from dfcost.oracle import evaluate_cycles
from dfcost.train import predict

Oracle = Callable[[Workload, RuntimeInput], int]


class EmptyStream(ValueError):
    pass


class Skip:
    """Returned when the prediction already equals the profiled value."""

    def __repr__(self) -> str:
        return "Skip"


SKIP = Skip()


@dataclass(frozen=True)
class PreferenceTriplet:
    workload: Workload
    input: RuntimeInput
    y_w: DigitCode
    y_l: DigitCode

    def __post_init__(self) -> None:
        if (self.y_w.base, self.y_w.width) != (self.y_l.base, self.y_l.width):
            raise ValueError("preferred and dispreferred codes differ in base or width")
        if self.y_w.digits == self.y_l.digits:
            raise ValueError("preferred and dispreferred codes are equal")


class ReplayBuffer:
    """FIFO window of the most recent ``capacity`` triplets."""

    def __init__(self, capacity: int = 64, minibatch: int = 8) -> None:
        if capacity < 1 or minibatch < 1:
            raise ValueError("capacity and minibatch must be >= 1")
        self.capacity = capacity
        self.minibatch = minibatch
        self._items: deque = deque(maxlen=capacity)

    def push(self, item) -> None:
        self._items.append(item)

    def __len__(self) -> int:
        return len(self._items)

    def items(self) -> list:
        return list(self._items)

    def sample(self, rng: random.Random) -> list:
        """Uniform without replacement; at most ``minibatch`` items."""
        return rng.sample(list(self._items), min(self.minibatch, len(self._items)))


def make_preference(model: CostModel, workload: Workload, input: RuntimeInput,
                    oracle: Oracle = evaluate_cycles):
    """(truth, beam-1 prediction) pair, or SKIP when they agree."""
    truth = oracle(workload, input)
    width = model.cfg.width("cycles")
    y_w = encode_value(truth, model.cfg.base, width)
    y_l = predict(model, workload, input, beam_width=1)["cycles"].code
    if y_l.digits == y_w.digits:
        return SKIP
    return PreferenceTriplet(workload, input, y_w, y_l)


# ---------------------------------------------------------------------------
# loss


def _triplet_batch(model: CostModel, triplets: Sequence[PreferenceTriplet]):
    tok = model_tokenizer(model)
    return make_batch([encode_workload(replace(t.workload, input=t.input), tok) for t in triplets], model.cfg.masked)


def sequence_logprobs(model: CostModel, triplets: Sequence[PreferenceTriplet], batch=None, local=None):
    """(log π(y_w), log π(y_l)) per triplet, each shape (n,)."""
    batch = batch if batch is not None else _triplet_batch(model, triplets)
    if local is None:
        with torch.no_grad():
            local = local_encodings(model, batch)
    ctx = batch_contexts(model, batch, local=local, metrics=("cycles",))["cycles"]
    yw = torch.tensor([t.y_w.digits for t in triplets], dtype=torch.long)
    yl = torch.tensor([t.y_l.digits for t in triplets], dtype=torch.long)
    return model.code_logprob("cycles", ctx, yw), model.code_logprob("cycles", ctx, yl)


def dpo_objective(model: CostModel, ref_model: CostModel, triplets: Sequence[PreferenceTriplet],
                  beta: float = 0.1, batch=None):
    """Differentiable mean of -log σ(β·Δ); returns (loss, Δ per triplet)."""
    batch = batch if batch is not None else _triplet_batch(model, triplets)
    with torch.no_grad():
        local = local_encodings(model, batch)
        ref_w, ref_l = sequence_logprobs(ref_model, triplets, batch, local_encodings(ref_model, batch))
    pol_w, pol_l = sequence_logprobs(model, triplets, batch, local)
    delta = (pol_w - ref_w) - (pol_l - ref_l)
    return -F.logsigmoid(beta * delta).mean(), delta


def dpo_loss(model: CostModel, ref_model: CostModel, triplet, beta: float = 0.1):
    """Loss value and its gradients w.r.t. the cycles-pathway parameters.

    ``triplet`` may be one PreferenceTriplet or a sequence of them.
    Returns (loss, {parameter name: gradient}).
    """
    triplets = [triplet] if isinstance(triplet, PreferenceTriplet) else list(triplet)
    loss, _ = dpo_objective(model, ref_model, triplets, beta)
    names = {id(p): n for n, p in model.named_parameters()}
    params = model.cycles_parameters()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {names[id(p)]: (g if g is not None else torch.zeros_like(p)) for p, g in zip(params, grads)}
    return loss.item(), out


def preference_margin(model: CostModel, triplet: PreferenceTriplet) -> float:
    """log π(y_w) − log π(y_l) under ``model``."""
    with torch.no_grad():
        w, l = sequence_logprobs(model, [triplet])
    return float(w[0] - l[0])


# ---------------------------------------------------------------------------
# loop


@dataclass(frozen=True)
class CalibConfig:
    beta: float = 0.1
    capacity: int = 64
    minibatch: int = 8
    iterations: int = 10
    lr: float = 1e-3
    # states drawn (predicted, profiled, pushed) per iteration
    states_per_iteration: int = 1
    # optimizer steps on fresh minibatches per iteration
    steps_per_iteration: int = 1
    # refresh the reference policy every R iterations; None = never
    ref_refresh: Optional[int] = None
    seed: int = 0


@dataclass
class TraceRow:
    iteration: int
    buffer: int
    loss: Optional[float]
    mape: Optional[float]
    skipped: int = 0

    def to_json(self) -> str:
        return json.dumps({"iteration": self.iteration, "buffer": self.buffer, "loss": self.loss,
                           "mape": self.mape, "skipped": self.skipped}, sort_keys=True)


def cycles_mape(model: CostModel, eval_set: Sequence[tuple[Workload, RuntimeInput, int]]) -> float:
    errs = []
    for w, inp, truth in eval_set:
        pred = predict(model, w, inp, beam_width=1)["cycles"].value
        errs.append(abs(pred - truth) / truth)
    return 100.0 * float(np.mean(errs))


def calibrate_loop(model: CostModel, stream: Iterable[tuple[Workload, RuntimeInput]],
                   oracle: Oracle = evaluate_cycles, cfg: CalibConfig = CalibConfig(),
                   eval_set: Optional[Sequence[tuple[Workload, RuntimeInput, int]]] = None,
                   trace_path=None, mape_fn: Callable = cycles_mape):
    """Calibrate ``model`` in place. Returns (model, list of TraceRow).

    The trace starts with an iteration-0 baseline row; ``mape`` is None
    when no eval set is given.
    """
    it = iter(stream)
    try:
        first = next(it)
    except StopIteration:
        raise EmptyStream("calibration stream is empty") from None

    def states():
        yield first
        yield from it

    source = states()
    rng = random.Random(cfg.seed)
    torch.manual_seed(cfg.seed)
    ref = clone_model(model)
    for p in ref.parameters():
        p.requires_grad_(False)
    trainable = model.cycles_parameters()
    frozen = [p for p in model.parameters() if all(p is not q for q in trainable)]
    saved_flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)
    opt = torch.optim.Adam(trainable, lr=cfg.lr)
    model.eval()
    buffer = ReplayBuffer(cfg.capacity, cfg.minibatch)
    trace = [TraceRow(0, 0, None, mape_fn(model, eval_set) if eval_set else None)]
    try:
        for k in range(1, cfg.iterations + 1):
            skipped = 0
            exhausted = False
            for _ in range(cfg.states_per_iteration):
                try:
                    w, inp = next(source)
                except StopIteration:
                    exhausted = True
                    break
                t = make_preference(model, w, inp, oracle)
                if t is SKIP:
                    skipped += 1
                else:
                    buffer.push(t)
            losses = []
            if len(buffer):
                # eval mode: the policy and the reference must see the same deterministic network
                for _ in range(cfg.steps_per_iteration):
                    loss, _ = dpo_objective(model, ref, buffer.sample(rng), cfg.beta)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    losses.append(loss.item())
            if cfg.ref_refresh and k % cfg.ref_refresh == 0:
                ref.load_state_dict(model.state_dict())
            mape = mape_fn(model, eval_set) if eval_set else None
            trace.append(TraceRow(k, len(buffer), float(np.mean(losses)) if losses else None, mape, skipped))
            if exhausted:
                break
    finally:
        for p, flag in zip(frozen, saved_flags):
            p.requires_grad_(flag)
        model.eval()
    if trace_path is not None:
        write_trace(trace, trace_path)
    return model, trace


def write_trace(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in trace:
            fh.write(row.to_json() + "\n")
