"""Segment-local transformer with a masked global mixing layer and digit heads.

Phase 1 encodes each segment (graph, one per operator, params, data) on its
own. Phase 2 is a single attention layer over all tokens where operator
segments never see each other and Class I operators never see the data
segment. Static metrics pool phase-1 encodings of the non-data segments, so
they cannot depend on runtime input; cycles pool the phase-2 outputs.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dfcost.codec import LOG_FLOOR, DigitDistribution, TokenStream, Tokenizer, default_tokenizer
from dfcost.ir import OpClass, SegmentMap, Span, Workload, classify_operator, segment_texts

METRICS = ("power", "area", "ff", "cycles")
STATIC_METRICS = ("power", "area", "ff")
FEATURE_FIELDS = ("module_count", "mux_count", "mul_count", "add_count", "ff_count", "mem_ports")
KIND_G, KIND_OP, KIND_PARAMS, KIND_DATA = range(4)
GATE_SCALE = 1 / 32


class SegmentMapMismatch(ValueError):
    pass


class StructureChanged(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 139
    embed_dim: int = 128
    local_layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    base: int = 10
    widths: tuple[int, int, int, int] = (4, 4, 4, 6)
    feature_width: int = 4
    temperature: float = 1.0
    max_positions: int = 512
    max_places: int = 8
    # brace nesting depth embedding, computed within each segment
    max_depth: int = 8
    depth: bool = True
    # training-time dropout on embeddings and feed-forward branches
    dropout: float = 0.0
    # log-magnitude channel on digit tokens (needs isolated digit runs)
    magnitude: bool = True
    isolate: bool = True
    # separation and inter-operator masks in the global layer
    masked: bool = True

    def __post_init__(self) -> None:
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if len(self.widths) != len(METRICS):
            raise ValueError("one width per metric")

    def width(self, metric: str) -> int:
        return self.widths[METRICS.index(metric)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


# ---------------------------------------------------------------------------
# inputs


def segment_kind(label: str) -> int:
    if label == "G":
        return KIND_G
    if label == "PARAMS":
        return KIND_PARAMS
    if label == "DATA":
        return KIND_DATA
    if label.startswith("OP"):
        return KIND_OP
    raise SegmentMapMismatch(f"unknown segment label {label!r}")


@dataclass(frozen=True)
class SeparationMask:
    """Segment-level factorization of the token mask; (a, b) blocked iff one
    is a Class I operator segment and the other is the data segment."""

    segmap: SegmentMap
    blocked_pairs: frozenset
    classes: tuple = ()

    def blocked(self, a: int, b: int) -> bool:
        return (a, b) in self.blocked_pairs

    def dense(self) -> np.ndarray:
        n = self.segmap.length
        out = np.zeros((n, n), dtype=bool)
        spans = self.segmap.spans
        for a, b in self.blocked_pairs:
            out[spans[a].start:spans[a].end, spans[b].start:spans[b].end] = True
        return out


def build_separation_mask(segmap: SegmentMap, classes: Sequence[OpClass]) -> SeparationMask:
    labels = segmap.labels()
    data = [k for k, lab in enumerate(labels) if lab == "DATA"]
    ops = [k for k, lab in enumerate(labels) if lab.startswith("OP")]
    if len(ops) != len(classes):
        raise SegmentMapMismatch(f"{len(ops)} operator spans but {len(classes)} classes")
    pairs = set()
    for k, cls in zip(ops, classes):
        if cls is OpClass.I:
            for d in data:
                pairs.add((k, d))
                pairs.add((d, k))
    return SeparationMask(segmap, frozenset(pairs), tuple(classes))


def allowed_segments(segmap: SegmentMap, mask: Optional[SeparationMask], decouple: bool = True) -> np.ndarray:
    """Segment-pair attention permissions for the global layer."""
    kinds = [segment_kind(lab) for lab in segmap.labels()]
    n = len(kinds)
    allow = np.ones((n, n), dtype=bool)
    for a in range(n):
        for b in range(n):
            if a != b and decouple and kinds[a] == KIND_OP and kinds[b] == KIND_OP:
                allow[a, b] = False
            if mask is not None and mask.blocked(a, b):
                allow[a, b] = False
    return allow


@dataclass(frozen=True)
class EncodedWorkload:
    stream: TokenStream
    segmap: SegmentMap
    mask: SeparationMask

    @property
    def kinds(self) -> tuple[int, ...]:
        return tuple(segment_kind(lab) for lab in self.segmap.labels())


def encode_workload(w: Workload, tokenizer: Optional[Tokenizer] = None,
                    include_data: bool = True) -> EncodedWorkload:
    """Tokenize segment by segment so spans tile the stream exactly."""
    tokenizer = tokenizer or default_tokenizer()
    toks, places, numbers, spans = [], [], [], []
    for label, text in segment_texts(w):
        if label == "DATA" and not include_data:
            continue
        ts = tokenizer.tokenize(text)
        spans.append(Span(label, len(toks), len(toks) + len(ts.tokens)))
        toks += ts.tokens
        places += ts.places
        numbers += ts.numbers
    stream = TokenStream(tuple(toks), tokenizer.version, tuple(places), tuple(numbers))
    segmap = SegmentMap(tuple(spans))
    classes = [classify_operator(op) for op in w.operators]
    return EncodedWorkload(stream, segmap, build_separation_mask(segmap, classes))


def _check_tiles(stream: TokenStream, segmap: SegmentMap) -> None:
    if not segmap.tiles(len(stream.tokens)):
        raise SegmentMapMismatch(f"segment map of length {segmap.length} does not tile {len(stream.tokens)} tokens")


def segment_hash(stream: TokenStream, span: Span) -> str:
    h = hashlib.sha1(span.label.encode())
    h.update(np.asarray(stream.tokens[span.start:span.end], dtype=np.int64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# layers


class Attention(nn.Module):
    """Multi-head self-attention; parameter layout mirrors nn.MultiheadAttention."""

    def __init__(self, d: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.dh = d // heads
        self.in_proj = nn.Linear(d, 3 * d)
        self.out_proj = nn.Linear(d, d)

    def project(self, x: torch.Tensor):
        q, k, v = self.in_proj(x).chunk(3, dim=-1)
        shape = x.shape[:-1] + (self.heads, self.dh)
        return tuple(t.reshape(shape).transpose(-3, -2) for t in (q, k, v))

    def merge(self, o: torch.Tensor) -> torch.Tensor:
        o = o.transpose(-3, -2)
        return self.out_proj(o.reshape(o.shape[:-2] + (-1,)))

    def forward(self, x: torch.Tensor, allowed: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, v = self.project(x)
        mask = None if allowed is None else allowed.unsqueeze(-3)
        return self.merge(F.scaled_dot_product_attention(q, k, v, attn_mask=mask))


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, d: int, heads: int, ff: int, dropout: float = 0.0) -> None:
        super().__init__()
        self.dropout = dropout
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.linear1 = nn.Linear(d, ff)
        self.linear2 = nn.Linear(ff, d)

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.linear2(F.gelu(self.linear1(self.norm2(x))))
        return x + F.dropout(h, self.dropout, self.training)

    def forward(self, x: torch.Tensor, allowed: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.feed_forward(x + self.attn(self.norm1(x), allowed))


class SegmentPool(nn.Module):
    """Segment summary: attention pooling plus a gated token sum."""

    def __init__(self, d: int) -> None:
        super().__init__()
        self.query = nn.Parameter(torch.randn(d) / math.sqrt(d))
        self.gate = nn.Linear(d, 1)
        self.proj = nn.Linear(2 * d, d)

    def forward(self, x: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        e = x @ self.query
        g = torch.sigmoid(self.gate(x)).squeeze(-1)
        if valid is not None:
            e = e.masked_fill(~valid, float("-inf"))
            g = g * valid
        att = (torch.softmax(e, dim=-1).unsqueeze(-1) * x).sum(-2)
        gated = (g.unsqueeze(-1) * x).sum(-2) * GATE_SCALE
        return F.gelu(self.proj(torch.cat([att, gated], dim=-1)))


class MetricHead(nn.Module):
    """Pools each allowed segment, then sums and maxes across segments."""

    def __init__(self, d: int) -> None:
        super().__init__()
        self.pool = SegmentPool(d)
        self.mix = nn.Linear(2 * d, d)

    def combine(self, seg: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """seg: (..., S, d) pooled segment vectors."""
        if valid is None:
            total, peak = seg.sum(-2), seg.max(-2).values
        else:
            v = valid.unsqueeze(-1)
            total = (seg * v).sum(-2)
            peak = seg.masked_fill(~v, float("-inf")).max(-2).values
        return F.gelu(self.mix(torch.cat([total, peak], dim=-1)))


class DigitDecoder(nn.Module):
    """GRU over digit positions, high order first, conditioned on a context."""

    def __init__(self, d: int, base: int, width: int, fields: int = 1) -> None:
        super().__init__()
        self.base = base
        self.width = width
        self.digit = nn.Embedding(base + 1, d)  # index ``base`` is the start symbol
        self.position = nn.Embedding(width, d)
        self.field = nn.Embedding(fields, d)
        self.init = nn.Linear(d, d)
        self.cell = nn.GRUCell(2 * d, d)
        self.hidden = nn.Linear(2 * d, d)
        self.out = nn.Linear(d, base)

    def forward(self, ctx: torch.Tensor, prefix: torch.Tensor, steps: int,
                field: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Logits (B, steps, base); position t is conditioned on prefix[:, :t]."""
        if field is not None:
            ctx = ctx + self.field(field)
        h = torch.tanh(self.init(ctx))
        prev = torch.full(ctx.shape[:1], self.base, dtype=torch.long)
        out = []
        for t in range(steps):
            x = torch.cat([self.digit(prev) + self.position.weight[t], ctx], dim=-1)
            h = self.cell(x, h)
            out.append(self.out(F.gelu(self.hidden(torch.cat([h, ctx], dim=-1)))))
            if t < prefix.shape[1]:
                prev = prefix[:, t]
        return torch.stack(out, dim=1)


class RegressionHead(nn.Module):
    def __init__(self, d: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, 1)

    def forward(self, ctx: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(F.gelu(self.fc1(ctx)))).squeeze(-1)


# ---------------------------------------------------------------------------
# model


class CostModel(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.token = nn.Embedding(cfg.vocab_size, d)
        self.place = nn.Embedding(cfg.max_places, d)
        self.position = nn.Embedding(cfg.max_positions, d)
        self.kind = nn.Embedding(4, d)
        self.magnitude = nn.Linear(1, d) if cfg.magnitude else None
        self.depth = nn.Embedding(cfg.max_depth, d) if cfg.depth else None
        tok = default_tokenizer(cfg.isolate)
        brace = torch.zeros(cfg.vocab_size, dtype=torch.long)
        brace[tok.stoi["{"]], brace[tok.stoi["}"]] = 1, -1
        self.register_buffer("brace", brace, persistent=False)
        self.local = nn.ModuleList([Block(d, cfg.heads, cfg.ff_dim, cfg.dropout) for _ in range(cfg.local_layers)])
        self.local_norm = nn.LayerNorm(d)
        self.mixer = Block(d, cfg.heads, cfg.ff_dim, cfg.dropout)
        self.mixer_norm = nn.LayerNorm(d)
        self.heads = nn.ModuleDict({m: MetricHead(d) for m in METRICS + ("features",)})
        self.decoders = nn.ModuleDict({m: DigitDecoder(d, cfg.base, cfg.width(m)) for m in METRICS})
        self.feature_decoder = DigitDecoder(d, cfg.base, cfg.feature_width, fields=len(FEATURE_FIELDS))
        self.regressors = nn.ModuleDict({m: RegressionHead(d) for m in METRICS})
        # min-max range of regression targets, set from training labels
        self.register_buffer("reg_lo", torch.zeros(len(METRICS)))
        self.register_buffer("reg_hi", torch.ones(len(METRICS)))

    # -- groups of parameters
    def cycles_parameters(self) -> list[nn.Parameter]:
        mods = [self.mixer, self.mixer_norm, self.heads["cycles"], self.decoders["cycles"]]
        return [p for m in mods for p in m.parameters()]

    # -- phase 1
    def embed(self, ids, places, numbers, kinds) -> torch.Tensor:
        """All arguments (..., n) long tensors; positions are within-segment."""
        n = ids.shape[-1]
        pos = torch.arange(n).clamp(max=self.cfg.max_positions - 1)
        x = self.token(ids) + self.place(places.clamp(max=self.cfg.max_places - 1)) + self.position(pos) + self.kind(kinds)
        if self.magnitude is not None:
            is_num = numbers >= 0
            mag = torch.log10(1.0 + numbers.clamp(min=0).to(x.dtype)) / 3.0
            x = x + self.magnitude(mag.unsqueeze(-1)) * is_num.unsqueeze(-1)
        if self.depth is not None:
            # a closing brace already belongs to the outer level
            step = self.brace[ids]
            depth = torch.cumsum(step, dim=-1) - step.clamp(min=0)
            x = x + self.depth(depth.clamp(0, self.cfg.max_depth - 1))
        return F.dropout(x, self.cfg.dropout, self.training)

    def encode_local(self, x: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        allowed = None
        if valid is not None:
            allowed = valid.unsqueeze(-2).expand(*valid.shape, valid.shape[-1])
        for blk in self.local:
            x = blk(x, allowed)
        return self.local_norm(x)

    # -- heads
    def pooled(self, metric: str, segs: list[torch.Tensor]) -> torch.Tensor:
        head = self.heads[metric]
        vecs = torch.stack([head.pool(s) for s in segs], dim=0)
        return head.combine(vecs)

    def decode_logits(self, metric: str, ctx: torch.Tensor, prefix: torch.Tensor, steps: int) -> torch.Tensor:
        return self.decoders[metric](ctx, prefix, steps) / self.cfg.temperature

    def code_logprob(self, metric: str, ctx: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        """Σ_j log p(digit_j | digits_<j), floored at 1e-12 per position; (B,)."""
        lsm = torch.log_softmax(self.decode_logits(metric, ctx, codes, codes.shape[1]), dim=-1)
        picked = lsm.gather(-1, codes.unsqueeze(-1)).squeeze(-1)
        return picked.clamp(min=LOG_FLOOR).sum(-1)


def make_config(isolate: bool = True, **kw) -> ModelConfig:
    """ModelConfig whose vocabulary matches the chosen tokenizer mode."""
    return ModelConfig(vocab_size=len(default_tokenizer(isolate)), isolate=isolate, **kw)


def init_model(cfg: ModelConfig, seed: int = 0) -> CostModel:
    if cfg.vocab_size < len(default_tokenizer(cfg.isolate)):
        raise ValueError(f"vocab_size {cfg.vocab_size} is smaller than the tokenizer vocabulary")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = CostModel(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    model.eval()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    d, f, base = cfg.embed_dim, cfg.ff_dim, cfg.base
    ln = 2 * d
    block = 2 * ln + (3 * d * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d)
    embed = (cfg.vocab_size + cfg.max_places + cfg.max_positions + 4) * d + (2 * d if cfg.magnitude else 0)
    embed += cfg.max_depth * d if cfg.depth else 0
    head = (d + (d + 1) + (2 * d * d + d)) + (2 * d * d + d)

    def decoder(width, fields=1):
        gru = 3 * d * 2 * d + 3 * d * d + 6 * d
        return (base + 1) * d + width * d + fields * d + (d * d + d) + gru + (2 * d * d + d) + (d * base + base)

    reg = (d * d + d) + (d + 1)
    n_heads = len(METRICS) + 1
    return (embed + cfg.local_layers * block + ln + block + ln + n_heads * head
            + sum(decoder(w) for w in cfg.widths) + decoder(cfg.feature_width, len(FEATURE_FIELDS))
            + len(METRICS) * reg)


# ---------------------------------------------------------------------------
# inference path: one segment at a time, blockwise global layer


@dataclass
class SegmentEntry:
    hash: str
    local: torch.Tensor  # (n, d) phase-1 output
    q: torch.Tensor      # (h, n, dh) global-layer projections
    k: torch.Tensor
    v: torch.Tensor


@dataclass
class SegmentCache:
    labels: tuple[str, ...] = ()
    entries: list = field(default_factory=list)
    allow: Optional[np.ndarray] = None
    scores: dict = field(default_factory=dict)  # (a, b) -> (h, n_a, n_b)


@dataclass
class RecomputeStats:
    local_tokens: int
    total_tokens: int
    score_blocks: int
    total_blocks: int
    score_elements: int
    total_elements: int

    @property
    def local_fraction(self) -> float:
        return self.local_tokens / max(1, self.total_tokens)

    @property
    def block_fraction(self) -> float:
        return self.score_elements / max(1, self.total_elements)


@dataclass
class ForwardOutput:
    contexts: dict            # metric -> (d,) tensor
    distributions: dict       # metric -> DigitDistribution along the greedy path
    regression: dict          # metric -> normalized scalar in (0, 1)
    local: list               # per-segment phase-1 outputs
    mixed: list               # per-segment phase-2 outputs


def _segment_tensors(stream: TokenStream, span: Span):
    sl = slice(span.start, span.end)
    ids = torch.tensor(stream.tokens[sl], dtype=torch.long)
    places = torch.tensor(stream.places[sl] if stream.places else [0] * len(span), dtype=torch.long)
    numbers = torch.tensor(stream.numbers[sl] if stream.numbers else [-1] * len(span), dtype=torch.long)
    kinds = torch.full_like(ids, segment_kind(span.label))
    return ids, places, numbers, kinds


def _encode_entry(model: CostModel, stream: TokenStream, span: Span) -> SegmentEntry:
    x = model.encode_local(model.embed(*_segment_tensors(stream, span)))
    q, k, v = model.mixer.attn.project(model.mixer.norm1(x))
    return SegmentEntry(segment_hash(stream, span), x, q, k, v)


def _mix_rows(model: CostModel, entries, allow, scores) -> list[torch.Tensor]:
    """Row-wise softmax over the allowed score blocks, then the FF sublayer."""
    attn = model.mixer.attn
    out = []
    for a, ea in enumerate(entries):
        cols = [b for b in range(len(entries)) if allow[a, b]]
        s = torch.cat([scores[(a, b)] for b in cols], dim=-1)
        p = torch.softmax(s, dim=-1)
        v = torch.cat([entries[b].v for b in cols], dim=-2)
        y = ea.local + attn.merge(p @ v)
        out.append(model.mixer_norm(model.mixer.feed_forward(y)))
    return out


def _score(model: CostModel, ea: SegmentEntry, eb: SegmentEntry) -> torch.Tensor:
    return ea.q @ eb.k.transpose(-1, -2) / math.sqrt(model.mixer.attn.dh)


def _greedy_distribution(model: CostModel, metric: str, ctx: torch.Tensor) -> DigitDistribution:
    width = model.cfg.width(metric)
    prefix = torch.zeros((1, 0), dtype=torch.long)
    rows = []
    for t in range(width):
        logits = model.decode_logits(metric, ctx.unsqueeze(0), prefix, t + 1)[0, -1]
        p = torch.softmax(logits.double(), dim=-1)
        rows.append(p.numpy())
        prefix = torch.cat([prefix, p.argmax().view(1, 1)], dim=1)
    return DigitDistribution(np.stack(rows))


def _heads(model: CostModel, segmap: SegmentMap, local: list, mixed: list) -> ForwardOutput:
    labels = segmap.labels()
    static_segs = [x for x, lab in zip(local, labels) if lab != "DATA"]
    contexts = {m: model.pooled(m, static_segs) for m in STATIC_METRICS + ("features",)}
    contexts["cycles"] = model.pooled("cycles", mixed)
    dists = {m: _greedy_distribution(model, m, contexts[m]) for m in METRICS}
    reg = {m: float(model.regressors[m](contexts[m])) for m in METRICS}
    return ForwardOutput(contexts, dists, reg, local, mixed)


@torch.no_grad()
def forward(model: CostModel, tokens: TokenStream, segmap: SegmentMap,
            mask: Optional[SeparationMask] = None, decouple: bool = True) -> ForwardOutput:
    """Full blockwise forward; see ``incremental_forward`` for reuse."""
    out, _, _ = incremental_forward(model, None, tokens, segmap, mask, decouple=decouple)
    return out


@torch.no_grad()
def incremental_forward(model: CostModel, old_cache: Optional[SegmentCache], new_tokens: TokenStream,
                        segmap: SegmentMap, mask: Optional[SeparationMask] = None, decouple: bool = True):
    """Forward reusing every cached segment whose content hash is unchanged.

    Returns (ForwardOutput, new SegmentCache, RecomputeStats).
    """
    _check_tiles(new_tokens, segmap)
    if not model.cfg.masked:
        mask, decouple = None, False
    labels = segmap.labels()
    if old_cache is not None and old_cache.labels and old_cache.labels != labels:
        raise StructureChanged(f"segments {old_cache.labels} -> {labels}")
    if old_cache is None or not old_cache.labels:
        old_cache = None
    allow = allowed_segments(segmap, mask, decouple)
    entries, changed = [], set()
    local_tokens = 0
    for a, span in enumerate(segmap.spans):
        h = segment_hash(new_tokens, span)
        if old_cache is not None and old_cache.entries[a].hash == h:
            entries.append(old_cache.entries[a])
        else:
            entries.append(_encode_entry(model, new_tokens, span))
            changed.add(a)
            local_tokens += len(span)
    scores = {}
    n_blocks = n_elems = tot_blocks = tot_elems = 0
    reuse = old_cache is not None and old_cache.allow is not None and np.array_equal(old_cache.allow, allow)
    for a in range(len(entries)):
        for b in range(len(entries)):
            if not allow[a, b]:
                continue
            size = len(segmap.spans[a]) * len(segmap.spans[b])
            tot_blocks += 1
            tot_elems += size
            if reuse and a not in changed and b not in changed:
                scores[(a, b)] = old_cache.scores[(a, b)]
            else:
                scores[(a, b)] = _score(model, entries[a], entries[b])
                n_blocks += 1
                n_elems += size
    mixed = _mix_rows(model, entries, allow, scores)
    out = _heads(model, segmap, [e.local for e in entries], mixed)
    cache = SegmentCache(labels, entries, allow, scores)
    stats = RecomputeStats(local_tokens, segmap.length, n_blocks, tot_blocks, n_elems, tot_elems)
    return out, cache, stats


def forward_workload(model: CostModel, w: Workload, tokenizer: Optional[Tokenizer] = None,
                     include_data: bool = True) -> ForwardOutput:
    enc = encode_workload(w, tokenizer or model_tokenizer(model), include_data=include_data)
    return forward(model, enc.stream, enc.segmap, enc.mask)


def model_tokenizer(model: CostModel) -> Tokenizer:
    return default_tokenizer(model.cfg.isolate)


# ---------------------------------------------------------------------------
# training path: batched segments, dense masked global layer


@dataclass
class Batch:
    seg_ids: torch.Tensor      # (S, n) token ids, padded
    seg_places: torch.Tensor
    seg_numbers: torch.Tensor
    seg_kinds: torch.Tensor
    seg_valid: torch.Tensor    # (S, n) bool
    seg_record: list           # record index of each segment
    seg_pos: list              # segment index within its record
    record_segments: list      # per record: list of batch segment indices
    allow: list                # per record: segment-pair permission matrix
    is_data: list              # per record: list of bools per segment
    plan: Optional["_MixPlan"] = None


def make_batch(encoded: Sequence[EncodedWorkload], masked: bool = True) -> Batch:
    segs = []
    rec_segs, allows, is_data = [], [], []
    for r, enc in enumerate(encoded):
        idx = []
        for a, span in enumerate(enc.segmap.spans):
            idx.append(len(segs))
            segs.append((r, a, _segment_tensors(enc.stream, span)))
        rec_segs.append(idx)
        allows.append(allowed_segments(enc.segmap, enc.mask if masked else None, masked))
        is_data.append([lab == "DATA" for lab in enc.segmap.labels()])
    n = max(len(t[0]) for _, _, t in segs)

    def pad(k, fill):
        out = torch.full((len(segs), n), fill, dtype=torch.long)
        for i, (_, _, t) in enumerate(segs):
            out[i, :len(t[k])] = t[k]
        return out

    valid = torch.zeros((len(segs), n), dtype=torch.bool)
    for i, (_, _, t) in enumerate(segs):
        valid[i, :len(t[0])] = True
    return Batch(pad(0, 0), pad(1, 0), pad(2, -1), pad(3, 0), valid,
                 [r for r, _, _ in segs], [a for _, a, _ in segs], rec_segs, allows, is_data)


def _mix_batch_dense(model: CostModel, batch: Batch, local: torch.Tensor) -> torch.Tensor:
    """Reference global layer: one dense masked attention per record."""
    lengths = batch.seg_valid.sum(-1).tolist()
    B = len(batch.record_segments)
    T = max(sum(lengths[i] for i in segs) for segs in batch.record_segments)
    X = local.new_zeros((B, T, local.shape[-1]))
    allowed = torch.zeros((B, T, T), dtype=torch.bool)
    for r, segs in enumerate(batch.record_segments):
        X_r = torch.cat([local[i, :lengths[i]] for i in segs], dim=0)
        seg = torch.cat([torch.full((lengths[i],), a, dtype=torch.long) for a, i in enumerate(segs)])
        t = X_r.shape[0]
        X[r, :t] = X_r
        allowed[r, :t, :t] = torch.as_tensor(batch.allow[r])[seg][:, seg]
        allowed[r, t:, :t] = True  # padding rows read anything; discarded
    mixed = model.mixer_norm(model.mixer(X, allowed))
    out = torch.zeros_like(local)
    for r, segs in enumerate(batch.record_segments):
        off = 0
        for i in segs:
            out[i, :lengths[i]] = mixed[r, off:off + lengths[i]]
            off += lengths[i]
    return out


@dataclass
class _MixPlan:
    """Gather indices for the factored global layer (flat = segment * n + offset)."""

    op_rows: torch.Tensor       # (S_op,) operator segments
    op_ctx: torch.Tensor        # (S_op, C) flat indices of the record's shared tokens
    op_ctx_ok: torch.Tensor     # (S_op, C) valid and permitted
    sh_flat: torch.Tensor       # (B, Q) flat indices of shared-segment tokens
    sh_ok: torch.Tensor         # (B, Q)
    all_flat: torch.Tensor      # (B, T) flat indices of every token of the record
    sh_mask: torch.Tensor       # (B, Q, T) shared query may read key


def _mix_plan(batch: Batch) -> _MixPlan:
    n = batch.seg_valid.shape[1]
    lengths = batch.seg_valid.sum(-1).tolist()
    op_rows, op_ctx, sh_flat, all_flat, all_seg, sh_seg = [], [], [], [], [], []
    for r, segs in enumerate(batch.record_segments):
        shared = [a for a, i in enumerate(segs) if batch.seg_kinds[i, 0] != KIND_OP]
        toks = [(a, i * n + t) for a, i in enumerate(segs) for t in range(lengths[i])]
        all_flat.append([f for _, f in toks])
        all_seg.append([a for a, _ in toks])
        sh = [(a, segs[a] * n + t) for a in shared for t in range(lengths[segs[a]])]
        sh_flat.append([f for _, f in sh])
        sh_seg.append([a for a, _ in sh])
        for a, i in enumerate(segs):
            if a not in shared:
                op_rows.append(i)
                op_ctx.append([(f, bool(batch.allow[r][a, b])) for b, f in sh])

    def pad(rows, fill=0):
        width = max(1, max(len(x) for x in rows))
        out = torch.full((len(rows), width), fill, dtype=torch.long)
        ok = torch.zeros((len(rows), width), dtype=torch.bool)
        for k, x in enumerate(rows):
            out[k, :len(x)] = torch.tensor(x, dtype=torch.long)
            ok[k, :len(x)] = True
        return out, ok

    ctx_idx, _ = pad([[f for f, _ in row] for row in op_ctx])
    ctx_ok = torch.zeros_like(ctx_idx, dtype=torch.bool)
    for k, row in enumerate(op_ctx):
        ctx_ok[k, :len(row)] = torch.tensor([ok for _, ok in row], dtype=torch.bool)
    shf, sh_ok = pad(sh_flat)
    alf, al_ok = pad(all_flat)
    sh_mask = torch.zeros((len(sh_flat), shf.shape[1], alf.shape[1]), dtype=torch.bool)
    for r in range(len(sh_flat)):
        A = torch.as_tensor(batch.allow[r])
        qs = torch.tensor(sh_seg[r], dtype=torch.long)
        ks = torch.tensor(all_seg[r], dtype=torch.long)
        sh_mask[r, :len(qs), :len(ks)] = A[qs][:, ks]
        sh_mask[r, len(qs):, :len(ks)] = True  # padding queries; discarded
    return _MixPlan(torch.tensor(op_rows, dtype=torch.long), ctx_idx, ctx_ok, shf, sh_ok, alf, sh_mask)


def _mix_batch(model: CostModel, batch: Batch, local: torch.Tensor) -> torch.Tensor:
    """Global layer with operator rows reading only their own segment and
    the shared segments; equal to the dense masked layer. Segment-major."""
    plan = batch.plan if batch.plan is not None else _mix_plan(batch)
    batch.plan = plan
    blk, attn = model.mixer, model.mixer.attn
    S, n, d = local.shape
    H, dh = attn.heads, attn.dh
    q, k, v = attn.in_proj(blk.norm1(local)).reshape(S * n, 3, H, dh).unbind(1)  # (S*n, H, dh)
    out = local.new_zeros((S * n, H, dh))
    if len(plan.op_rows):
        rows = plan.op_rows
        own = torch.arange(n)
        flat_own = rows[:, None] * n + own[None, :]                          # (R, n)
        keys = torch.cat([flat_own, plan.op_ctx], dim=1)                     # (R, n + C)
        ok = torch.cat([batch.seg_valid[rows], plan.op_ctx_ok], dim=1)
        o = F.scaled_dot_product_attention(
            q[flat_own].transpose(1, 2), k[keys].transpose(1, 2), v[keys].transpose(1, 2),
            attn_mask=ok[:, None, None, :])
        out = out.index_put((flat_own.reshape(-1),), o.transpose(1, 2).reshape(-1, H, dh))
    o = F.scaled_dot_product_attention(
        q[plan.sh_flat].transpose(1, 2), k[plan.all_flat].transpose(1, 2), v[plan.all_flat].transpose(1, 2),
        attn_mask=plan.sh_mask[:, None])
    o = o.transpose(1, 2)[plan.sh_ok]
    out = out.index_put((plan.sh_flat[plan.sh_ok],), o)
    y = local + attn.out_proj(out.reshape(S, n, d))
    return model.mixer_norm(blk.feed_forward(y))


def batch_contexts(model: CostModel, batch: Batch, local: Optional[torch.Tensor] = None,
                   metrics: Sequence[str] = METRICS + ("features",)) -> dict:
    """Per-metric contexts (B, d). ``local`` may be passed in precomputed."""
    if local is None:
        local = local_encodings(model, batch)
    mixed = _mix_batch(model, batch, local) if "cycles" in metrics else None
    B = len(batch.record_segments)
    S = max(len(s) for s in batch.record_segments)
    seg_index = torch.zeros((B, S), dtype=torch.long)
    present = torch.zeros((B, S), dtype=torch.bool)
    static = torch.zeros((B, S), dtype=torch.bool)
    for r, segs in enumerate(batch.record_segments):
        for a, i in enumerate(segs):
            seg_index[r, a] = i
            present[r, a] = True
            static[r, a] = not batch.is_data[r][a]
    ctx = {}
    for m in metrics:
        head = model.heads[m]
        src = mixed if m == "cycles" else local
        pooled = head.pool(src, batch.seg_valid)[seg_index]  # (B, S, d)
        ctx[m] = head.combine(pooled, present if m == "cycles" else static)
    return ctx


def local_encodings(model: CostModel, batch: Batch, bucket: int = 32) -> torch.Tensor:
    """Phase-1 encodings (S, n, d); segments run in length-sorted buckets to cut padding."""
    lengths = batch.seg_valid.sum(-1)
    order = torch.argsort(lengths, stable=True)
    n = batch.seg_valid.shape[1]
    parts = []
    for s in range(0, len(order), bucket):
        idx = order[s:s + bucket]
        m = int(lengths[idx].max())
        x = model.embed(batch.seg_ids[idx, :m], batch.seg_places[idx, :m],
                        batch.seg_numbers[idx, :m], batch.seg_kinds[idx, :m])
        y = model.encode_local(x, batch.seg_valid[idx, :m])
        parts.append(F.pad(y, (0, 0, 0, n - m)))
    return torch.cat(parts, dim=0)[torch.argsort(order)]


def clone_model(model: CostModel) -> CostModel:
    return copy.deepcopy(model)
