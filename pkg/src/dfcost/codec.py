"""Numeric-aware program tokenization and fixed-width digit codes.

Program side: numbers are isolated from surrounding symbols and every
decimal digit becomes its own token, so an n-digit literal costs n tokens.
Output side: each metric is a base-D, width-L digit code predicted high
order first; beam search and per-digit cross-entropy live here.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from dfcost.ir import MAX_OPERATORS, PRAGMA_TEXT, SEG_DATA, SEG_GRAPH, SEG_PARAMS, op_delimiter

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
VOCAB_VERSION = "dfv1"


class Overflow(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# symbol isolation

DELIMITERS = (
    [SEG_GRAPH, SEG_PARAMS, SEG_DATA, "<think>", "</think>"]
    + [op_delimiter(k) for k in range(MAX_OPERATORS)]
)
_ISOLATE_RE = re.compile(
    "|".join(re.escape(d) for d in sorted(DELIMITERS, key=len, reverse=True)) + r"|[+\-]|[0-9]+"
)


def isolate_symbols(text: str) -> str:
    """Space-separate every digit run and sign character ("-128" -> " - 128").

    Reserved segment delimiters pass through untouched.
    """
    out: list[str] = []
    last = ""
    pos = 0
    for m in _ISOLATE_RE.finditer(text):
        s, e = m.span()
        if s > pos:
            out.append(text[pos:s])
            last = text[s - 1]
        tok = m.group()
        if tok in DELIMITERS:
            out.append(tok)
            last = tok[-1]
        else:
            if not last.isspace():
                out.append(" ")
            out.append(tok)
            last = tok[-1]
            if e < len(text) and not text[e].isspace():
                out.append(" ")
                last = " "
        pos = e
    out.append(text[pos:])
    return "".join(out)


# ---------------------------------------------------------------------------
# vocabulary and tokenizer

KEYWORDS = (
    "for", "if", "else", "int", "void", "graph",
    "mem_delay_read", "mem_delay_write", "parallel_lanes",
    "modules", "mux", "mul", "add", "ff", "ports",
)
PUNCT2 = ("<=", ">=", "==", "!=", ">>")
PUNCT1 = tuple("()[]{};,=<>+-*/%!&|.:#?^~'\"@$\\`")
IDENT_CHARS = tuple("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
DIGITS = tuple("0123456789")
PAD, UNK = "<pad>", "<unk>"


@dataclass(frozen=True)
class TokenStream:
    tokens: tuple[int, ...]
    vocab_version: str
    # 0 for non-digit tokens, else 1 + place value (1 = units digit)
    places: tuple[int, ...] = ()
    # value of the enclosing digit run, -1 for non-digit tokens
    numbers: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)


class Tokenizer:
    """Fixed-vocabulary tokenizer.

    ``isolate=True`` is the numeric-aware mode: symbol isolation then one
    token per digit. ``isolate=False`` is a conventional baseline that keeps
    raw text and splits digit runs greedily into up-to-3-digit chunk tokens.
    """

    def __init__(self, isolate: bool = True) -> None:
        self.isolate = isolate
        reserved = list(DELIMITERS) + list(PRAGMA_TEXT.values()) + list(KEYWORDS)
        chunks = [] if isolate else [f"{i:02d}" for i in range(100)] + [f"{i:03d}" for i in range(1000)]
        self.itos = [PAD, UNK] + reserved + list(PUNCT2) + list(PUNCT1) + list(DIGITS) + list(IDENT_CHARS) + chunks
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        words = sorted(reserved, key=len, reverse=True)
        alts = []
        for w in words:
            esc = re.escape(w)
            if w[0].isalpha():
                esc = r"(?<![A-Za-z0-9_])" + esc + r"(?![A-Za-z0-9_])"
            alts.append(esc)
        self._re = re.compile(
            r"(?P<ws>\s+)|(?P<res>" + "|".join(alts) + r")|(?P<num>[0-9]+)|(?P<p2>"
            + "|".join(re.escape(p) for p in PUNCT2) + r")|(?P<any>.)",
            re.DOTALL,
        )

    @property
    def version(self) -> str:
        return f"{VOCAB_VERSION}-{'digits' if self.isolate else 'chunks'}"

    def __len__(self) -> int:
        return len(self.itos)

    def tokenize(self, text: str) -> TokenStream:
        if self.isolate:
            text = isolate_symbols(text)
        toks: list[int] = []
        places: list[int] = []
        numbers: list[int] = []
        unk = self.stoi[UNK]
        for m in self._re.finditer(text):
            kind = m.lastgroup
            s = m.group()
            if kind == "ws":
                continue
            if kind == "num":
                pieces = list(s) if self.isolate else [s[i:i + 3] for i in range(0, len(s), 3)]
                for k, piece in enumerate(pieces):
                    toks.append(self.stoi[piece])
                    places.append(len(pieces) - k if self.isolate else 0)
                    numbers.append(int(s) if self.isolate else -1)
                continue
            toks.append(self.stoi.get(s, unk))
            places.append(0)
            numbers.append(-1)
        return TokenStream(tuple(toks), self.version, tuple(places), tuple(numbers))

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_dict(self) -> dict:
        return {"version": self.version, "isolate": self.isolate, "tokens": list(self.itos)}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        tok = cls(isolate=d["isolate"])
        if tok.itos != d["tokens"]:
            raise ValueError(f"vocabulary mismatch for {d['version']}")
        return tok


@functools.lru_cache(maxsize=None)
def default_tokenizer(isolate: bool = True) -> Tokenizer:
    return Tokenizer(isolate=isolate)


def tokenize(text: str) -> TokenStream:
    return default_tokenizer().tokenize(text)


# ---------------------------------------------------------------------------
# digit codes


@dataclass(frozen=True)
class DigitCode:
    base: int
    width: int
    digits: tuple[int, ...]

    @property
    def value(self) -> int:
        v = 0
        for d in self.digits:
            v = v * self.base + d
        return v


def encode_value(v: int, base: int = 10, width: int = 4) -> DigitCode:
    if base < 2 or width < 1:
        raise ValueError("base must be >= 2 and width >= 1")
    v = int(v)
    if v < 0:
        raise ValueError("negative values are not representable")
    if v >= base**width:
        raise Overflow(f"{v} does not fit in {width} base-{base} digits")
    digits = []
    for _ in range(width):
        v, r = divmod(v, base)
        digits.append(r)
    return DigitCode(base, width, tuple(reversed(digits)))


def decode_value(code: DigitCode) -> int:
    return code.value


@dataclass(frozen=True)
class DigitDistribution:
    """Per-position probabilities, shape (width, base)."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeMismatch("probs must be 2-D (width, base)")
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("each row must sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_scores(cls, scores) -> "DigitDistribution":
        """Normalize non-negative per-position scores into probabilities."""
        s = np.asarray(scores, dtype=np.float64)
        return cls(s / s.sum(axis=1, keepdims=True))

    @property
    def width(self) -> int:
        return self.probs.shape[0]

    @property
    def base(self) -> int:
        return self.probs.shape[1]

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def sequence_logprob(self, code: DigitCode) -> float:
        return sequence_logprob([self.probs[j, d] for j, d in enumerate(code.digits)])


def decode_greedy(dist: DigitDistribution) -> DigitCode:
    # np.argmax returns the first maximum, i.e. ties go to the smaller digit
    digits = tuple(int(i) for i in np.argmax(dist.probs, axis=1))
    return DigitCode(dist.base, dist.width, digits)


StepFn = Callable[[tuple[int, ...]], np.ndarray]


@dataclass(frozen=True)
class BeamResult:
    code: DigitCode
    logprob: float
    confidence: float


def _safe_log(p):
    return np.log(np.maximum(p, PROB_FLOOR))


def decode_beam(step_fn, width: int, length: int, base: Optional[int] = None,
                batched: bool = False) -> list[BeamResult]:
    """Beam search over digit positions, high order first.

    ``step_fn(prefix)`` returns the next-digit distribution; with
    ``batched=True`` it takes a list of prefixes and returns an (n, D)
    array. Results are ranked by sequence log-probability; equal scores
    rank the lexicographically smaller code first.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    call = step_fn if batched else (lambda prefixes: np.stack([np.asarray(step_fn(p)) for p in prefixes]))
    beams: list[tuple[float, tuple[int, ...], float]] = [(0.0, (), 1.0)]
    for _ in range(length):
        probs = np.asarray(call([b[1] for b in beams]), dtype=np.float64)
        if base is None:
            base = probs.shape[1]
        logp = _safe_log(probs)
        cand = []
        for (score, prefix, _), lp, p in zip(beams, logp, probs):
            for d in range(base):
                cand.append((score + float(lp[d]), prefix + (d,), float(p[d])))
        cand.sort(key=lambda c: (-c[0], c[1]))
        beams = cand[:width]
    return [BeamResult(DigitCode(base, length, pre), score, conf) for score, pre, conf in beams]


def greedy_autoregressive(step_fn, length: int) -> DigitCode:
    prefix: tuple[int, ...] = ()
    for _ in range(length):
        p = np.asarray(step_fn(prefix))
        prefix += (int(np.argmax(p)),)
    return DigitCode(len(p), length, prefix)


# ---------------------------------------------------------------------------
# losses


def sequence_logprob(path_probs: Sequence[float]) -> float:
    """Σ_j log p_j with a 1e-12 floor; used as log π(y|x)."""
    return float(np.sum(_safe_log(np.asarray(path_probs, dtype=np.float64))))


def digit_loss(dist: DigitDistribution, target: DigitCode):
    """Per-position categorical cross-entropy and its mean."""
    if dist.probs.shape != (target.width, target.base):
        raise ShapeMismatch(f"{dist.probs.shape} vs ({target.width}, {target.base})")
    per = np.array([-_safe_log(dist.probs[j, d]) for j, d in enumerate(target.digits)])
    return per, float(per.mean())


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def digit_loss_from_logits(logits: np.ndarray, target: DigitCode):
    """Cross-entropy on raw logits: returns (per-position, total, d total / d logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (target.width, target.base):
        raise ShapeMismatch(f"{logits.shape} vs ({target.width}, {target.base})")
    lsm = log_softmax(logits)
    idx = np.arange(target.width), np.array(target.digits)
    picked = lsm[idx]
    clamped = picked < LOG_FLOOR
    per = -np.maximum(picked, LOG_FLOOR)
    grad = np.exp(lsm)
    grad[idx] -= 1.0
    grad[clamped] = 0.0
    grad /= target.width
    return per, float(per.mean()), grad
