import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcost.codec import (
    DigitCode, DigitDistribution, Overflow, ShapeMismatch, Tokenizer, decode_beam, decode_greedy,
    decode_value, default_tokenizer, digit_loss, digit_loss_from_logits, encode_value,
    greedy_autoregressive, isolate_symbols, sequence_logprob, tokenize,
)
from dfcost.ir import op_delimiter


def table_step(table, base=10):
    """step_fn backed by a prefix -> probability-row dict, uniform elsewhere."""
    def step(prefix):
        return np.asarray(table.get(tuple(prefix), np.full(base, 1.0 / base)))
    return step


def row(**mass):
    r = np.full(10, 0.0)
    for k, v in mass.items():
        r[int(k[1:])] = v
    rest = 1.0 - r.sum()
    r[r == 0] = rest / (r == 0).sum()
    return r


def seven_vs_655():
    # the first digit prefers 7, but everything after 7 is flat while 6 -> 5 -> 5 is sharp
    return table_step({
        (): row(d7=0.40, d6=0.35),
        (6,): row(d5=0.9),
        (6, 5): row(d5=0.9),
    })


def test_isolate_examples():
    assert isolate_symbols("-128") == " - 128"
    assert isolate_symbols("abc") == "abc"
    assert isolate_symbols("x=a+12;") == "x=a + 12 ;"


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="ab1 2-+=;<>x9\n", max_size=30))
def test_isolate_idempotent(s):
    once = isolate_symbols(s)
    assert isolate_symbols(once) == once


def test_tokenize_examples():
    tok = default_tokenizer()
    assert tok.decode(tokenize("128").tokens) == ["1", "2", "8"]
    assert tokenize("").tokens == ()
    assert tok.decode(tokenize("<DATA> N = 10").tokens) == ["<DATA>", "N", "=", "1", "0"]


def test_reserved_words_are_single_tokens():
    tok = default_tokenizer()
    words = ["#pragma omp parallel for", "#pragma clang loop unroll(full)", op_delimiter(3), "for", "<think>"]
    for w in words:
        assert len(tok.tokenize(w).tokens) == 1, w
    # identifiers that merely start with a keyword split into characters
    assert tok.decode(tok.tokenize("format").tokens) == list("format")


def test_unknown_byte_maps_to_unk():
    tok = default_tokenizer()
    assert tok.decode(tok.tokenize("§").tokens) == ["<unk>"]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**12), st.sampled_from(["x = {} ;", "A[{}]", "{}", "N={}+1"]))
def test_digit_count_law(n, template):
    text = template.format(n)
    ts = tokenize(text)
    digits = [t for t in default_tokenizer().decode(ts.tokens) if t.isdigit()]
    assert "".join(digits) == str(n) + ("1" if "+1" in template else "")


def test_place_and_number_channels():
    ts = tokenize("A[305]")
    digit_pos = [k for k, p in enumerate(ts.places) if p]
    assert [ts.places[k] for k in digit_pos] == [3, 2, 1]
    assert {ts.numbers[k] for k in digit_pos} == {305}


def test_chunk_tokenizer_groups_digits():
    tok = Tokenizer(isolate=False)
    assert tok.decode(tok.tokenize("x=12345").tokens) == ["x", "=", "123", "45"]
    assert len(tok) == len(default_tokenizer()) + 1100


def test_vocab_roundtrip_and_version():
    tok = default_tokenizer()
    assert Tokenizer.from_dict(tok.to_dict()).itos == tok.itos
    assert tok.version != Tokenizer(isolate=False).version
    bad = tok.to_dict()
    bad["tokens"] = bad["tokens"][:-1]
    with pytest.raises(ValueError):
        Tokenizer.from_dict(bad)


def test_encode_examples():
    assert encode_value(128, 10, 3).digits == (1, 2, 8)
    assert encode_value(655, 10, 3).digits == (6, 5, 5)
    assert encode_value(0, 10, 3).digits == (0, 0, 0)
    with pytest.raises(Overflow):
        encode_value(1000, 10, 3)


@pytest.mark.parametrize("base", [2, 10, 16])
def test_roundtrip_exhaustive_small(base):
    for width in (1, 2):
        for v in range(base**width):
            assert decode_value(encode_value(v, base, width)) == v


def test_greedy_examples():
    one_hot = np.eye(10)[[6, 5, 5]]
    assert decode_greedy(DigitDistribution(one_hot)).value == 655
    scores = np.full((1, 10), 0.01)
    scores[0, 4], scores[0, 1] = 0.8, 0.6
    assert decode_greedy(DigitDistribution.from_scores(scores)).digits == (4,)
    uniform = np.full((3, 10), 0.1)
    assert decode_greedy(DigitDistribution(uniform)).digits == (0, 0, 0)


def test_distribution_rejects_bad_rows():
    with pytest.raises(ValueError):
        DigitDistribution(np.full((2, 10), 0.2))
    with pytest.raises(ShapeMismatch):
        DigitDistribution(np.full(10, 0.1))


def test_beam_width_one_is_greedy():
    step = seven_vs_655()
    assert decode_beam(step, 1, 3)[0].code == greedy_autoregressive(step, 3)
    assert decode_beam(step, 1, 3)[0].code.digits[0] == 7


def test_beam_recovers_655():
    top = decode_beam(seven_vs_655(), 2, 3)[0]
    assert top.code.value == 655
    assert top.logprob == pytest.approx(math.log(0.35) + 2 * math.log(0.9))
    assert top.confidence == pytest.approx(0.9)


def _random_step(seed, base=10):
    rng = np.random.default_rng(seed)
    cache = {}

    def step(prefix):
        key = tuple(prefix)
        if key not in cache:
            cache[key] = rng.dirichlet(np.full(base, 0.3))
        return cache[key]
    return step


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_beam_is_global_optimum(seed):
    step = _random_step(seed)
    best = max(itertools.product(range(10), repeat=3),
               key=lambda c: sum(math.log(max(step(c[:j])[c[j]], 1e-12)) for j in range(3)))
    assert decode_beam(step, 1000, 3)[0].code.digits == best


@pytest.mark.parametrize("seed", range(8))
def test_beam_dominance(seed):
    step = _random_step(100 + seed)
    scores = [decode_beam(step, w, 4)[0].logprob for w in range(1, 6)]
    assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))


def test_batched_beam_matches_unbatched():
    step = _random_step(7)
    a = decode_beam(step, 3, 3)
    b = decode_beam(lambda ps: np.stack([step(p) for p in ps]), 3, 3, batched=True)
    assert [r.code for r in a] == [r.code for r in b]


def test_loss_examples():
    target = encode_value(42, 10, 2)
    per, total = digit_loss(DigitDistribution(np.eye(10)[[4, 2]]), target)
    assert total == 0.0 and list(per) == [0.0, 0.0]
    per, total = digit_loss(DigitDistribution(np.full((2, 10), 0.1)), target)
    assert per == pytest.approx([math.log(10)] * 2)
    with pytest.raises(ShapeMismatch):
        digit_loss(DigitDistribution(np.full((3, 10), 0.1)), target)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_floor(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(10), size=3)
    target = DigitCode(10, 3, tuple(int(x) for x in rng.integers(0, 10, 3)))
    per, total = digit_loss(DigitDistribution(p), target)
    assert (per >= 0).all() and total >= 0


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(size=(4, 10)) * 2
        target = DigitCode(10, 4, tuple(int(x) for x in rng.integers(0, 10, 4)))
        _, _, grad = digit_loss_from_logits(logits, target)
        num = np.zeros_like(logits)
        h = 1e-6
        for idx in np.ndindex(*logits.shape):
            up, dn = logits.copy(), logits.copy()
            up[idx] += h
            dn[idx] -= h
            num[idx] = (digit_loss_from_logits(up, target)[1] - digit_loss_from_logits(dn, target)[1]) / (2 * h)
        np.testing.assert_allclose(grad, num, rtol=1e-4, atol=1e-8)


def test_sequence_logprob_examples():
    assert sequence_logprob([1.0, 1.0, 1.0]) == 0.0
    assert sequence_logprob([0.5, 0.5]) == pytest.approx(-1.3863, abs=1e-4)
    assert sequence_logprob([0.0]) == pytest.approx(math.log(1e-12))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 0.9), min_size=1, max_size=6), st.integers(0, 5), st.floats(0.01, 0.09))
def test_sequence_logprob_monotone(ps, j, bump):
    j %= len(ps)
    raised = list(ps)
    raised[j] += bump
    assert sequence_logprob(raised) > sequence_logprob(ps)
