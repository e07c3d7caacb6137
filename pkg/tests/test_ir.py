import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from dfcost.codec import default_tokenizer
from dfcost.ir import (
    ArrayDecl, Condition, CyclicGraph, DataflowGraph, InvalidWorkload, LoopNode, NegativeRange,
    OpClass, Operator, RuntimeInput, Statement, Unknown, classify_operator, render_workload,
    segment_texts, topo_order, trip_count, validate_workload, workload_from_json, workload_to_json,
)
from dfcost.synth import GenConfig, build_dataset

from helpers import chain, guarded_operator, ref, vadd_operator, vadd_workload, with_input


@pytest.fixture(scope="module")
def corpus():
    return list(build_dataset(GenConfig(seed=3), 150))


def test_render_without_input_has_no_data_span():
    text, segmap = render_workload(vadd_workload())
    assert "<DATA>" not in text
    assert segmap.find("DATA") is None
    assert segmap.labels() == ("G", "OP0", "PARAMS")


def test_empty_bindings_render_like_no_input():
    a = render_workload(vadd_workload(input=RuntimeInput()))
    b = render_workload(vadd_workload())
    assert a == b


def test_render_is_deterministic():
    w = vadd_workload(upper="N", input=RuntimeInput((("N", 10),)))
    assert render_workload(w) == render_workload(w)


def test_data_span_holds_binding_tokens():
    tok = default_tokenizer()
    w = vadd_workload(upper="N", input=RuntimeInput((("N", 10),)))
    text, segmap = render_workload(w)
    ids = tok.tokenize(text).tokens
    span = segmap.find("DATA")
    got = tok.decode(ids[span.start:span.end])
    assert got == ["<DATA>", "N", "=", "1", "0"]


def test_segment_map_tiles_tokens(corpus):
    tok = default_tokenizer()
    for rec in corpus:
        text, segmap = render_workload(rec.workload, tok)
        assert segmap.tiles(len(tok.tokenize(text).tokens))


def test_render_injective_on_corpus(corpus):
    seen = {}
    for rec in corpus:
        text, _ = render_workload(rec.workload)
        if text in seen:
            assert seen[text] == rec.workload
        seen[text] = rec.workload


def test_pragma_strings_rendered():
    assert "#pragma clang loop unroll(full)" in render_workload(vadd_workload("unroll_full"))[0]
    assert "#pragma omp parallel for" in render_workload(vadd_workload("parallel_for"))[0]


def test_transpose_is_class_one():
    body = (Statement("array_load", ("t", ref("a", "i", "j"))),
            Statement("array_store", (ref("b", "j", "i"), "t")))
    inner = LoopNode("j", 0, 8, 1, "none", body)
    op = Operator("ft", (ArrayDecl("a", 32, (8, 8)), ArrayDecl("b", 32, (8, 8))), (),
                  LoopNode("i", 0, 8, 1, "none", (inner,)))
    assert classify_operator(op) is OpClass.I


def test_symbolic_bound_is_class_two():
    assert classify_operator(vadd_operator(upper="N")) is OpClass.II


def test_data_branch_on_input_is_class_two():
    body = (Statement("array_load", ("t1", ref("a", "i"))),
            Statement("branch", (), cond=Condition(ref("a", "i"), ">", "T"),
                      then_body=(Statement("array_store", (ref("c", "i"), "t1")),)))
    op = Operator("fb", (ArrayDecl("a", 32, (8,)), ArrayDecl("c", 32, (8,))), (),
                  LoopNode("i", 0, 8, 1, "none", body), ("T",))
    assert classify_operator(op) is OpClass.II
    assert classify_operator(guarded_operator()) is OpClass.II


def test_class_ignores_input_values(corpus):
    rng = random.Random(0)
    for rec in corpus:
        w = rec.workload
        before = [classify_operator(op) for op in w.operators]
        rebound = RuntimeInput(tuple((s, rng.randint(1, 90)) for s in w.input_symbols))
        w2 = replace(w, input=rebound)
        assert [classify_operator(op) for op in w2.operators] == before


def test_topo_single_chain_diamond():
    assert topo_order(DataflowGraph(("A",))) == ["A"]
    assert topo_order(DataflowGraph(("A", "B", "C"), (("A", "B"), ("B", "C")))) == ["A", "B", "C"]
    diamond = DataflowGraph(("A", "B", "C", "D"), (("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")))
    assert topo_order(diamond) == ["A", "B", "C", "D"]


def test_topo_tie_break_follows_declaration():
    g = DataflowGraph(("C", "B", "A"), (("A", "B"),))
    assert topo_order(g) == ["C", "A", "B"]


def test_topo_rejects_cycle():
    with pytest.raises(CyclicGraph):
        topo_order(DataflowGraph(("A", "B"), (("A", "B"), ("B", "A"))))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 7), st.randoms(use_true_random=False))
def test_topo_respects_every_edge(n, rnd):
    names = tuple(f"n{i}" for i in range(n))
    perm = list(names)
    rnd.shuffle(perm)
    edges = tuple((perm[i], perm[j]) for i in range(n) for j in range(i + 1, n) if rnd.random() < 0.4)
    order = topo_order(DataflowGraph(names, edges))
    pos = {x: k for k, x in enumerate(order)}
    assert sorted(order) == sorted(names)
    assert all(pos[a] < pos[b] for a, b in edges)


def test_trip_count_cases():
    assert trip_count(LoopNode("i", 0, 10)) == 10
    assert trip_count(LoopNode("i", 0, "N", 2), RuntimeInput((("N", 10),))) == 5
    assert trip_count(LoopNode("i", 0, "N")) is Unknown
    assert trip_count(LoopNode("i", 0, "N"), RuntimeInput((("M", 3),))) is Unknown
    assert trip_count(LoopNode("i", 0, 9, 4)) == 3


def test_trip_count_negative_range():
    with pytest.raises(NegativeRange):
        trip_count(LoopNode("i", 5, "N"), RuntimeInput((("N", 2),)))


def test_validation_rejects_bad_workloads():
    w = vadd_workload()
    validate_workload(w)
    with pytest.raises(InvalidWorkload):
        validate_workload(replace(w, graph=DataflowGraph(("fa", "zz"))))
    bad_op = replace(w.operators[0], arrays=w.operators[0].arrays[:2])
    with pytest.raises(InvalidWorkload):
        validate_workload(replace(w, operators=(bad_op,)))
    with pytest.raises(InvalidWorkload):
        validate_workload(chain(vadd_operator("fa"), vadd_operator("fa")))


def test_json_roundtrip(corpus):
    for rec in corpus[:60]:
        assert workload_from_json(workload_to_json(rec.workload)) == rec.workload
    w = with_input(chain(guarded_operator()), N=6)
    assert workload_from_json(workload_to_json(w)) == w


def test_segment_texts_start_with_delimiters():
    w = with_input(chain(vadd_operator("fa"), guarded_operator("fb")), N=3)
    labels = [lab for lab, _ in segment_texts(w)]
    assert labels == ["G", "OP0", "OP1", "PARAMS", "DATA"]
    starts = [text.split()[0] for _, text in segment_texts(w)]
    assert starts[0] == "<G>" and starts[-2:] == ["<PARAMS>", "<DATA>"]
