"""Progressive dataset synthesis.

Three tiers, emitted general-first: a random well-formed AST tier, a
loop-tree template tier for array dataflow kernels, and a rewrite tier that
perturbs programs from the first two. Hardware parameters and runtime
inputs are layered on top, and every record is labelled by the oracle.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence, Union

from dfcost.codec import encode_value
from dfcost.ir import (
    ARITH_KINDS,
    ArrayDecl,
    ArrayRef,
    Condition,
    DataflowGraph,
    HardwareParams,
    Index,
    LoopNode,
    Operator,
    OpClass,
    RuntimeInput,
    Statement,
    Workload,
    classify_operator,
    free_symbols,
    is_accumulation,
    iter_loops,
    iter_statements,
    local_names,
    loop_depth,
    validate_workload,
    workload_from_dict,
    workload_from_json,
    workload_to_dict,
    workload_to_json,
)
from dfcost.oracle import CostVector, FeatureVector, evaluate_full

SOURCES = ("ast", "dataflow", "mutation")
FORMATS = ("direct", "reasoning")
# digit widths per metric (base 10); labels must fit
METRIC_WIDTHS = {"power": 4, "area": 4, "ff": 4, "cycles": 6}

ARRAY_NAMES = "ABCDEFPQRSUVXYZ"
LOOP_VARS = ("i", "j", "k", "p", "q", "r")
INPUT_NAMES = ("N", "M", "H", "W", "T", "L")
TEMP_NAMES = tuple("t" + c for c in "abcdefghijklmnopqrsuvwxyz")


class NoInputSymbols(ValueError):
    pass


class MutationInapplicable(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    mix: tuple[float, float, float] = (0.30, 0.50, 0.20)
    depth_range: tuple[int, int] = (3, 5)
    array_stmt_fraction_min: float = 0.90
    mem_delay_choices: tuple[int, ...] = (10, 5, 2)
    lanes_choices: tuple[int, ...] = (2, 4, 8)
    input_variation: float = 0.50
    input_base: int = 32
    variants: int = 5
    format: str = "reasoning"
    # generation keeps cycles at the top of the input range below this
    cycles_budget: int = 400_000

    def __post_init__(self) -> None:
        if abs(sum(self.mix) - 1.0) > 1e-9 or any(m < 0 for m in self.mix):
            raise ValueError(f"mix must be non-negative and sum to 1, got {self.mix}")
        if self.depth_range[0] < 1 or self.depth_range[0] > self.depth_range[1]:
            raise ValueError(f"bad depth_range {self.depth_range}")
        if self.format not in ("direct", "reasoning", "both"):
            raise ValueError(f"unknown format {self.format!r}")


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    source: str
    workload: Workload
    labels: CostVector
    features: FeatureVector
    format: str
    reasoning_text: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source": self.source,
            "workload": workload_to_dict(self.workload),
            "labels": self.labels.as_dict(),
            "features": self.features.as_dict(),
            "format": self.format,
            "reasoning_text": self.reasoning_text,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        return cls(
            id=d["id"],
            source=d["source"],
            workload=workload_from_dict(d["workload"]),
            labels=CostVector(**d["labels"]),
            features=FeatureVector(**d["features"]),
            format=d["format"],
            reasoning_text=d.get("reasoning_text"),
        )


# ---------------------------------------------------------------------------
# small builders


def _ix(*vars_: str, offset: int = 0) -> Index:
    return Index(tuple(vars_), offset)


def _ref(name: str, *idx: Union[Index, str]) -> ArrayRef:
    return ArrayRef(name, tuple(i if isinstance(i, Index) else _ix(i) for i in idx))


def _load(dst: str, ref: ArrayRef) -> Statement:
    return Statement("array_load", (dst, ref))


def _store(ref: ArrayRef, src) -> Statement:
    return Statement("array_store", (ref, src))


def _arith(kind: str, dst: str, a, b, rel: str = "<") -> Statement:
    return Statement(kind, (dst, a, b), rel=rel if kind == "compare" else "<")


def nest(headers: Sequence[tuple[str, int, Union[int, str], int]], body: Sequence) -> LoopNode:
    """Perfect loop nest; ``headers`` are (var, lower, upper, step), outermost first."""
    node = None
    for var, lo, hi, step in reversed(headers):
        inner = tuple(body) if node is None else (node,)
        node = LoopNode(var, lo, hi, step, "none", inner)
    return node


def _make_operator(name, arrays, scalars, root) -> Operator:
    op = Operator(name, tuple(arrays), tuple(scalars), root, ())
    return replace(op, input_symbols=free_symbols(op))


# ---------------------------------------------------------------------------
# array-op statistics


def array_op_flags(op: Operator) -> list[bool]:
    """One flag per statement (``iter_statements`` order): does it belong to
    array dataflow? Loads/stores do; arithmetic does when an operand derives
    from an array value; a branch does when its condition reads an array."""
    stmts = list(iter_statements((op.root,)))
    derived: set[str] = set()
    changed = True
    while changed:
        changed = False
        for st in stmts:
            if st.kind == "array_load" or (
                st.kind in ARITH_KINDS and any(isinstance(x, str) and x in derived for x in st.operands[1:])
            ):
                if st.operands[0] not in derived:
                    derived.add(st.operands[0])
                    changed = True
    flags = []
    for st in stmts:
        if st.kind in ("array_load", "array_store"):
            flags.append(True)
        elif st.kind == "branch":
            xs = (st.cond.lhs, st.cond.rhs)
            flags.append(any(isinstance(x, ArrayRef) or (isinstance(x, str) and x in derived) for x in xs))
        else:
            flags.append(any(isinstance(x, str) and x in derived for x in st.operands[1:]))
    return flags


def max_depth(w: Workload) -> int:
    return max(loop_depth(op.root) for op in w.operators)


def mean_depth(w: Workload) -> float:
    return sum(loop_depth(op.root) for op in w.operators) / len(w.operators)


# ---------------------------------------------------------------------------
# label range checks


def _top_input(w: Workload, cfg: GenConfig) -> RuntimeInput:
    hi = math.floor((1 + cfg.input_variation) * cfg.input_base)
    return RuntimeInput(tuple((s, hi) for s in w.input_symbols))


def _bottom_input(w: Workload, cfg: GenConfig) -> RuntimeInput:
    lo = math.ceil((1 - cfg.input_variation) * cfg.input_base)
    return RuntimeInput(tuple((s, lo) for s in w.input_symbols))


def labels_fit(cv: CostVector) -> bool:
    try:
        encode_value(cv.power_milli, 10, METRIC_WIDTHS["power"])
        encode_value(cv.area_deci, 10, METRIC_WIDTHS["area"])
        encode_value(cv.ff, 10, METRIC_WIDTHS["ff"])
        encode_value(cv.cycles, 10, METRIC_WIDTHS["cycles"])
    except ValueError:
        return False
    return True


def acceptable(w: Workload, cfg: GenConfig) -> bool:
    """Valid, oracle-evaluable across the input range, and within label widths."""
    try:
        validate_workload(w)
        for inp in (_top_input(w, cfg), _bottom_input(w, cfg)):
            cv, _ = evaluate_full(w, inp)
            if not labels_fit(cv) or cv.cycles > cfg.cycles_budget:
                return False
    except (ValueError, KeyError):
        return False
    return True


# ---------------------------------------------------------------------------
# AST tier


class _Names:
    def __init__(self) -> None:
        self.arrays = iter(ARRAY_NAMES)
        self.temps = iter(TEMP_NAMES)

    def array(self) -> str:
        return next(self.arrays)

    def temp(self) -> str:
        return next(self.temps)


def _ast_operator(name: str, rng: random.Random) -> Operator:
    names = _Names()
    depth = rng.randint(1, 2)
    vars_ = LOOP_VARS[:depth]
    extents = [rng.choice((4, 6, 8, 10, 12, 16, 20, 24, 32)) for _ in vars_]
    n_arrays = rng.randint(1, 3)
    arrays = []
    for _ in range(n_arrays):
        rank = rng.randint(1, depth)
        dims = tuple(extents[:rank])
        arrays.append(ArrayDecl(names.array(), rng.choice((8, 16, 32)), dims))
    scalars = ["sa"] if rng.random() < 0.5 else []
    values: list[str] = []  # temps defined so far

    def aref(a: ArrayDecl) -> ArrayRef:
        return ArrayRef(a.name, tuple(_ix(v) for v in vars_[: len(a.dims)]))

    def operand():
        pool = values + list(scalars) + list(vars_)
        r = rng.random()
        if values and r < 0.75:
            return rng.choice(values)
        if r < 0.9:
            return rng.choice(pool)
        return rng.randint(1, 9)

    body: list[Statement] = []
    for _ in range(rng.randint(2, 7)):
        r = rng.random()
        if r < 0.35 or not values:
            t = names.temp()
            body.append(_load(t, aref(rng.choice(arrays))))
            values.append(t)
        elif r < 0.6:
            kind = rng.choice(("add", "add", "sub", "mul", "mul", "div", "compare"))
            if scalars and rng.random() < 0.3 and kind in ("add", "mul"):
                body.append(_arith(kind, scalars[0], scalars[0], rng.choice(values)))
            else:
                t = names.temp()
                body.append(_arith(kind, t, rng.choice(values), operand(), rel=rng.choice(("<", ">"))))
                values.append(t)
        elif r < 0.85:
            body.append(_store(aref(rng.choice(arrays)), rng.choice(values)))
        else:
            a = rng.choice(arrays)
            if rng.random() < 0.6:
                cond = Condition(aref(a), rng.choice((">", "<")), rng.randint(16, 240))
            else:
                cond = Condition(rng.choice(vars_), rng.choice(("<", ">=")), rng.randint(1, 8))
            then = (_store(aref(a), rng.choice(values)),)
            other = ()
            if rng.random() < 0.5:
                t = names.temp()
                other = (_arith(rng.choice(("add", "mul")), t, rng.choice(values), rng.randint(1, 9)),)
            body.append(Statement("branch", cond=cond, then_body=then, else_body=other))
    if scalars and not any(is_accumulation(s, scalars) for s in body):
        body.append(_arith("add", scalars[0], scalars[0], rng.choice(values)))
    headers = [(v, 0, e, 1) for v, e in zip(vars_, extents)]
    return _make_operator(name, arrays, scalars, nest(headers, body))


def _op_names(n: int, start: int = 0) -> list[str]:
    return ["f" + "abcdefghijklmnopqrstuvwxyz"[start + k] for k in range(n)]


def _random_edges(nodes: Sequence[str], rng: random.Random) -> tuple[tuple[str, str], ...]:
    edges = []
    for b in range(1, len(nodes)):
        for a in range(b):
            if a == b - 1 or rng.random() < 0.3:
                edges.append((nodes[a], nodes[b]))
    return tuple(edges)


def gen_ast_program(cfg: GenConfig, rng: random.Random) -> Workload:
    """1-3 operators, loop depth 1-2, literal bounds, mixed statements."""
    for _ in range(1000):
        n = rng.randint(1, 3)
        names = _op_names(n)
        ops = tuple(_ast_operator(nm, rng) for nm in names)
        w = Workload(DataflowGraph(tuple(names), _random_edges(names, rng)), ops, HardwareParams(), None)
        if acceptable(w, cfg):
            return w
    raise RuntimeError("AST generator failed to produce an acceptable workload")


# ---------------------------------------------------------------------------
# dataflow tier: loop-tree templates


@dataclass
class _Template:
    """A perfect loop nest with an innermost statement body."""

    headers: list  # (var, lower, upper, step)
    body: list
    arrays: list
    scalars: list = field(default_factory=list)
    # vars whose loops are kernel-sized and must keep a literal bound
    fixed: set = field(default_factory=set)


def _extents(rng, n, small=(2, 3, 4, 6, 8), large=(8, 12, 16)) -> list[int]:
    pool = large if n <= 3 else small
    return [rng.choice(pool) for _ in range(n)]


def _t_elementwise(rng, depth) -> _Template:
    vs = list(LOOP_VARS[:depth])
    ex = _extents(rng, depth)
    kind = rng.choice(("add", "sub", "mul"))
    body = [
        _load("ta", _ref("A", *vs)),
        _load("tb", _ref("B", *vs)),
        _arith(kind, "tc", "ta", "tb"),
        _store(_ref("C", *vs), "tc"),
    ]
    arrays = [ArrayDecl(n, 32, tuple(ex)) for n in "ABC"]
    return _Template([(v, 0, e, 1) for v, e in zip(vs, ex)], body, arrays)


def _t_matmul(rng, depth) -> _Template:
    batch = list(LOOP_VARS[3:3 + depth - 3])
    i, j, k = LOOP_VARS[:3]
    ex_b = [rng.choice((2, 3, 4)) for _ in batch]
    ex = [rng.choice((4, 6, 8, 12, 16)) if depth == 3 else rng.choice((2, 4, 6, 8)) for _ in range(3)]
    body = [
        _load("ta", _ref("A", *batch, i, k)),
        _load("tb", _ref("B", *batch, k, j)),
        _load("tc", _ref("C", *batch, i, j)),
        _arith("mul", "td", "ta", "tb"),
        _arith("add", "te", "tc", "td"),
        _store(_ref("C", *batch, i, j), "te"),
    ]
    arrays = [
        ArrayDecl("A", 16, tuple(ex_b + [ex[0], ex[2]])),
        ArrayDecl("B", 16, tuple(ex_b + [ex[2], ex[1]])),
        ArrayDecl("C", 32, tuple(ex_b + [ex[0], ex[1]])),
    ]
    headers = [(v, 0, e, 1) for v, e in zip(batch, ex_b)] + [(i, 0, ex[0], 1), (j, 0, ex[1], 1), (k, 0, ex[2], 1)]
    return _Template(headers, body, arrays)


def _t_conv(rng, depth) -> _Template:
    # depth 5: oc, oh, ow, kh, kw ; depth 4: oh, ow, kh, kw ; depth 3: oh, kh, kw
    ks = rng.choice((3, 3, 5)) if depth > 3 else 3
    if depth >= 5:
        oc, oh, ow, kh, kw = "i", "j", "k", "p", "q"
        out_ex = [rng.choice((2, 4)), rng.choice((4, 6, 8)), rng.choice((4, 6, 8))]
        body = [
            _load("ta", _ref("X", _ix(oh, kh), _ix(ow, kw))),
            _load("tb", _ref("F", oc, kh, kw)),
            _load("tc", _ref("Y", oc, oh, ow)),
            _arith("mul", "td", "ta", "tb"),
            _arith("add", "te", "tc", "td"),
            _store(_ref("Y", oc, oh, ow), "te"),
        ]
        arrays = [
            ArrayDecl("X", 8, (out_ex[1] + ks, out_ex[2] + ks)),
            ArrayDecl("F", 8, (out_ex[0], ks, ks)),
            ArrayDecl("Y", 32, tuple(out_ex)),
        ]
        headers = [(oc, 0, out_ex[0], 1), (oh, 0, out_ex[1], 1), (ow, 0, out_ex[2], 1), (kh, 0, ks, 1), (kw, 0, ks, 1)]
        return _Template(headers, body, arrays, fixed={kh, kw})
    if depth == 4:
        oh, ow, kh, kw = "i", "j", "p", "q"
        out_ex = [rng.choice((4, 6, 8, 12)), rng.choice((4, 6, 8, 12))]
        body = [
            _load("ta", _ref("X", _ix(oh, kh), _ix(ow, kw))),
            _load("tb", _ref("F", kh, kw)),
            _load("tc", _ref("Y", oh, ow)),
            _arith("mul", "td", "ta", "tb"),
            _arith("add", "te", "tc", "td"),
            _store(_ref("Y", oh, ow), "te"),
        ]
        arrays = [
            ArrayDecl("X", 8, (out_ex[0] + ks, out_ex[1] + ks)),
            ArrayDecl("F", 8, (ks, ks)),
            ArrayDecl("Y", 32, tuple(out_ex)),
        ]
        headers = [(oh, 0, out_ex[0], 1), (ow, 0, out_ex[1], 1), (kh, 0, ks, 1), (kw, 0, ks, 1)]
        return _Template(headers, body, arrays, fixed={kh, kw})
    oh, kh, kw = "i", "p", "q"
    n = rng.choice((8, 12, 16, 24))
    body = [
        _load("ta", _ref("X", _ix(oh, kh), kw)),
        _load("tb", _ref("F", kh, kw)),
        _load("tc", _ref("Y", oh)),
        _arith("mul", "td", "ta", "tb"),
        _arith("add", "te", "tc", "td"),
        _store(_ref("Y", oh), "te"),
    ]
    arrays = [ArrayDecl("X", 8, (n + ks, ks)), ArrayDecl("F", 8, (ks, ks)), ArrayDecl("Y", 32, (n,))]
    return _Template([(oh, 0, n, 1), (kh, 0, ks, 1), (kw, 0, ks, 1)], body, arrays, fixed={kh, kw})


def _t_transpose(rng, depth) -> _Template:
    vs = list(LOOP_VARS[:depth])
    ex = _extents(rng, depth)
    perm = vs[:-2] + [vs[-1], vs[-2]]
    body = [_load("ta", _ref("A", *vs)), _store(_ref("B", *perm), "ta")]
    ex_perm = ex[:-2] + [ex[-1], ex[-2]]
    arrays = [ArrayDecl("A", 16, tuple(ex)), ArrayDecl("B", 16, tuple(ex_perm))]
    return _Template([(v, 0, e, 1) for v, e in zip(vs, ex)], body, arrays)


def _t_reduce(rng, depth) -> _Template:
    vs = list(LOOP_VARS[:depth])
    ex = _extents(rng, depth)
    body = [
        _load("ta", _ref("A", *vs)),
        _arith("add", "sa", "sa", "ta"),
        _store(_ref("B", vs[0]), "sa"),
    ]
    arrays = [ArrayDecl("A", 16, tuple(ex)), ArrayDecl("B", 32, (ex[0],))]
    return _Template([(v, 0, e, 1) for v, e in zip(vs, ex)], body, arrays, scalars=["sa"])


def _t_threshold(rng, depth) -> _Template:
    vs = list(LOOP_VARS[:depth])
    ex = _extents(rng, depth)
    sym = "T"
    then = (_load("ta", _ref("A", *vs)), _arith("mul", "tb", "ta", 2), _store(_ref("B", *vs), "tb"))
    other = (_store(_ref("B", *vs), 0),)
    body = [Statement("branch", cond=Condition(_ref("A", *vs), ">", sym), then_body=then, else_body=other)]
    arrays = [ArrayDecl("A", 8, tuple(ex)), ArrayDecl("B", 8, tuple(ex))]
    return _Template([(v, 0, e, 1) for v, e in zip(vs, ex)], body, arrays)


def _t_window(rng, depth) -> _Template:
    outer = list(LOOP_VARS[2:2 + depth - 2])
    i, w = "i", "j"
    ex_o = [rng.choice((2, 3, 4)) for _ in outer]
    n, k = rng.choice((8, 16, 24)), rng.choice((3, 4, 5, 8))
    body = [
        _load("ta", _ref("X", *outer, _ix(i, w))),
        _load("tb", _ref("F", w)),
        _load("tc", _ref("Y", *outer, i)),
        _arith("mul", "td", "ta", "tb"),
        _arith("add", "te", "tc", "td"),
        _store(_ref("Y", *outer, i), "te"),
    ]
    arrays = [
        ArrayDecl("X", 16, tuple(ex_o + [n + k])),
        ArrayDecl("F", 16, (k,)),
        ArrayDecl("Y", 32, tuple(ex_o + [n])),
    ]
    headers = [(v, 0, e, 1) for v, e in zip(outer, ex_o)] + [(i, 0, n, 1), (w, 0, k, 1)]
    return _Template(headers, body, arrays, fixed={w})


def _t_maxpool(rng, depth) -> _Template:
    vs = list(LOOP_VARS[:depth])
    ex = _extents(rng, depth)
    keep = vs[:-1]
    then = (_load("ta", _ref("A", *vs)), _store(_ref("M", *keep), "ta"))
    body = [Statement("branch", cond=Condition(_ref("A", *vs), ">", _ref("M", *keep)), then_body=then)]
    arrays = [ArrayDecl("A", 8, tuple(ex)), ArrayDecl("M", 8, tuple(ex[:-1]))]
    return _Template([(v, 0, e, 1) for v, e in zip(vs, ex)], body, arrays)


TEMPLATES: dict[str, Callable] = {
    "elementwise": _t_elementwise,
    "matmul": _t_matmul,
    "conv": _t_conv,
    "transpose": _t_transpose,
    "reduce": _t_reduce,
    "threshold": _t_threshold,
    "window": _t_window,
    "maxpool": _t_maxpool,
}


def _rename_arrays(t: _Template, names: _Names) -> None:
    """Templates use fixed array letters; give each operator fresh ones."""
    mapping = {a.name: names.array() for a in t.arrays}
    t.arrays = [replace(a, name=mapping[a.name]) for a in t.arrays]
    t.body = [rename_in_statement(st, mapping) for st in t.body]


def _instantiate(t: _Template, name: str, rng: random.Random, symbolic: Optional[str]) -> Operator:
    headers = list(t.headers)
    # loop order permutation among the outer (non-kernel) loops
    movable = [k for k, h in enumerate(headers) if h[0] not in t.fixed]
    if len(movable) > 1 and rng.random() < 0.6:
        order = movable[:]
        rng.shuffle(order)
        permuted = list(headers)
        for dst, src in zip(movable, order):
            permuted[dst] = headers[src]
        headers = permuted
    # step mutation keeps trips >= 1
    new = []
    for var, lo, hi, step in headers:
        if var not in t.fixed and rng.random() < 0.25:
            step = rng.choice((1, 2, 4))
            if hi < step:
                step = 1
        new.append((var, lo, hi, step))
    headers = new
    if symbolic is not None:
        cands = [k for k, h in enumerate(headers) if h[0] not in t.fixed]
        k = rng.choice(cands)
        var, lo, hi, step = headers[k]
        headers[k] = (var, lo, symbolic, step)
    return _make_operator(name, t.arrays, t.scalars, nest(headers, t.body))


def _dataflow_operator(name: str, cfg: GenConfig, rng: random.Random, force_class2: bool) -> Operator:
    lo, hi = cfg.depth_range
    depth = rng.randint(lo, hi)
    kind = rng.choice(tuple(TEMPLATES))
    t = TEMPLATES[kind](rng, depth)
    _rename_arrays(t, _Names())
    symbolic = None
    if kind != "threshold" and (force_class2 or rng.random() < 0.4):
        symbolic = rng.choice(("N", "N", "M", "H"))
    op = _instantiate(t, name, rng, symbolic)
    return op


def gen_dataflow_program(cfg: GenConfig, rng: random.Random) -> Workload:
    """Template loop nests with permuted order and mutated steps; >= 1 Class II op."""
    for _ in range(1000):
        n = rng.randint(1, 3)
        names = _op_names(n)
        rng.shuffle(names)
        forced = rng.randrange(n)
        ops = [_dataflow_operator(nm, cfg, rng, k == forced) for k, nm in enumerate(names)]
        if not any(classify_operator(op) is OpClass.II for op in ops):
            continue
        names = [op.name for op in ops]
        w = Workload(DataflowGraph(tuple(names), _random_edges(names, rng)), tuple(ops), HardwareParams(), None)
        if acceptable(w, cfg):
            return w
    raise RuntimeError("dataflow generator failed to produce an acceptable workload")


# ---------------------------------------------------------------------------
# rewriting helpers


def _rename_operand(x, mapping: dict[str, str]):
    if isinstance(x, str):
        return mapping.get(x, x)
    if isinstance(x, ArrayRef):
        return ArrayRef(
            mapping.get(x.name, x.name),
            tuple(Index(tuple(mapping.get(v, v) for v in ix.vars), ix.offset) for ix in x.index),
        )
    return x


def rename_in_statement(st: Statement, mapping: dict[str, str]) -> Statement:
    cond = st.cond
    if cond is not None:
        cond = Condition(_rename_operand(cond.lhs, mapping), cond.rel, _rename_operand(cond.rhs, mapping))
    return replace(
        st,
        operands=tuple(_rename_operand(x, mapping) for x in st.operands),
        cond=cond,
        then_body=tuple(rename_in_statement(s, mapping) for s in st.then_body),
        else_body=tuple(rename_in_statement(s, mapping) for s in st.else_body),
    )


def rename_in_loop(lp: LoopNode, mapping: dict[str, str]) -> LoopNode:
    body = tuple(rename_in_loop(n, mapping) if isinstance(n, LoopNode) else rename_in_statement(n, mapping)
                 for n in lp.body)
    upper = mapping.get(lp.upper, lp.upper) if isinstance(lp.upper, str) else lp.upper
    return replace(lp, induction_var=mapping.get(lp.induction_var, lp.induction_var), upper=upper, body=body)


def rename_locals(w: Workload, rng: random.Random) -> Workload:
    """Label-preserving surface rewrite: per operator, arrays and temporaries
    get a random bijection within their name pools. Loop variables, scalars,
    input symbols and operator names are kept."""
    ops = []
    for op in w.operators:
        arrays = [a.name for a in op.arrays]
        loop_vars = {lp.induction_var for lp in iter_loops(op.root)}
        temps = sorted(n for n in local_names(op) - loop_vars - set(op.scalars) if n in TEMP_NAMES)
        mapping = dict(zip(arrays, rng.sample(ARRAY_NAMES, len(arrays))))
        mapping.update(zip(temps, rng.sample(TEMP_NAMES, len(temps))))
        ops.append(replace(
            op,
            arrays=tuple(replace(a, name=mapping[a.name]) for a in op.arrays),
            root=rename_in_loop(op.root, mapping),
        ))
    return replace(w, operators=tuple(ops))


def _map_loops(lp: LoopNode, fn: Callable[[LoopNode], LoopNode]) -> LoopNode:
    """Bottom-up rewrite of every loop node."""
    body = tuple(_map_loops(n, fn) if isinstance(n, LoopNode) else n for n in lp.body)
    return fn(replace(lp, body=body))


def _replace_operator(w: Workload, op: Operator) -> Workload:
    ops = tuple(op if o.name == op.name else o for o in w.operators)
    return replace(w, operators=ops)


def _index_uses(ref: ArrayRef, var: str) -> list[int]:
    return [k for k, ix in enumerate(ref.index) if var in ix.vars]


# ---------------------------------------------------------------------------
# mutation tier


def _kernel_swap(w: Workload, rng: random.Random) -> Workload:
    """Widen 3-wide kernel loops to 5 (3x3 -> 5x5 stencil)."""
    cands = [op for op in w.operators if any(lp.upper == 3 and lp.lower == 0 for lp in iter_loops(op.root))]
    if not cands:
        raise MutationInapplicable("no 3-wide kernel loop")
    op = rng.choice(cands)
    kvars = {lp.induction_var for lp in iter_loops(op.root) if lp.upper == 3 and lp.lower == 0}
    root = _map_loops(op.root, lambda lp: replace(lp, upper=5) if lp.induction_var in kvars else lp)
    arrays = tuple(replace(a, dims=_grown_dims(op, a, {v: 2 for v in kvars})) for a in op.arrays)
    return _replace_operator(w, replace(op, root=root, arrays=arrays))


def _fission_candidates(lp: LoopNode, parent_ok: bool) -> list[LoopNode]:
    out = []
    stmts = [n for n in lp.body if not isinstance(n, LoopNode)]
    if parent_ok and len(stmts) == len(lp.body) and len(stmts) >= 2:
        out.append(lp)
    for n in lp.body:
        if isinstance(n, LoopNode):
            out += _fission_candidates(n, True)
    return out


def _fission(w: Workload, rng: random.Random) -> Workload:
    """Split an innermost loop body into two sibling loops with equal headers."""
    cands = [(op, lp) for op in w.operators for lp in _fission_candidates(op.root, False)]
    if not cands:
        raise MutationInapplicable("no fissionable loop")
    op, target = rng.choice(cands)
    cut = rng.randint(1, len(target.body) - 1)
    first = replace(target, body=target.body[:cut])
    second = replace(target, body=target.body[cut:])
    root = _splice(op.root, target, (first, second))
    return _replace_operator(w, replace(op, root=root))


def _splice(lp: LoopNode, target, replacement: tuple) -> LoopNode:
    body = []
    for n in lp.body:
        if n is target:
            body += list(replacement)
        elif isinstance(n, LoopNode):
            body.append(_splice(n, target, replacement))
        else:
            body.append(n)
    return replace(lp, body=tuple(body))


def _fusion_sites(lp: LoopNode) -> list[tuple[LoopNode, int]]:
    out = []
    for k in range(len(lp.body) - 1):
        a, b = lp.body[k], lp.body[k + 1]
        if isinstance(a, LoopNode) and isinstance(b, LoopNode) and (a.lower, a.upper, a.step, a.pragma) == (
            b.lower, b.upper, b.step, b.pragma,
        ):
            out.append((lp, k))
    for n in lp.body:
        if isinstance(n, LoopNode):
            out += _fusion_sites(n)
    return out


def _fusion(w: Workload, rng: random.Random) -> Workload:
    """Merge two adjacent sibling loops with identical headers."""
    cands = [(op, site) for op in w.operators for site in _fusion_sites(op.root)]
    if not cands:
        raise MutationInapplicable("no adjacent loops with equal headers")
    op, (parent, k) = rng.choice(cands)
    a, b = parent.body[k], parent.body[k + 1]
    b = rename_in_loop(b, {b.induction_var: a.induction_var})
    merged = replace(a, body=a.body + b.body)
    new_parent = replace(parent, body=parent.body[:k] + (merged,) + parent.body[k + 2:])
    if parent is op.root:
        root = new_parent
    else:
        root = _splice(op.root, parent, (new_parent,))
    return _replace_operator(w, replace(op, root=root))


def _duplicate(w: Workload, rng: random.Random) -> Workload:
    """Copy an operator under a fresh name with jittered literal bounds."""
    if len(w.operators) >= 6:
        raise MutationInapplicable("graph already large")
    src = rng.choice(w.operators)
    used = {op.name for op in w.operators}
    name = next(n for n in _op_names(26) if n not in used)

    growth: dict[str, int] = {}

    def jitter(lp: LoopNode) -> LoopNode:
        if isinstance(lp.upper, int) and lp.upper - lp.lower > 3:
            hi = max(lp.lower + 1, round(lp.upper * rng.uniform(0.75, 1.25)))
            growth[lp.induction_var] = max(0, hi - lp.upper)
            return replace(lp, upper=hi)
        return lp

    root = _map_loops(src.root, jitter)
    arrays = tuple(replace(a, dims=_grown_dims(src, a, growth)) for a in src.arrays)
    dup = replace(src, name=name, root=root, arrays=arrays)
    graph = DataflowGraph(w.graph.nodes + (name,), w.graph.edges + ((src.name, name),))
    return replace(w, graph=graph, operators=w.operators + (dup,))


def _grown_dims(op: Operator, decl: ArrayDecl, growth: dict[str, int]) -> tuple[int, ...]:
    """Extend array extents so subscripts stay in range after loops grow."""
    extra = [0] * len(decl.dims)
    for st in iter_statements((op.root,)):
        xs = list(st.operands) + ([st.cond.lhs, st.cond.rhs] if st.cond else [])
        for x in xs:
            if isinstance(x, ArrayRef) and x.name == decl.name:
                for k, ix in enumerate(x.index):
                    extra[k] = max(extra[k], sum(growth.get(v, 0) for v in ix.vars))
    return tuple(d + e for d, e in zip(decl.dims, extra))


MUTATIONS: dict[str, Callable[[Workload, random.Random], Workload]] = {
    "kernel_swap": _kernel_swap,
    "fission": _fission,
    "fusion": _fusion,
    "duplicate": _duplicate,
}


def mutate_semantic(
    w: Workload,
    rng: random.Random,
    rule: Optional[str] = None,
    external: Optional[Callable[[str], str]] = None,
) -> Workload:
    """Apply one rewrite. With ``rule`` set, only that rewrite is tried.

    ``external`` replaces the built-in rules with a text-to-text mutator over
    the workload's JSON form; its output is parsed and re-validated.
    """
    if external is not None:
        out = workload_from_json(external(workload_to_json(w)))
        validate_workload(out)
        return out
    rules = [rule] if rule is not None else rng.sample(tuple(MUTATIONS), len(MUTATIONS))
    for name in rules:
        try:
            out = MUTATIONS[name](w, rng)
        except MutationInapplicable:
            continue
        validate_workload(out)
        return out
    raise MutationInapplicable(f"no rewrite applies (tried {rules})")


# ---------------------------------------------------------------------------
# hardware parameters and inputs


def _annotatable(op: Operator, pragma: str) -> list[LoopNode]:
    out = []
    for lp in iter_loops(op.root):
        if not isinstance(lp.upper, int):
            continue  # symbolic bounds never get replication pragmas
        if pragma == "parallel_for" and any(is_accumulation(s, op.scalars) for s in iter_statements(lp.body)):
            continue
        out.append(lp)
    return out


def inject_hw_params(w: Workload, cfg: GenConfig, rng: random.Random) -> Workload:
    params = HardwareParams(
        mem_delay_read=rng.choice(cfg.mem_delay_choices),
        mem_delay_write=rng.choice(cfg.mem_delay_choices),
        parallel_lanes=rng.choice(cfg.lanes_choices),
    )
    out = replace(w, params=params)
    if rng.random() < 0.5:
        pragma = rng.choice(("unroll_full", "parallel_for"))
        sites = [(op, lp) for op in w.operators for lp in _annotatable(op, pragma)]
        rng.shuffle(sites)
        for op, lp in sites:
            root = _splice(op.root, lp, (replace(lp, pragma=pragma),)) if lp is not op.root else replace(lp, pragma=pragma)
            cand = _replace_operator(out, replace(op, root=root))
            if acceptable(cand, cfg):
                return cand
    return out


def vary_inputs(
    w: Workload,
    cfg: GenConfig,
    rng: random.Random,
    k: Optional[int] = None,
    base: Optional[dict[str, int]] = None,
) -> list[RuntimeInput]:
    """``k`` bindings, each symbol uniform in [ceil((1-v)b), floor((1+v)b)]."""
    symbols = w.input_symbols
    if not symbols:
        raise NoInputSymbols("workload has no input symbols")
    k = cfg.variants if k is None else k
    out = []
    for _ in range(k):
        binding = []
        for s in symbols:
            b = (base or {}).get(s, cfg.input_base)
            lo = math.ceil((1 - cfg.input_variation) * b)
            hi = math.floor((1 + cfg.input_variation) * b)
            binding.append((s, rng.randint(lo, hi)))
        out.append(RuntimeInput(tuple(binding)))
    return out


# ---------------------------------------------------------------------------
# records


def reasoning_text(features: FeatureVector) -> str:
    f = features
    return (f"<think> modules = {f.module_count} mux = {f.mux_count} mul = {f.mul_count} "
            f"add = {f.add_count} ff = {f.ff_count} ports = {f.mem_ports} </think>")


def format_record(
    w: Workload,
    input: Optional[RuntimeInput],
    fmt: str,
    id: str = "rec",
    source: str = "ast",
) -> DatasetRecord:
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    if input is None and not w.input_symbols:
        input = RuntimeInput()
    w = replace(w, input=input)
    labels, features = evaluate_full(w, input)
    text = reasoning_text(features) if fmt == "reasoning" else None
    return DatasetRecord(id, source, w, labels, features, fmt, text)


def _variant_count(remaining: int, k: int) -> int:
    v = min(k, remaining)
    if remaining - v == 1 and v > 2:
        v -= 1
    return v


def _tier_counts(cfg: GenConfig, n: int) -> tuple[int, int, int]:
    a = round(n * cfg.mix[0])
    d = round(n * cfg.mix[1])
    return a, d, n - a - d


def _mutation_program(cfg: GenConfig, rng: random.Random, class1: bool) -> Workload:
    for _ in range(200):
        base = gen_ast_program(cfg, rng) if (class1 or rng.random() < 0.3) else gen_dataflow_program(cfg, rng)
        try:
            w = mutate_semantic(base, rng)
            if rng.random() < 0.3:
                w = mutate_semantic(w, rng)
        except MutationInapplicable:
            continue
        if class1 and w.input_symbols:
            continue
        if acceptable(w, cfg):
            return w
    raise RuntimeError("mutation tier failed to produce an acceptable workload")


def _fmt_for(cfg: GenConfig, index: int) -> str:
    if cfg.format == "both":
        return FORMATS[index % 2]
    return cfg.format


def build_dataset(cfg: GenConfig, n: int) -> Iterator[DatasetRecord]:
    """Yield ``n`` records: AST tier, then dataflow tier, then mutation tier."""
    if n < 1:
        raise ValueError("n must be >= 1")
    counts = dict(zip(SOURCES, _tier_counts(cfg, n)))
    emitted = 0
    for source in SOURCES:
        remaining = counts[source]
        widx = 0
        while remaining > 0:
            rng = random.Random(f"{cfg.seed}:{source}:{widx}")
            if source == "ast":
                w = gen_ast_program(cfg, rng)
                # a single free slot cannot hold two input variants
                while remaining == 1 and w.input_symbols:
                    w = gen_ast_program(cfg, rng)
            elif source == "dataflow":
                w = gen_dataflow_program(cfg, rng)
            else:
                w = _mutation_program(cfg, rng, class1=remaining == 1)
            for _ in range(20):
                hw = inject_hw_params(w, cfg, rng)
                if acceptable(hw, cfg):
                    break
            else:
                hw = replace(w, params=HardwareParams(min(cfg.mem_delay_choices), min(cfg.mem_delay_choices)))
            w = hw
            if w.input_symbols:
                v = _variant_count(remaining, cfg.variants)
                inputs = vary_inputs(w, cfg, rng, k=v)
            else:
                inputs = [RuntimeInput()]
            for j, inp in enumerate(inputs):
                rec = format_record(w, inp, _fmt_for(cfg, emitted), id=f"{source}-{widx:05d}-{j}", source=source)
                if not labels_fit(rec.labels):
                    raise RuntimeError(f"label overflow in {rec.id}")
                yield rec
                emitted += 1
                remaining -= 1
            widx += 1


def write_jsonl(records, path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
