"""Dataflow-program IR: loop-tree operators, a task graph, hardware
parameters and runtime inputs, plus rendering to C-like text."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Sequence, Union

STATEMENT_KINDS = (
    "array_load", "array_store", "add", "sub", "mul", "div", "compare", "branch",
)
ARITH_KINDS = ("add", "sub", "mul", "div", "compare")
PRAGMAS = ("none", "unroll_full", "parallel_for")
RELATIONS = ("<", "<=", ">", ">=", "==", "!=")

PRAGMA_TEXT = {
    "unroll_full": "#pragma clang loop unroll(full)",
    "parallel_for": "#pragma omp parallel for",
}
ARITH_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}

# Reserved segment delimiters; each is a single token for the tokenizer.
SEG_GRAPH = "<G>"
SEG_PARAMS = "<PARAMS>"
SEG_DATA = "<DATA>"
MAX_OPERATORS = 16


def op_delimiter(k: int) -> str:
    return f"<OP {k}>"


class InvalidWorkload(ValueError):
    pass


class CyclicGraph(InvalidWorkload):
    pass


class NegativeRange(ValueError):
    pass


class OpClass(str, Enum):
    I = "I"
    II = "II"


@dataclass(frozen=True)
class Index:
    """One array subscript: a sum of induction variables plus an offset."""

    vars: tuple[str, ...] = ()
    offset: int = 0

    def render(self) -> str:
        terms = list(self.vars)
        if not terms:
            return str(self.offset)
        text = " + ".join(terms)
        if self.offset:
            text += f" {'+' if self.offset > 0 else '-'} {abs(self.offset)}"
        return text


@dataclass(frozen=True)
class ArrayRef:
    name: str
    index: tuple[Index, ...]

    def render(self) -> str:
        return self.name + "".join(f"[{ix.render()}]" for ix in self.index)


Operand = Union[str, int, ArrayRef]


def render_operand(x: Operand) -> str:
    if isinstance(x, ArrayRef):
        return x.render()
    return str(x)


@dataclass(frozen=True)
class Condition:
    lhs: Operand
    rel: str
    rhs: Operand

    def render(self) -> str:
        return f"{render_operand(self.lhs)} {self.rel} {render_operand(self.rhs)}"


@dataclass(frozen=True)
class Statement:
    """One three-address statement.

    Operand layout by kind:
      array_load   (dst, ArrayRef)
      array_store  (ArrayRef, src)
      arithmetic   (dst, src1, src2); ``rel`` holds the relation for compare
      branch       () with ``cond``, ``then_body`` and ``else_body``
    """

    kind: str
    operands: tuple[Operand, ...] = ()
    rel: str = "<"
    cond: Optional[Condition] = None
    then_body: tuple["Statement", ...] = ()
    else_body: tuple["Statement", ...] = ()


@dataclass(frozen=True)
class LoopNode:
    induction_var: str
    lower: int
    upper: Union[int, str]
    step: int = 1
    pragma: str = "none"
    body: tuple[Union[Statement, "LoopNode"], ...] = ()

    @property
    def symbolic(self) -> bool:
        return isinstance(self.upper, str)


@dataclass(frozen=True)
class ArrayDecl:
    name: str
    bitwidth: int
    dims: tuple[int, ...]


@dataclass(frozen=True)
class Operator:
    name: str
    arrays: tuple[ArrayDecl, ...]
    scalars: tuple[str, ...]
    root: LoopNode
    input_symbols: tuple[str, ...] = ()


@dataclass(frozen=True)
class DataflowGraph:
    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class HardwareParams:
    mem_delay_read: int = 2
    mem_delay_write: int = 2
    parallel_lanes: int = 4


@dataclass(frozen=True)
class RuntimeInput:
    bindings: tuple[tuple[str, int], ...] = ()

    def as_dict(self) -> dict[str, int]:
        return dict(self.bindings)

    def get(self, name: str) -> Optional[int]:
        for k, v in self.bindings:
            if k == name:
                return v
        return None


@dataclass(frozen=True)
class Workload:
    graph: DataflowGraph
    operators: tuple[Operator, ...]
    params: HardwareParams = field(default_factory=HardwareParams)
    input: Optional[RuntimeInput] = None

    def operator(self, name: str) -> Operator:
        for op in self.operators:
            if op.name == name:
                return op
        raise KeyError(name)

    @property
    def input_symbols(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for op in self.operators:
            for s in op.input_symbols:
                seen.setdefault(s, None)
        return tuple(seen)


@dataclass(frozen=True)
class Span:
    label: str
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentMap:
    spans: tuple[Span, ...]

    @property
    def length(self) -> int:
        return self.spans[-1].end if self.spans else 0

    def labels(self) -> tuple[str, ...]:
        return tuple(s.label for s in self.spans)

    def find(self, label: str) -> Optional[Span]:
        for s in self.spans:
            if s.label == label:
                return s
        return None

    def tiles(self, n_tokens: int) -> bool:
        pos = 0
        for s in self.spans:
            if s.start != pos or s.end < s.start:
                return False
            pos = s.end
        return pos == n_tokens


# ---------------------------------------------------------------------------
# traversal helpers


def iter_statements(body: Sequence[Union[Statement, LoopNode]]) -> Iterator[Statement]:
    """All statements under ``body`` including branch arms (depth-first)."""
    for node in body:
        if isinstance(node, LoopNode):
            yield from iter_statements(node.body)
        else:
            yield node
            if node.kind == "branch":
                yield from iter_statements(node.then_body)
                yield from iter_statements(node.else_body)


def iter_loops(loop: LoopNode) -> Iterator[LoopNode]:
    yield loop
    for node in loop.body:
        if isinstance(node, LoopNode):
            yield from iter_loops(node)


def loop_depth(loop: LoopNode) -> int:
    inner = [loop_depth(n) for n in loop.body if isinstance(n, LoopNode)]
    return 1 + max(inner, default=0)


def operand_names(x: Operand) -> set[str]:
    if isinstance(x, str):
        return {x}
    if isinstance(x, ArrayRef):
        return {v for ix in x.index for v in ix.vars}
    return set()


def condition_symbols(cond: Condition) -> set[str]:
    return operand_names(cond.lhs) | operand_names(cond.rhs)


def _referenced_symbols(op: Operator) -> set[str]:
    refs: set[str] = set()
    for lp in iter_loops(op.root):
        if isinstance(lp.upper, str):
            refs.add(lp.upper)
    for st in iter_statements((op.root,)):
        if st.kind == "branch" and st.cond is not None:
            refs |= condition_symbols(st.cond)
    return refs


def local_names(op: Operator) -> set[str]:
    """Names defined inside the operator: induction vars, scalars, temps."""
    names = {lp.induction_var for lp in iter_loops(op.root)} | set(op.scalars)
    for st in iter_statements((op.root,)):
        if st.kind in ARITH_KINDS or st.kind == "array_load":
            if isinstance(st.operands[0], str):
                names.add(st.operands[0])
    return names


def free_symbols(op: Operator) -> tuple[str, ...]:
    """Symbols referenced by bounds/conditions but not defined locally."""
    return tuple(sorted(_referenced_symbols(op) - local_names(op)))


def is_accumulation(st: Statement, scalars: Sequence[str]) -> bool:
    """Loop-carried scalar accumulation: ``s = s <op> x`` on a declared scalar."""
    if st.kind not in ARITH_KINDS:
        return False
    dst = st.operands[0]
    return isinstance(dst, str) and dst in scalars and dst in st.operands[1:]


# ---------------------------------------------------------------------------
# validation


def _check_array_refs(op: Operator, x: Operand, declared: dict[str, ArrayDecl]) -> None:
    if isinstance(x, ArrayRef):
        if x.name not in declared:
            raise InvalidWorkload(f"{op.name}: undeclared array {x.name}")
        if len(x.index) != len(declared[x.name].dims):
            raise InvalidWorkload(f"{op.name}: rank mismatch on {x.name}")


def _validate_body(op, body, declared, scope: set[str], in_branch=False) -> None:
    for node in body:
        if isinstance(node, LoopNode):
            _validate_loop(op, node, declared, scope)
            continue
        st = node
        if st.kind not in STATEMENT_KINDS:
            raise InvalidWorkload(f"{op.name}: unknown statement kind {st.kind!r}")
        if st.kind == "branch":
            if st.cond is None or st.cond.rel not in RELATIONS:
                raise InvalidWorkload(f"{op.name}: malformed branch")
            for x in (st.cond.lhs, st.cond.rhs):
                _check_array_refs(op, x, declared)
            allowed = scope | set(op.scalars) | set(op.input_symbols)
            missing = condition_symbols(st.cond) - allowed
            if missing:
                raise InvalidWorkload(f"{op.name}: branch references undeclared {sorted(missing)}")
            _validate_body(op, st.then_body, declared, scope, True)
            _validate_body(op, st.else_body, declared, scope, True)
            continue
        arity = {"array_load": 2, "array_store": 2}.get(st.kind, 3)
        if len(st.operands) != arity:
            raise InvalidWorkload(f"{op.name}: {st.kind} expects {arity} operands")
        if st.kind == "compare" and st.rel not in RELATIONS:
            raise InvalidWorkload(f"{op.name}: bad relation {st.rel!r}")
        if st.kind == "array_load" and not isinstance(st.operands[1], ArrayRef):
            raise InvalidWorkload(f"{op.name}: array_load needs an array source")
        if st.kind == "array_store" and not isinstance(st.operands[0], ArrayRef):
            raise InvalidWorkload(f"{op.name}: array_store needs an array target")
        for x in st.operands:
            _check_array_refs(op, x, declared)
            if isinstance(x, ArrayRef):
                unknown = operand_names(x) - scope
                if unknown:
                    raise InvalidWorkload(f"{op.name}: index uses unbound {sorted(unknown)}")


def _validate_loop(op, lp: LoopNode, declared, scope: set[str]) -> None:
    if lp.step < 1:
        raise InvalidWorkload(f"{op.name}: loop {lp.induction_var} step < 1")
    if lp.pragma not in PRAGMAS:
        raise InvalidWorkload(f"{op.name}: unknown pragma {lp.pragma!r}")
    if not isinstance(lp.lower, int):
        raise InvalidWorkload(f"{op.name}: symbolic lower bound")
    if isinstance(lp.upper, int) and lp.lower > lp.upper:
        raise InvalidWorkload(f"{op.name}: loop {lp.induction_var} has lower > upper")
    if lp.induction_var in scope:
        raise InvalidWorkload(f"{op.name}: induction var {lp.induction_var} shadows outer loop")
    if lp.pragma == "parallel_for":
        if any(is_accumulation(st, op.scalars) for st in iter_statements(lp.body)):
            raise InvalidWorkload(f"{op.name}: parallel_for over scalar accumulation")
    _validate_body(op, lp.body, declared, scope | {lp.induction_var})


def validate_operator(op: Operator) -> None:
    declared = {a.name: a for a in op.arrays}
    if len(declared) != len(op.arrays):
        raise InvalidWorkload(f"{op.name}: duplicate array names")
    _validate_loop(op, op.root, declared, set())
    if set(op.input_symbols) != set(free_symbols(op)):
        raise InvalidWorkload(
            f"{op.name}: input_symbols {sorted(op.input_symbols)} != free symbols {list(free_symbols(op))}"
        )


def validate_workload(w: Workload) -> None:
    names = [op.name for op in w.operators]
    if list(w.graph.nodes) != names:
        raise InvalidWorkload("operators must be listed in graph node order")
    if len(set(names)) != len(names):
        raise InvalidWorkload("duplicate operator names")
    if len(names) > MAX_OPERATORS:
        raise InvalidWorkload(f"at most {MAX_OPERATORS} operators supported")
    for a, b in w.graph.edges:
        if a not in names or b not in names:
            raise InvalidWorkload(f"edge ({a}, {b}) references unknown node")
    topo_order(w.graph)
    for op in w.operators:
        validate_operator(op)
    p = w.params
    if min(p.mem_delay_read, p.mem_delay_write, p.parallel_lanes) < 1:
        raise InvalidWorkload("hardware params must be >= 1")
    if w.input is not None:
        symbols = set(w.input_symbols)
        for k, v in w.input.bindings:
            if k not in symbols:
                raise InvalidWorkload(f"input binds unknown symbol {k}")
            if v < 0:
                raise InvalidWorkload(f"input {k} is negative")


# ---------------------------------------------------------------------------
# analyses


def classify_operator(op: Operator) -> OpClass:
    """Class II iff any loop bound or branch condition reads an input symbol."""
    inputs = set(op.input_symbols)
    return OpClass.II if _referenced_symbols(op) & inputs else OpClass.I


def topo_order(g: DataflowGraph) -> list[str]:
    """Kahn's algorithm; among ready nodes the earliest-declared goes first."""
    indeg = {n: 0 for n in g.nodes}
    succ: dict[str, list[str]] = {n: [] for n in g.nodes}
    for a, b in g.edges:
        succ[a].append(b)
        indeg[b] += 1
    rank = {n: i for i, n in enumerate(g.nodes)}
    ready = sorted((n for n in g.nodes if indeg[n] == 0), key=rank.__getitem__)
    order: list[str] = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
        ready.sort(key=rank.__getitem__)
    if len(order) != len(g.nodes):
        raise CyclicGraph("dataflow graph contains a cycle")
    return order


class _Unknown:
    def __repr__(self) -> str:
        return "Unknown"


Unknown = _Unknown()


def resolve_bound(bound: Union[int, str], input: Optional[RuntimeInput]):
    if isinstance(bound, int):
        return bound
    if input is None:
        return Unknown
    v = input.get(bound)
    return Unknown if v is None else v


def trip_count(loop: LoopNode, input: Optional[RuntimeInput] = None):
    upper = resolve_bound(loop.upper, input)
    if upper is Unknown:
        return Unknown
    if upper < loop.lower:
        raise NegativeRange(f"loop {loop.induction_var}: upper {upper} < lower {loop.lower}")
    return math.ceil((upper - loop.lower) / loop.step)


# ---------------------------------------------------------------------------
# rendering


def _render_stmt(st: Statement, indent: str) -> list[str]:
    o = st.operands
    if st.kind == "array_load":
        return [f"{indent}{render_operand(o[0])} = {render_operand(o[1])};"]
    if st.kind == "array_store":
        return [f"{indent}{render_operand(o[0])} = {render_operand(o[1])};"]
    if st.kind == "compare":
        return [f"{indent}{o[0]} = {render_operand(o[1])} {st.rel} {render_operand(o[2])};"]
    if st.kind == "branch":
        lines = [f"{indent}if ({st.cond.render()}) {{"]
        for s in st.then_body:
            lines += _render_stmt(s, indent + "  ")
        if st.else_body:
            lines.append(f"{indent}}} else {{")
            for s in st.else_body:
                lines += _render_stmt(s, indent + "  ")
        lines.append(f"{indent}}}")
        return lines
    sym = ARITH_SYMBOL[st.kind]
    return [f"{indent}{o[0]} = {render_operand(o[1])} {sym} {render_operand(o[2])};"]


def _render_loop(lp: LoopNode, indent: str) -> list[str]:
    lines = []
    if lp.pragma != "none":
        lines.append(indent + PRAGMA_TEXT[lp.pragma])
    v = lp.induction_var
    lines.append(f"{indent}for ({v} = {lp.lower}; {v} < {lp.upper}; {v} = {v} + {lp.step}) {{")
    for node in lp.body:
        if isinstance(node, LoopNode):
            lines += _render_loop(node, indent + "  ")
        else:
            lines += _render_stmt(node, indent + "  ")
    lines.append(indent + "}")
    return lines


def render_operator(op: Operator) -> str:
    args = [f"int {a.name}" + "".join(f"[{d}]" for d in a.dims) for a in op.arrays]
    args += [f"int {s}" for s in op.input_symbols]
    lines = [f"void {op.name}({', '.join(args)}) {{"]
    if op.scalars:
        lines.append("  int " + ", ".join(op.scalars) + ";")
    lines += _render_loop(op.root, "  ")
    lines.append("}")
    return "\n".join(lines)


def render_graph(g: DataflowGraph) -> str:
    parts = ["graph {", " ".join(g.nodes), ";"]
    parts += [f"{a} >> {b};" for a, b in g.edges]
    return " ".join(parts + ["}"])


def render_params(p: HardwareParams) -> str:
    return (f"mem_delay_read = {p.mem_delay_read}; mem_delay_write = {p.mem_delay_write}; "
            f"parallel_lanes = {p.parallel_lanes};")


def render_input(x: RuntimeInput) -> str:
    return ", ".join(f"{k} = {v}" for k, v in x.bindings)


def segment_texts(w: Workload) -> list[tuple[str, str]]:
    """(label, text) per segment; each text starts with its delimiter token."""
    segs = [("G", f"{SEG_GRAPH} {render_graph(w.graph)}")]
    for k, op in enumerate(w.operators):
        segs.append((f"OP{k}", f"{op_delimiter(k)}\n{render_operator(op)}"))
    segs.append(("PARAMS", f"{SEG_PARAMS} {render_params(w.params)}"))
    if w.input is not None and w.input.bindings:
        segs.append(("DATA", f"{SEG_DATA} {render_input(w.input)}"))
    return segs


def render_workload(w: Workload, tokenizer=None) -> tuple[str, SegmentMap]:
    """Render to text plus a SegmentMap over ``tokenizer``'s token stream."""
    if tokenizer is None:
        from dfcost.codec import default_tokenizer

        tokenizer = default_tokenizer()
    segs = segment_texts(w)
    spans, pos = [], 0
    for label, text in segs:
        n = len(tokenizer.tokenize(text).tokens)
        spans.append(Span(label, pos, pos + n))
        pos += n
    return "\n".join(t for _, t in segs), SegmentMap(tuple(spans))


# ---------------------------------------------------------------------------
# JSON serialization


def _operand_to_json(x: Operand):
    if isinstance(x, ArrayRef):
        return {"array": x.name, "index": [[list(ix.vars), ix.offset] for ix in x.index]}
    return x


def _operand_from_json(d) -> Operand:
    if isinstance(d, dict):
        return ArrayRef(d["array"], tuple(Index(tuple(v), o) for v, o in d["index"]))
    return d


def _stmt_to_json(st: Statement) -> dict:
    d: dict = {"kind": st.kind, "operands": [_operand_to_json(x) for x in st.operands]}
    if st.kind == "compare":
        d["rel"] = st.rel
    if st.kind == "branch":
        d["cond"] = [_operand_to_json(st.cond.lhs), st.cond.rel, _operand_to_json(st.cond.rhs)]
        d["then_body"] = [_stmt_to_json(s) for s in st.then_body]
        d["else_body"] = [_stmt_to_json(s) for s in st.else_body]
    return d


def _stmt_from_json(d: dict) -> Statement:
    cond = None
    if d.get("cond") is not None:
        lhs, rel, rhs = d["cond"]
        cond = Condition(_operand_from_json(lhs), rel, _operand_from_json(rhs))
    return Statement(
        kind=d["kind"],
        operands=tuple(_operand_from_json(x) for x in d.get("operands", ())),
        rel=d.get("rel", "<"),
        cond=cond,
        then_body=tuple(_stmt_from_json(s) for s in d.get("then_body", ())),
        else_body=tuple(_stmt_from_json(s) for s in d.get("else_body", ())),
    )


def _loop_to_json(lp: LoopNode) -> dict:
    return {
        "induction_var": lp.induction_var,
        "lower": lp.lower,
        "upper": lp.upper,
        "step": lp.step,
        "pragma": lp.pragma,
        "body": [_loop_to_json(n) if isinstance(n, LoopNode) else _stmt_to_json(n) for n in lp.body],
    }


def _loop_from_json(d: dict) -> LoopNode:
    body = tuple(_loop_from_json(n) if "induction_var" in n else _stmt_from_json(n) for n in d["body"])
    return LoopNode(d["induction_var"], d["lower"], d["upper"], d["step"], d["pragma"], body)


def workload_to_dict(w: Workload) -> dict:
    return {
        "graph": {"nodes": list(w.graph.nodes), "edges": [list(e) for e in w.graph.edges]},
        "operators": [
            {
                "name": op.name,
                "arrays": [[a.name, a.bitwidth, list(a.dims)] for a in op.arrays],
                "scalars": list(op.scalars),
                "root": _loop_to_json(op.root),
                "input_symbols": list(op.input_symbols),
            }
            for op in w.operators
        ],
        "params": {
            "mem_delay_read": w.params.mem_delay_read,
            "mem_delay_write": w.params.mem_delay_write,
            "parallel_lanes": w.params.parallel_lanes,
        },
        "input": None if w.input is None else {"bindings": [list(b) for b in w.input.bindings]},
    }


def workload_from_dict(d: dict) -> Workload:
    ops = tuple(
        Operator(
            name=o["name"],
            arrays=tuple(ArrayDecl(n, b, tuple(dims)) for n, b, dims in o["arrays"]),
            scalars=tuple(o["scalars"]),
            root=_loop_from_json(o["root"]),
            input_symbols=tuple(o["input_symbols"]),
        )
        for o in d["operators"]
    )
    inp = d.get("input")
    return Workload(
        graph=DataflowGraph(tuple(d["graph"]["nodes"]), tuple(tuple(e) for e in d["graph"]["edges"])),
        operators=ops,
        params=HardwareParams(**d["params"]),
        input=None if inp is None else RuntimeInput(tuple((k, v) for k, v in inp["bindings"])),
    )


def workload_to_json(w: Workload) -> str:
    return json.dumps(workload_to_dict(w), sort_keys=True)


def workload_from_json(text: str) -> Workload:
    return workload_from_dict(json.loads(text))
