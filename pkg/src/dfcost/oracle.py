"""Analytic profiler producing ground-truth cost labels.

Stands in for an HLS + physical-synthesis + RTL-simulation flow. All
coefficients below are fixed constants of this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

from dfcost.ir import (
    ARITH_KINDS,
    ArrayRef,
    Condition,
    LoopNode,
    NegativeRange,
    Operator,
    RuntimeInput,
    Statement,
    Workload,
    is_accumulation,
    iter_loops,
    iter_statements,
    operand_names,
    topo_order,
    trip_count,
    Unknown,
)

# register widths (bits)
FF_COUNTER = 16
FF_SCALAR = 32
FF_ACCUMULATOR = 32
# area weights, in deci-units (area = Σ/10)
AREA_DECI_FF = 10
AREA_DECI_MUL = 120
AREA_DECI_ADD = 20
AREA_DECI_MUX = 30
AREA_DECI_PORT = 5
# power in milli-units: 0.01·area + 0.05·statements
POWER_MILLI_PER_STMT = 50

LATENCY = {"add": 1, "sub": 1, "compare": 1, "mul": 3, "div": 8}
HASH_MULT = 2654435761
SCALAR_RESET = 0

__all__ = [
    "CostVector", "FeatureVector", "UnresolvableTrip", "UnboundSymbol", "NegativeRange",
    "evaluate_static", "evaluate_cycles", "evaluate_full", "synthetic_element",
]


class UnresolvableTrip(ValueError):
    pass


class UnboundSymbol(KeyError):
    pass


@dataclass(frozen=True)
class CostVector:
    power: float
    area: float
    ff: int
    cycles: int

    @property
    def power_milli(self) -> int:
        return round(self.power * 1000)

    @property
    def area_deci(self) -> int:
        return round(self.area * 10)

    def as_dict(self) -> dict:
        return {"power": self.power, "area": self.area, "ff": self.ff, "cycles": self.cycles}


@dataclass(frozen=True)
class FeatureVector:
    module_count: int
    mux_count: int
    mul_count: int
    add_count: int
    ff_count: int
    mem_ports: int

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class _Counts:
    counters: int = 0
    accumulators: int = 0
    mul: int = 0
    add: int = 0
    mux: int = 0
    stmts: int = 0

    def __iadd__(self, other: "_Counts") -> "_Counts":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def scaled(self, k: int) -> "_Counts":
        return _Counts(**{f.name: getattr(self, f.name) * k for f in fields(self)})


def _assigned(stmts) -> set[str]:
    out = set()
    for st in stmts:
        if st.kind == "array_store":
            out.add(st.operands[0].name)
        elif st.kind == "array_load" or st.kind in ARITH_KINDS:
            out.add(st.operands[0])
        elif st.kind == "branch":
            out |= _assigned(st.then_body) | _assigned(st.else_body)
    return out


def _count_stmt(st: Statement, scalars) -> _Counts:
    c = _Counts(stmts=1)
    if st.kind in ("mul", "div"):
        c.mul = 1
    elif st.kind in ("add", "sub", "compare"):
        c.add = 1
    if is_accumulation(st, scalars):
        c.accumulators = 1
    if st.kind == "branch":
        c.mux = len(_assigned(st.then_body) | _assigned(st.else_body))
        for s in st.then_body + st.else_body:
            c += _count_stmt(s, scalars)
    return c


def _count_loop(lp: LoopNode, op: Operator, lanes: int) -> _Counts:
    inner = _Counts()
    for node in lp.body:
        inner += _count_loop(node, op, lanes) if isinstance(node, LoopNode) else _count_stmt(node, op.scalars)
    rep = 1
    if lp.pragma != "none":
        trip = trip_count(lp, None)
        if trip is Unknown:
            raise UnresolvableTrip(f"{op.name}: {lp.pragma} on symbolic loop {lp.induction_var}")
        rep = trip if lp.pragma == "unroll_full" else min(trip, lanes)
    out = inner.scaled(rep)
    out.counters += 1
    return out


def evaluate_static(w: Workload):
    """Return (power, area, ff, FeatureVector) for ``w``; needs no input."""
    ff = mul = add = mux = ports = stmts = 0
    for op in w.operators:
        c = _count_loop(op.root, op, w.params.parallel_lanes)
        ff += FF_COUNTER * c.counters + FF_SCALAR * len(op.scalars) + FF_ACCUMULATOR * c.accumulators
        mul += c.mul
        add += c.add
        mux += c.mux
        stmts += c.stmts
        ports += len(op.arrays)
    area_deci = (AREA_DECI_FF * ff + AREA_DECI_MUL * mul + AREA_DECI_ADD * add
                 + AREA_DECI_MUX * mux + AREA_DECI_PORT * ports)
    power_milli = area_deci + POWER_MILLI_PER_STMT * stmts
    features = FeatureVector(
        module_count=len(w.operators), mux_count=mux, mul_count=mul,
        add_count=add, ff_count=ff, mem_ports=ports,
    )
    return power_milli / 1000, area_deci / 10, ff, features


# ---------------------------------------------------------------------------
# cycle interpretation


def synthetic_element(flat_index: int) -> int:
    return (flat_index * HASH_MULT) % 256


class _Interpreter:
    def __init__(self, op: Operator, input: RuntimeInput, params) -> None:
        self.op = op
        self.input = input.as_dict()
        self.params = params
        self.dims = {a.name: a.dims for a in op.arrays}
        self.runtime = input
        self.loop_vars = {lp.induction_var for lp in iter_loops(op.root)}
        self._deps: dict[int, frozenset] = {}
        self._memo: dict = {}
        for sym in op.input_symbols:
            if sym not in self.input:
                raise UnboundSymbol(sym)

    # -- dependency analysis: induction vars that branch conditions read
    def deps(self, node) -> frozenset:
        key = id(node)
        if key in self._deps:
            return self._deps[key]
        if isinstance(node, LoopNode):
            d = frozenset().union(*(self.deps(n) for n in node.body)) - {node.induction_var}
        elif node.kind == "branch":
            d = frozenset(condition_vars(node.cond) & self.loop_vars).union(
                *(self.deps(n) for n in node.then_body + node.else_body))
        else:
            d = frozenset()
        self._deps[key] = d
        return d

    def value(self, x, env) -> int:
        if isinstance(x, int):
            return x
        if isinstance(x, ArrayRef):
            dims = self.dims[x.name]
            flat = 0
            for ix, extent in zip(x.index, dims):
                v = ix.offset + sum(env[n] for n in ix.vars)
                flat = flat * extent + v
            return synthetic_element(flat)
        if x in env:
            return env[x]
        if x in self.input:
            return self.input[x]
        if x in self.op.scalars:
            return SCALAR_RESET
        raise UnboundSymbol(x)

    def test(self, cond: Condition, env) -> bool:
        a, b = self.value(cond.lhs, env), self.value(cond.rhs, env)
        return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b, "==": a == b, "!=": a != b}[cond.rel]

    def stmt(self, st: Statement, env) -> int:
        if st.kind == "array_load":
            return self.params.mem_delay_read
        if st.kind == "array_store":
            return self.params.mem_delay_write
        if st.kind == "branch":
            arm = st.then_body if self.test(st.cond, env) else st.else_body
            return 1 + sum(self.stmt(s, env) for s in arm)
        return LATENCY[st.kind]

    def body(self, nodes, env) -> int:
        return sum(self.loop(n, env) if isinstance(n, LoopNode) else self.stmt(n, env) for n in nodes)

    def loop(self, lp: LoopNode, env) -> int:
        free = self.deps(lp)
        key = (id(lp), tuple(env[v] for v in sorted(free)))
        if key in self._memo:
            return self._memo[key]
        trip = trip_count(lp, self.runtime)
        if trip is Unknown:
            raise UnboundSymbol(str(lp.upper))
        inner_deps = frozenset().union(*(self.deps(n) for n in lp.body))
        if trip == 0:
            total = 0
        elif lp.induction_var not in inner_deps:
            b = self.body(lp.body, env)
            total = self._combine(lp, trip, b * trip, b)
        else:
            lat = []
            for t in range(trip):
                env2 = dict(env)
                env2[lp.induction_var] = lp.lower + t * lp.step
                lat.append(self.body(lp.body, env2))
            total = self._combine(lp, trip, sum(lat), max(lat))
        self._memo[key] = total
        return total

    def _combine(self, lp: LoopNode, trip: int, seq_total: int, worst: int) -> int:
        if lp.pragma == "unroll_full":
            return worst
        if lp.pragma == "parallel_for":
            lanes = min(trip, self.params.parallel_lanes)
            return math.ceil(trip / lanes) * worst
        return seq_total


def condition_vars(cond: Condition) -> set[str]:
    return operand_names(cond.lhs) | operand_names(cond.rhs)


def evaluate_cycles(w: Workload, input: Optional[RuntimeInput] = None) -> int:
    """Cycle count of ``w`` under ``input`` (defaults to ``w.input``).

    Operators run back to back in topological order.
    """
    if input is None:
        input = w.input if w.input is not None else RuntimeInput()
    total = 0
    for name in topo_order(w.graph):
        op = w.operator(name)
        interp = _Interpreter(op, input, w.params)
        total += interp.loop(op.root, {})
    return max(1, total)


def evaluate_full(w: Workload, input: Optional[RuntimeInput] = None):
    power, area, ff, features = evaluate_static(w)
    cycles = evaluate_cycles(w, input)
    return CostVector(power, area, ff, cycles), features


def count_statements(w: Workload) -> int:
    return sum(1 for op in w.operators for _ in iter_statements((op.root,)))
