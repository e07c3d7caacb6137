"""Small hand-built workloads shared by the test modules."""

from dfcost.ir import (
    ArrayDecl, ArrayRef, Condition, DataflowGraph, HardwareParams, Index, LoopNode,
    Operator, RuntimeInput, Statement, Workload,
)


def ref(name, *vars_):
    return ArrayRef(name, tuple(Index((v,)) for v in vars_))


def vadd_body():
    return (
        Statement("array_load", ("t1", ref("a", "i"))),
        Statement("array_load", ("t2", ref("b", "i"))),
        Statement("add", ("t3", "t1", "t2")),
        Statement("array_store", (ref("c", "i"), "t3")),
    )


def vadd_operator(name="fa", pragma="none", upper=10, step=1):
    arrays = tuple(ArrayDecl(n, 32, (16,)) for n in ("a", "b", "c"))
    symbols = (upper,) if isinstance(upper, str) else ()
    root = LoopNode("i", 0, upper, step, pragma, vadd_body())
    return Operator(name, arrays, (), root, symbols)


def vadd_workload(pragma="none", lanes=4, rd=2, wr=2, upper=10, input=None):
    op = vadd_operator(pragma=pragma, upper=upper)
    return Workload(DataflowGraph(("fa",)), (op,), HardwareParams(rd, wr, lanes), input)


def chain(*ops, params=HardwareParams(), input=None):
    names = tuple(o.name for o in ops)
    edges = tuple(zip(names, names[1:]))
    return Workload(DataflowGraph(names, edges), tuple(ops), params, input)


def guarded_operator(name="fg"):
    """Loads a[i] when N > 5, otherwise a cheap add."""
    then = (Statement("array_load", ("t1", ref("a", "i"))),
            Statement("mul", ("t2", "t1", "t1")),
            Statement("array_store", (ref("c", "i"), "t2")))
    other = (Statement("add", ("t2", "i", 1)),)
    body = (Statement("branch", (), cond=Condition("N", ">", 5), then_body=then, else_body=other),)
    arrays = (ArrayDecl("a", 32, (8,)), ArrayDecl("c", 32, (8,)))
    return Operator(name, arrays, (), LoopNode("i", 0, 8, 1, "none", body), ("N",))


def with_input(w, **vals):
    from dataclasses import replace
    return replace(w, input=RuntimeInput(tuple(sorted(vals.items()))))
