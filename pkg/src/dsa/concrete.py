"""Concrete small-step interpreter.

States are (label, memory, context, env).  Memory maps locations, i.e.
(environment address, variable) or (object address, property key), to
values.  The context maps an environment address to where its call must
return: (caller env, return label, result location).  The top-level env
has no context entry; `ret` there halts the run.

Addresses carry their allocation-site label plus a run-unique sequence
number.  The site component is what the allocation-site abstraction
keys on; the sequence number keeps live addresses distinct.  Fresh
addresses are derived from the state itself (max live sequence + 1), so
stepping is a pure, deterministic function of the state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .lang import (
    OP_TABLE,
    Assign,
    Bool,
    Branch,
    Call,
    Expr,
    Int,
    Label,
    Lambda,
    NewObject,
    Op,
    Prim,
    Primitive,
    Program,
    PropAccess,
    Ref,
    Reference,
    Return,
    Str,
    Undef,
    UNDEF,
    Var,
    format_instr,
    next_label,
)

TOP_SITE: int = -1


@dataclass(frozen=True)
class Addr:
    kind: str  # "env" | "obj"
    site: int
    seq: int

    def sort_key(self) -> tuple:
        return (self.kind, self.site, self.seq)


A_TOP = Addr("env", TOP_SITE, 0)


@dataclass(frozen=True)
class Closure:
    param: str
    body: Label


ConcreteValue = Primitive | Addr | Closure


@dataclass(frozen=True)
class VarLoc:
    env: Addr
    name: str

    def sort_key(self) -> tuple:
        return (0, self.env.sort_key(), self.name)


@dataclass(frozen=True)
class PropLoc:
    obj: Addr
    key: str

    def sort_key(self) -> tuple:
        return (1, self.obj.sort_key(), self.key)


Location = VarLoc | PropLoc


@dataclass(frozen=True)
class CtxEntry:
    ret_env: Addr
    ret_label: Label
    target: Location


@dataclass
class ConcreteState:
    """State proper is (label, memory, context, env).  next_seq is run
    bookkeeping for fresh addresses: allocations take the current value
    as their sequence number, so stepping is deterministic and never
    reuses a live address.  It does not take part in equality."""

    label: Label
    memory: dict[Location, ConcreteValue]
    context: dict[Addr, object]  # CtxEntry, or arbitrary junk after instantiation
    env: Addr
    next_seq: int = 1

    def copy(self) -> "ConcreteState":
        return ConcreteState(self.label, dict(self.memory), dict(self.context), self.env, self.next_seq)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConcreteState):
            return NotImplemented
        return (
            self.label == other.label
            and self.memory == other.memory
            and self.context == other.context
            and self.env == other.env
        )


def state_key(state: ConcreteState) -> tuple:
    """Canonical hashable form, for dedup and set membership."""
    mem = tuple(sorted(state.memory.items(), key=lambda kv: kv[0].sort_key()))
    ctx = tuple(sorted(state.context.items(), key=lambda kv: (kv[0].sort_key(), repr(kv[1]))))
    return (state.label, mem, ctx, state.env)


def initial_state(program: Program, bindings: dict[str, ConcreteValue] | None = None) -> ConcreteState:
    memory: dict[Location, ConcreteValue] = {}
    for name, value in (bindings or {}).items():
        memory[VarLoc(A_TOP, name)] = value
    return ConcreteState(program.entry, memory, {}, A_TOP)


# ---------------------------------------------------------------------------
# errors

class EvalError(Exception):
    pass


class UnboundLocationError(EvalError):
    pass


class NotAnObjectError(EvalError):
    pass


class NotAStringError(EvalError):
    pass


class TypeMismatchError(EvalError):
    pass


class NotAFunctionError(EvalError):
    pass


# ---------------------------------------------------------------------------
# evaluation

def eval_ref(state: ConcreteState, ref: Reference) -> Location:
    if isinstance(ref, Var):
        return VarLoc(state.env, ref.name)
    base = eval_expr(state, ref.obj)
    if not (isinstance(base, Addr) and base.kind == "obj"):
        raise NotAnObjectError(f"property base is not an object: {base!r}")
    key = eval_expr(state, ref.key)
    if not isinstance(key, Str):
        raise NotAStringError(f"property key is not a string: {key!r}")
    return PropLoc(base, key.value)


def eval_expr(state: ConcreteState, expr: Expr) -> ConcreteValue:
    if isinstance(expr, Prim):
        return expr.value
    if isinstance(expr, Lambda):
        return Closure(expr.param, expr.body)
    if isinstance(expr, Ref):
        loc = eval_ref(state, expr.ref)
        try:
            return state.memory[loc]
        except KeyError:
            raise UnboundLocationError(f"unbound location: {loc!r}") from None
    if isinstance(expr, Op):
        args = [eval_expr(state, a) for a in expr.args]
        return apply_op(expr.name, args)
    raise TypeError(f"not an expression: {expr!r}")


def _want_int(op: str, v: ConcreteValue) -> int:
    if isinstance(v, Int):
        return v.value
    raise TypeMismatchError(f"{op}: expected int, got {v!r}")


def _want_bool(op: str, v: ConcreteValue) -> bool:
    if isinstance(v, Bool):
        return v.value
    raise TypeMismatchError(f"{op}: expected bool, got {v!r}")


def _want_str(op: str, v: ConcreteValue) -> str:
    if isinstance(v, Str):
        return v.value
    raise TypeMismatchError(f"{op}: expected string, got {v!r}")


def type_name(v: ConcreteValue) -> str:
    if isinstance(v, Int):
        return "int"
    if isinstance(v, Str):
        return "string"
    if isinstance(v, Bool):
        return "bool"
    if isinstance(v, Undef):
        return "undef"
    if isinstance(v, Addr):
        return "object"
    if isinstance(v, Closure):
        return "function"
    raise TypeError(f"not a value: {v!r}")


def apply_op(op: str, args: list[ConcreteValue]) -> ConcreteValue:
    if op not in OP_TABLE:
        raise TypeMismatchError(f"unknown operator {op!r}")
    want, _ = OP_TABLE[op]
    if len(args) != len(want):
        raise TypeMismatchError(f"{op}: expected {len(want)} argument(s), got {len(args)}")
    if op == "add":
        return Int(_want_int(op, args[0]) + _want_int(op, args[1]))
    if op == "sub":
        return Int(_want_int(op, args[0]) - _want_int(op, args[1]))
    if op == "mul":
        return Int(_want_int(op, args[0]) * _want_int(op, args[1]))
    if op == "neg":
        return Int(-_want_int(op, args[0]))
    if op == "lt":
        return Bool(_want_int(op, args[0]) < _want_int(op, args[1]))
    if op == "le":
        return Bool(_want_int(op, args[0]) <= _want_int(op, args[1]))
    if op == "gt":
        return Bool(_want_int(op, args[0]) > _want_int(op, args[1]))
    if op == "ge":
        return Bool(_want_int(op, args[0]) >= _want_int(op, args[1]))
    if op == "eq":
        return Bool(_want_int(op, args[0]) == _want_int(op, args[1]))
    if op == "not":
        return Bool(not _want_bool(op, args[0]))
    if op == "and":
        return Bool(_want_bool(op, args[0]) and _want_bool(op, args[1]))
    if op == "or":
        return Bool(_want_bool(op, args[0]) or _want_bool(op, args[1]))
    if op == "concat":
        return Str(_want_str(op, args[0]) + _want_str(op, args[1]))
    if op == "num2str":
        return Str(str(_want_int(op, args[0])))
    if op == "typeof":
        return Str(type_name(args[0]))
    raise TypeMismatchError(f"unhandled operator {op!r}")


# ---------------------------------------------------------------------------
# stepping

@dataclass(frozen=True)
class Next:
    state: ConcreteState


@dataclass(frozen=True)
class Halt:
    value: ConcreteValue


@dataclass(frozen=True)
class Stuck:
    reason: str


StepResult = Next | Halt | Stuck


def fresh_addr(state: ConcreteState, kind: str, site: int) -> Addr:
    """Fresh address for an allocation in this state.  Uses the state's
    run counter, so the choice depends only on the state."""
    return Addr(kind, site, state.next_seq)


def concrete_step(program: Program, state: ConcreteState) -> StepResult:
    try:
        instr = program.instruction_at(state.label)
    except Exception as exc:
        return Stuck(str(exc))
    nxt = next_label(program, state.label)
    try:
        if isinstance(instr, Assign):
            loc = eval_ref(state, instr.target)
            value = eval_expr(state, instr.source)
            if nxt is None:
                return Stuck(f"fell off program end after label {state.label}")
            new = state.copy()
            new.memory[loc] = value
            new.label = nxt
            return Next(new)
        if isinstance(instr, NewObject):
            loc = eval_ref(state, instr.target)
            if nxt is None:
                return Stuck(f"fell off program end after label {state.label}")
            addr = fresh_addr(state, "obj", state.label)
            new = state.copy()
            new.memory[loc] = addr
            new.label = nxt
            new.next_seq += 1
            return Next(new)
        if isinstance(instr, Call):
            loc = eval_ref(state, instr.target)
            callee = eval_expr(state, instr.callee)
            if not isinstance(callee, Closure):
                return Stuck(f"label {state.label}: callee is not a function: {callee!r}")
            arg = eval_expr(state, instr.arg)
            if nxt is None:
                return Stuck(f"fell off program end after label {state.label}")
            env = fresh_addr(state, "env", callee.body)
            new = state.copy()
            new.memory[VarLoc(env, callee.param)] = arg
            new.context[env] = CtxEntry(state.env, nxt, loc)
            new.env = env
            new.label = callee.body
            new.next_seq += 1
            return Next(new)
        if isinstance(instr, Return):
            value = eval_expr(state, instr.value)
            entry = state.context.get(state.env)
            if entry is None:
                return Halt(value)
            if not isinstance(entry, CtxEntry):
                return Stuck(f"label {state.label}: malformed context entry {entry!r}")
            new = state.copy()
            new.memory[entry.target] = value
            new.env = entry.ret_env
            new.label = entry.ret_label
            return Next(new)
        if isinstance(instr, Branch):
            cond = eval_expr(state, instr.cond)
            if not isinstance(cond, Bool):
                return Stuck(f"label {state.label}: branch condition is not a bool: {cond!r}")
            if cond.value:
                if not program.has_label(instr.then_label):
                    return Stuck(f"label {state.label}: branch target {instr.then_label} does not exist")
                new = state.copy()
                new.label = instr.then_label
                return Next(new)
            if nxt is None:
                return Stuck(f"fell off program end after label {state.label}")
            new = state.copy()
            new.label = nxt
            return Next(new)
    except EvalError as exc:
        return Stuck(f"label {state.label} ({format_instr(instr)}): {exc}")
    return Stuck(f"label {state.label}: unhandled instruction {instr!r}")


@dataclass
class RunResult:
    trace: list[ConcreteState]
    collecting: list[ConcreteState]  # distinct states, trace order
    outcome: str  # "halt" | "stuck" | "budget"
    value: ConcreteValue | None = None
    reason: str | None = None
    steps: int = 0


def run_concrete(program: Program, initial: ConcreteState, step_budget: int = 100_000) -> RunResult:
    trace = [initial]
    seen = {state_key(initial)}
    collecting = [initial]
    state = initial
    steps = 0
    while steps < step_budget:
        result = concrete_step(program, state)
        if isinstance(result, Halt):
            return RunResult(trace, collecting, "halt", value=result.value, steps=steps)
        if isinstance(result, Stuck):
            return RunResult(trace, collecting, "stuck", reason=result.reason, steps=steps)
        state = result.state
        steps += 1
        trace.append(state)
        key = state_key(state)
        if key not in seen:
            seen.add(key)
            collecting.append(state)
    return RunResult(trace, collecting, "budget", steps=steps)


# ---------------------------------------------------------------------------
# JSON encoding (trace dumps)

def addr_to_json(a: Addr) -> str:
    if a == A_TOP:
        return "env:top"
    return f"{a.kind}:{a.site}:{a.seq}"


def value_to_json(v: ConcreteValue) -> object:
    if isinstance(v, Int):
        return {"int": v.value}
    if isinstance(v, Str):
        return {"str": v.value}
    if isinstance(v, Bool):
        return {"bool": v.value}
    if isinstance(v, Undef):
        return "undef"
    if isinstance(v, Addr):
        return {"obj": addr_to_json(v)}
    if isinstance(v, Closure):
        return {"fun": {"param": v.param, "body": v.body}}
    raise TypeError(f"not a value: {v!r}")


def loc_to_json(loc: Location) -> str:
    if isinstance(loc, VarLoc):
        return f"{addr_to_json(loc.env)}/{loc.name}"
    return f"{addr_to_json(loc.obj)}/{loc.key}"


def state_to_json_line(state: ConcreteState) -> str:
    memory = {loc_to_json(loc): value_to_json(v) for loc, v in sorted(state.memory.items(), key=lambda kv: kv[0].sort_key())}
    return json.dumps({"label": state.label, "env": addr_to_json(state.env), "memory": memory}, sort_keys=True)
