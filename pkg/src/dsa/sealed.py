"""Sealed execution: concrete stepping with opaque placeholders.

A sealed state is a concrete state whose memory (and context entries)
may hold sealed values, placeholders for values that were only known
abstractly when the run started.  The paired abstract instantiation map
gives each placeholder its abstract meaning.

The step relation moves placeholders around freely (assignment, call
arguments, property stores, returned values) but refuses to look inside
one.  Wherever the instruction needs the actual value (an operator
operand, a branch condition, a property base or key, a callee) or must
return through a sealed continuation, the run ends with a bottom
outcome carrying the reason.  Bottom is also how a halted or stuck
run presents: in every case there is no sealed successor.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from .concrete import (
    Addr,
    Closure,
    ConcreteState,
    ConcreteValue,
    CtxEntry,
    EvalError,
    Location,
    PropLoc,
    VarLoc,
    apply_op,
)
from .domain import (
    AbstractValue,
    Count,
    NonEnumerable,
    gamma_value,
    inc,
)
from .lang import (
    Assign,
    Bool,
    Branch,
    Call,
    Expr,
    Label,
    Lambda,
    NewObject,
    Op,
    Prim,
    Program,
    Ref,
    Reference,
    Return,
    Str,
    Var,
    format_instr,
    next_label,
)


@dataclass(frozen=True)
class SealedValue:
    id: int

    def __repr__(self) -> str:
        return f"sealed#{self.id}"


SealedOrConcrete = ConcreteValue | SealedValue
AbstractInstantiationMap = dict[SealedValue, AbstractValue]
InstantiationMap = dict[SealedValue, ConcreteValue]


@dataclass
class SealedState:
    """Like a concrete state, plus an allocation counter over sites so the
    run's allocations can be folded back into an abstract state later."""

    label: Label
    memory: dict[Location, SealedOrConcrete]
    context: dict[Addr, object]  # CtxEntry | SealedValue
    env: Addr
    counter: dict[int, Count] = field(default_factory=dict)
    next_seq: int = 1

    def copy(self) -> "SealedState":
        return SealedState(self.label, dict(self.memory), dict(self.context), self.env, dict(self.counter), self.next_seq)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SealedState):
            return NotImplemented
        return (
            self.label == other.label
            and self.memory == other.memory
            and self.context == other.context
            and self.env == other.env
            and self.counter == other.counter
        )


def state_key(state: SealedState) -> tuple:
    mem = tuple(sorted(((loc.sort_key(), repr(v)) for loc, v in state.memory.items())))
    ctx = tuple(sorted(((a.sort_key(), repr(e)) for a, e in state.context.items())))
    cnt = tuple(sorted(state.counter.items()))
    return (state.label, mem, ctx, state.env.sort_key(), cnt)


def placeholders_of(state: SealedState) -> list[SealedValue]:
    """Placeholders appearing anywhere in the state, by id."""
    seen: set[SealedValue] = set()
    for v in state.memory.values():
        if isinstance(v, SealedValue):
            seen.add(v)
    for e in state.context.values():
        if isinstance(e, SealedValue):
            seen.add(e)
    return sorted(seen, key=lambda w: w.id)


# ---------------------------------------------------------------------------
# step outcomes

@dataclass(frozen=True)
class BotReason:
    kind: str  # "sealed_access" | "sealed_return" | "halt" | "stuck"
    placeholder: SealedValue | None = None
    value: object = None  # halt value (possibly sealed)
    message: str = ""

    def terminal_name(self) -> str:
        return self.kind


@dataclass(frozen=True)
class SNext:
    state: SealedState


@dataclass(frozen=True)
class Bot:
    reason: BotReason


SealedStepResult = SNext | Bot


class _SealedAccess(Exception):
    def __init__(self, placeholder: SealedValue):
        super().__init__(repr(placeholder))
        self.placeholder = placeholder


def _unseal_guard(v: SealedOrConcrete) -> ConcreteValue:
    if isinstance(v, SealedValue):
        raise _SealedAccess(v)
    return v


def sealed_eval_ref(state: SealedState, ref: Reference) -> Location:
    if isinstance(ref, Var):
        return VarLoc(state.env, ref.name)
    base = _unseal_guard(sealed_eval_expr(state, ref.obj))
    if not (isinstance(base, Addr) and base.kind == "obj"):
        raise EvalError(f"property base is not an object: {base!r}")
    key = _unseal_guard(sealed_eval_expr(state, ref.key))
    if not isinstance(key, Str):
        raise EvalError(f"property key is not a string: {key!r}")
    return PropLoc(base, key.value)


def sealed_eval_expr(state: SealedState, expr: Expr) -> SealedOrConcrete:
    if isinstance(expr, Prim):
        return expr.value
    if isinstance(expr, Lambda):
        return Closure(expr.param, expr.body)
    if isinstance(expr, Ref):
        loc = sealed_eval_ref(state, expr.ref)
        try:
            return state.memory[loc]
        except KeyError:
            raise EvalError(f"unbound location: {loc!r}") from None
    if isinstance(expr, Op):
        args = [_unseal_guard(sealed_eval_expr(state, a)) for a in expr.args]
        return apply_op(expr.name, args)
    raise TypeError(f"not an expression: {expr!r}")


def sealed_step(program: Program, state: SealedState) -> SealedStepResult:
    try:
        instr = program.instruction_at(state.label)
    except Exception as exc:
        return Bot(BotReason("stuck", message=str(exc)))
    nxt = next_label(program, state.label)
    try:
        if isinstance(instr, Assign):
            loc = sealed_eval_ref(state, instr.target)
            value = sealed_eval_expr(state, instr.source)
            if nxt is None:
                return Bot(BotReason("stuck", message=f"fell off program end after label {state.label}"))
            new = state.copy()
            new.memory[loc] = value
            new.label = nxt
            return SNext(new)
        if isinstance(instr, NewObject):
            loc = sealed_eval_ref(state, instr.target)
            if nxt is None:
                return Bot(BotReason("stuck", message=f"fell off program end after label {state.label}"))
            addr = Addr("obj", state.label, state.next_seq)
            new = state.copy()
            new.memory[loc] = addr
            new.label = nxt
            new.counter = inc(new.counter, state.label)
            new.next_seq += 1
            return SNext(new)
        if isinstance(instr, Call):
            loc = sealed_eval_ref(state, instr.target)
            callee = _unseal_guard(sealed_eval_expr(state, instr.callee))
            if not isinstance(callee, Closure):
                return Bot(BotReason("stuck", message=f"label {state.label}: callee is not a function: {callee!r}"))
            arg = sealed_eval_expr(state, instr.arg)
            if nxt is None:
                return Bot(BotReason("stuck", message=f"fell off program end after label {state.label}"))
            env = Addr("env", callee.body, state.next_seq)
            new = state.copy()
            new.memory[VarLoc(env, callee.param)] = arg
            new.context[env] = CtxEntry(state.env, nxt, loc)
            new.env = env
            new.label = callee.body
            new.counter = inc(new.counter, callee.body)
            new.next_seq += 1
            return SNext(new)
        if isinstance(instr, Return):
            value = sealed_eval_expr(state, instr.value)
            entry = state.context.get(state.env)
            if entry is None:
                return Bot(BotReason("halt", value=value))
            if isinstance(entry, SealedValue):
                return Bot(BotReason("sealed_return", placeholder=entry))
            if not isinstance(entry, CtxEntry):
                return Bot(BotReason("stuck", message=f"label {state.label}: malformed context entry {entry!r}"))
            new = state.copy()
            new.memory[entry.target] = value
            new.env = entry.ret_env
            new.label = entry.ret_label
            return SNext(new)
        if isinstance(instr, Branch):
            cond = _unseal_guard(sealed_eval_expr(state, instr.cond))
            if not isinstance(cond, Bool):
                return Bot(BotReason("stuck", message=f"label {state.label}: branch condition is not a bool: {cond!r}"))
            if cond.value:
                if not program.has_label(instr.then_label):
                    return Bot(BotReason("stuck", message=f"label {state.label}: branch target {instr.then_label} does not exist"))
                new = state.copy()
                new.label = instr.then_label
                return SNext(new)
            if nxt is None:
                return Bot(BotReason("stuck", message=f"fell off program end after label {state.label}"))
            new = state.copy()
            new.label = nxt
            return SNext(new)
    except _SealedAccess as exc:
        return Bot(BotReason("sealed_access", placeholder=exc.placeholder, message=f"label {state.label} ({format_instr(instr)})"))
    except EvalError as exc:
        return Bot(BotReason("stuck", message=f"label {state.label} ({format_instr(instr)}): {exc}"))
    return Bot(BotReason("stuck", message=f"label {state.label}: unhandled instruction {instr!r}"))


# ---------------------------------------------------------------------------
# running

@dataclass(frozen=True)
class Budgets:
    max_steps: int = 100_000
    wall_ms: int = 5000


@dataclass
class SealedRunResult:
    trace: list[SealedState]
    terminal: BotReason | None  # None iff a budget was exceeded
    budget_exceeded: bool
    steps: int

    def to_json(self) -> dict:
        return {
            "start_label": self.trace[0].label,
            "end_label": self.trace[-1].label,
            "steps": self.steps,
            "terminal": "budget" if self.budget_exceeded else self.terminal.terminal_name(),  # type: ignore[union-attr]
            "placeholders": [w.id for w in placeholders_of(self.trace[0])],
        }


def run_sealed(program: Program, state: SealedState, budgets: Budgets = Budgets()) -> SealedRunResult:
    """Drive sealed stepping to its bottom outcome or a budget.  The step
    relation is deterministic, so the trace and outcome are functions of
    the starting state; for the same reason a revisited state proves the
    run will never finish, and it is reported as budget exhaustion
    without grinding out the remaining steps."""
    trace = [state]
    seen = {state_key(state)}
    steps = 0
    deadline = time.monotonic() + budgets.wall_ms / 1000.0
    while True:
        result = sealed_step(program, state)
        if isinstance(result, Bot):
            return SealedRunResult(trace, result.reason, False, steps)
        state = result.state
        steps += 1
        trace.append(state)
        key = state_key(state)
        if key in seen:
            return SealedRunResult(trace, None, True, steps)
        seen.add(key)
        if steps >= budgets.max_steps or time.monotonic() > deadline:
            return SealedRunResult(trace, None, True, steps)


# ---------------------------------------------------------------------------
# instantiation

class UnboundSymbolError(Exception):
    pass


def instantiate(state: SealedState, m: InstantiationMap) -> ConcreteState:
    """Substitute every placeholder by its value under m.  Purely
    syntactic: the counter is dropped and no shape checking happens (a
    placeholder in a context slot becomes whatever m says, and the
    concrete machine will get stuck there on its own)."""
    memory: dict[Location, ConcreteValue] = {}
    for loc, v in state.memory.items():
        if isinstance(v, SealedValue):
            if v not in m:
                raise UnboundSymbolError(repr(v))
            memory[loc] = m[v]
        else:
            memory[loc] = v
    context: dict[Addr, object] = {}
    for a, e in state.context.items():
        if isinstance(e, SealedValue):
            if e not in m:
                raise UnboundSymbolError(repr(e))
            context[a] = m[e]
        else:
            context[a] = e
    return ConcreteState(state.label, memory, context, state.env, state.next_seq)


def gamma_imap(
    imap: AbstractInstantiationMap,
    int_cap: int = 8,
    max_maps: int = 64,
) -> list[InstantiationMap] | NonEnumerable:
    """All instantiation maps drawn from each placeholder's concretization,
    as a Cartesian product, or NonEnumerable when a component is infinite
    or the product exceeds max_maps."""
    placeholders = sorted(imap, key=lambda w: w.id)
    columns: list[list[ConcreteValue]] = []
    total = 1
    for w in placeholders:
        g = gamma_value(imap[w], int_cap)
        if isinstance(g, NonEnumerable):
            return NonEnumerable(f"{w!r}: {g.reason}")
        columns.append(list(g.values))
        total *= max(len(g.values), 1)
        if total > max_maps:
            return NonEnumerable(f"more than {max_maps} instantiations")
    maps: list[InstantiationMap] = [{}]
    for w, col in zip(placeholders, columns):
        extended = []
        for m in maps:
            for v in col:
                mm = dict(m)
                mm[w] = v
                extended.append(mm)
        maps = extended
    return maps
