"""Flow-sensitive abstract interpretation over per-label views.

The analysis keeps one abstract state per program label (a view map)
and iterates the transfer `views ⊔ step(views)` to a fixpoint, where
`step` pushes every view's state across the outgoing edges of its
instruction.  Edges that no concretization could take (branch condition
lacking the needed boolean, operator applied to impossible types,
returns at top level) simply produce no mass.

On branches whose condition compares a variable against an integer
literal, each edge can narrow the variable's integer component to the
values able to produce that edge's outcome.  This refinement is on by
default for the sign domain only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .concrete import TOP_SITE
from .domain import (
    ACtxEntry,
    ALoc,
    AVarLoc,
    APropLoc,
    AbstractState,
    AbstractValue,
    Count,
    PrimElem,
    PrimitiveDomain,
    SignDomain,
    TOP,
    abstract_apply_op,
    bottom_value,
    inc,
    is_bottom_value,
    join_state,
    join_value,
    mem_update,
    value_from_primitive,
)
from .lang import (
    Assign,
    Branch,
    Call,
    Expr,
    Int,
    Label,
    Lambda,
    NewObject,
    Op,
    Prim,
    Program,
    PropAccess,
    Ref,
    Reference,
    Return,
    Var,
    next_label,
)

ViewMap = dict[Label, AbstractState]


class NonEnumerableKeyError(Exception):
    """A property access whose key set is unbounded; the analysis cannot
    name the touched locations and gives up."""


class IterationCapExceededError(Exception):
    pass


@dataclass
class AnalysisSettings:
    domain: PrimitiveDomain
    branch_refinement: bool | None = None  # None: on exactly for SignDomain
    max_iterations: int | None = None  # None: generous computed bound

    def refinement_on(self) -> bool:
        if self.branch_refinement is None:
            return isinstance(self.domain, SignDomain)
        return self.branch_refinement


@dataclass
class Metrics:
    abstract_transitions: int = 0
    sealed_steps: int = 0
    shortcuts_taken: int = 0

    def to_json(self) -> dict:
        return {
            "abstract_transitions": self.abstract_transitions,
            "sealed_steps": self.sealed_steps,
            "shortcuts_taken": self.shortcuts_taken,
        }


@dataclass
class AnalysisResult:
    views: ViewMap
    iterations: int
    diagnostics: list[str] = field(default_factory=list)
    metrics: Metrics = field(default_factory=Metrics)


# ---------------------------------------------------------------------------
# abstract evaluation

def abs_eval_ref(state: AbstractState, ref: Reference) -> frozenset[ALoc]:
    """Locations a reference may denote.  A variable is one location in
    the current environment; a property access is every (site, key) pair
    from the base's sites and the key's possible strings."""
    if isinstance(ref, Var):
        return frozenset({AVarLoc(state.env, ref.name)})  # type: ignore[arg-type]
    base = abs_eval_expr(state, ref.obj)
    key = abs_eval_expr(state, ref.key)
    if key.prims.strs is TOP:
        raise NonEnumerableKeyError("property key may be any string")
    return frozenset(APropLoc(site, s) for site in base.addrs for s in key.prims.strs)


def abs_eval_expr(state: AbstractState, expr: Expr) -> AbstractValue:
    domain = state.domain
    if isinstance(expr, Prim):
        return value_from_primitive(domain, expr.value)
    if isinstance(expr, Lambda):
        from .concrete import Closure

        return AbstractValue(domain, domain.bottom(), funcs=frozenset({Closure(expr.param, expr.body)}))
    if isinstance(expr, Ref):
        out = bottom_value(domain)
        for loc in abs_eval_ref(state, expr.ref):
            v = state.memory.get(loc)
            if v is not None:
                out = join_value(out, v)
        return out
    if isinstance(expr, Op):
        args = [abs_eval_expr(state, a) for a in expr.args]
        return abstract_apply_op(expr.name, args)
    raise TypeError(f"not an expression: {expr!r}")


# ---------------------------------------------------------------------------
# per-edge transitions

def _refine_branch(state: AbstractState, cond: Expr, keep_true: bool) -> AbstractState:
    """Narrow a compared variable on a branch edge.  Applies only to
    conditions of the shape  cmp(x, <int literal>)."""
    if not (isinstance(cond, Op) and cond.name in ("lt", "le", "gt", "ge", "eq") and len(cond.args) == 2):
        return state
    lhs, rhs = cond.args
    if not (isinstance(lhs, Ref) and isinstance(lhs.ref, Var)):
        return state
    if not (isinstance(rhs, Prim) and isinstance(rhs.value, Int)):
        return state
    loc = AVarLoc(state.env, lhs.ref.name)  # type: ignore[arg-type]
    old = state.memory.get(loc)
    if old is None:
        return state
    refined_prims = state.domain.refine_cmp(old.prims, cond.name, rhs.value.value, keep_true)
    new = state.copy()
    new.memory[loc] = AbstractValue(state.domain, refined_prims, old.addrs, old.funcs)
    return new


def successors(
    program: Program,
    label: Label,
    state: AbstractState,
    settings: AnalysisSettings,
    diags: list[str] | None = None,
    metrics: Metrics | None = None,
) -> list[tuple[Label, AbstractState]]:
    """All outgoing view transitions from (label, state)."""
    if state.is_bottom:
        return []
    instr = program.instruction_at(label)
    nxt = next_label(program, label)
    out: list[tuple[Label, AbstractState]] = []

    def emit(to: Label, st: AbstractState) -> None:
        st = st.normalized()
        if st.is_bottom:
            return
        if metrics is not None:
            metrics.abstract_transitions += 1
        out.append((to, st))

    if isinstance(instr, Assign):
        targets = abs_eval_ref(state, instr.target)
        value = abs_eval_expr(state, instr.source)
        if targets and not is_bottom_value(value) and nxt is not None:
            memory = mem_update(state.memory, state.counter, targets, value)
            emit(nxt, AbstractState(state.domain, memory, dict(state.context), state.env, dict(state.counter)))
    elif isinstance(instr, NewObject):
        targets = abs_eval_ref(state, instr.target)
        if targets and nxt is not None:
            site_value = AbstractValue(state.domain, state.domain.bottom(), addrs=frozenset({label}))
            memory = mem_update(state.memory, state.counter, targets, site_value)
            emit(nxt, AbstractState(state.domain, memory, dict(state.context), state.env, inc(state.counter, label)))
    elif isinstance(instr, Call):
        targets = abs_eval_ref(state, instr.target)
        callee = abs_eval_expr(state, instr.callee)
        arg = abs_eval_expr(state, instr.arg)
        if diags is not None and (callee.addrs or not callee.domain.is_bottom(callee.prims)):
            diags.append(f"label {label}: call of non-function component ignored")
        if targets and not is_bottom_value(arg) and nxt is not None:
            for closure in sorted(callee.funcs, key=lambda c: (c.param, c.body)):
                env = closure.body
                # Bind the parameter under the counter as it stands after
                # this entry: a re-entered environment site still summarizes
                # the earlier frame, so the bind must join, not overwrite.
                counter = inc(state.counter, env)
                memory = mem_update(state.memory, counter, frozenset({AVarLoc(env, closure.param)}), arg)
                context = dict(state.context)
                context[env] = context.get(env, frozenset()) | {ACtxEntry(state.env, nxt, targets)}  # type: ignore[arg-type]
                emit(closure.body, AbstractState(state.domain, memory, context, env, counter))
    elif isinstance(instr, Return):
        value = abs_eval_expr(state, instr.value)
        if not is_bottom_value(value) and state.env != TOP_SITE:
            for entry in sorted(state.context.get(state.env, frozenset()), key=lambda e: e.sort_key()):
                memory = mem_update(state.memory, state.counter, entry.targets, value)
                emit(
                    entry.ret_label,
                    AbstractState(state.domain, memory, dict(state.context), entry.ret_addr, dict(state.counter)),
                )
    elif isinstance(instr, Branch):
        cond = abs_eval_expr(state, instr.cond)
        refine = settings.refinement_on()
        if True in cond.prims.bools and program.has_label(instr.then_label):
            st = _refine_branch(state, instr.cond, True) if refine else state
            emit(instr.then_label, st.copy())
        if False in cond.prims.bools and nxt is not None:
            st = _refine_branch(state, instr.cond, False) if refine else state
            emit(nxt, st.copy())
    else:
        raise TypeError(f"not an instruction: {instr!r}")
    return out


NO_EDGE = None


def view_transition(
    program: Program,
    from_label: Label,
    to_label: Label,
    state: AbstractState,
    settings: AnalysisSettings | None = None,
) -> AbstractState | None:
    """Transition relation between two views; None when there is no edge
    or nothing can flow.  Multiple edges to the same target (several
    callees, several matching returns) join."""
    if settings is None:
        settings = AnalysisSettings(domain=state.domain)
    result = AbstractState.bottom(state.domain)
    found = False
    for to, st in successors(program, from_label, state, settings):
        if to == to_label:
            result = join_state(result, st)
            found = True
    return result if found else NO_EDGE


def abstract_step(program: Program, views: ViewMap, settings: AnalysisSettings | None = None) -> ViewMap:
    """One synchronous step of every view: the target view's new mass is
    the join of every transition into it.  Pure step, no accumulation."""
    if settings is None:
        domain = next(iter(views.values())).domain
        settings = AnalysisSettings(domain=domain)
    out: ViewMap = {}
    diags: list[str] = []
    for label in sorted(views):
        state = views[label]
        for to, st in successors(program, label, state, settings):
            out[to] = join_state(out[to], st, diags) if to in out else st
    return out


# ---------------------------------------------------------------------------
# fixpoint

def fixpoint_height_bound(program: Program, domain: PrimitiveDomain) -> int:
    """A generous, computable bound on the length of strictly ascending
    view-map chains for this program.  Every fixpoint must settle within
    this many rounds; exceeding it indicates a broken lattice."""
    nlabels = len(program.lines)
    idents: set[str] = set()
    strlits = 0
    strish_ops = 0

    def walk_expr(e: Expr) -> None:
        nonlocal strlits, strish_ops
        if isinstance(e, Prim):
            from .lang import Str as _Str

            if isinstance(e.value, _Str):
                strlits += 1
        elif isinstance(e, Lambda):
            idents.add(e.param)
        elif isinstance(e, Ref):
            walk_ref(e.ref)
        elif isinstance(e, Op):
            if e.name in ("concat", "num2str", "typeof"):
                strish_ops += 1
            for a in e.args:
                walk_expr(a)

    def walk_ref(r: Reference) -> None:
        if isinstance(r, Var):
            idents.add(r.name)
        else:
            walk_expr(r.obj)
            walk_expr(r.key)

    for _, instr in program.lines:
        if isinstance(instr, Assign):
            walk_ref(instr.target)
            walk_expr(instr.source)
        elif isinstance(instr, NewObject):
            walk_ref(instr.target)
        elif isinstance(instr, Call):
            walk_ref(instr.target)
            walk_expr(instr.callee)
            walk_expr(instr.arg)
        elif isinstance(instr, Return):
            walk_expr(instr.value)
        elif isinstance(instr, Branch):
            walk_expr(instr.cond)

    k = getattr(domain, "k", getattr(domain, "str_bound", 4))
    naddr = nlabels + 1
    nkeys = len(idents) + strlits + (k + 1) * (strish_ops + 1) + 8
    nlocs = naddr * nkeys
    value_h = domain.value_height() + naddr + nlabels
    mem_h = nlocs * value_h
    ctx_h = naddr * nlabels * (nlocs + 1)
    state_h = mem_h + ctx_h + 2 * naddr + 1
    return nlabels * state_h + nlabels + 8


def analyze_abstract(
    program: Program,
    initial: ViewMap,
    settings: AnalysisSettings,
) -> AnalysisResult:
    """Iterate the transfer to the least fixpoint above `initial`.

    Propagation is chaotic: each round pushes mass only from views whose
    state changed in the previous round, which computes the same fixpoint
    as resynchronizing every view each time (joins are monotone and
    earlier contributions are already accumulated)."""
    views: ViewMap = {lbl: st.normalized() for lbl, st in initial.items() if not st.is_bottom}
    if not views:
        raise ValueError("initial view map is empty")
    diags: list[str] = []
    metrics = Metrics()
    cap = settings.max_iterations if settings.max_iterations is not None else fixpoint_height_bound(program, settings.domain)
    dirty = set(views)
    iterations = 0
    while dirty:
        if iterations >= cap:
            raise IterationCapExceededError(f"no fixpoint after {iterations} iterations")
        iterations += 1
        incoming: ViewMap = {}
        for label in sorted(dirty):
            for to, st in successors(program, label, views[label], settings, diags, metrics):
                incoming[to] = join_state(incoming[to], st, diags) if to in incoming else st
        dirty = set()
        for to, st in incoming.items():
            old = views.get(to, AbstractState.bottom(settings.domain))
            joined = join_state(old, st, diags)
            if joined != old:
                views[to] = joined
                dirty.add(to)
    return AnalysisResult(views, iterations, diags, metrics)


def initial_views(program: Program, domain: PrimitiveDomain, bindings: dict[str, AbstractValue]) -> ViewMap:
    return {program.entry: AbstractState.entry(domain, bindings)}


def views_to_json(views: ViewMap) -> dict:
    from .domain import state_to_json

    return {str(label): state_to_json(state) for label, state in sorted(views.items()) if not state.is_bottom}


def views_from_json(domain: PrimitiveDomain, obj: dict) -> ViewMap:
    from .domain import state_from_json

    return {int(label): state_from_json(domain, st) for label, st in obj.items()}
