"""The combined analysis: abstract views that switch into sealed runs.

The driver below iterates the abstract transfer like the plain analyzer,
but before stepping a view abstractly it tries to *seal* it: rebuild the
view as a runnable concrete-ish state, with placeholders standing in for
whatever the view does not pin down, and drive that state with the
sealed step relation instead.  A sealed run covers every concrete
behavior the view denotes (each step is exact under all instantiations),
so the labels it passes through get the run's states folded back in and
need no abstract transitions of their own.  The run ends where concrete
knowledge ends: at a placeholder access, at a sealed continuation, at a
halt, or when it gets stuck; from the final state the analysis continues
abstractly.  Runs that exhaust their budget are discarded wholesale and
the originating view is blacklisted, so the result degrades to the plain
analysis rather than hanging.

Sealing is gated by a policy: never, at every view, or only at function
entries (where the whole call is replayed concretely and the view's
continuation is parked behind a placeholder that stops the run at the
matching return).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

from .analysis import (
    AnalysisSettings,
    IterationCapExceededError,
    Metrics,
    ViewMap,
    fixpoint_height_bound,
    successors,
)
from .concrete import TOP_SITE, Addr, CtxEntry, Location, PropLoc, VarLoc
from .domain import (
    ACtxEntry,
    ALoc,
    APropLoc,
    AVarLoc,
    AbstractState,
    AbstractValue,
    Count,
    DomainMismatchError,
    PrimitiveDomain,
    join_state,
    join_value,
    leq_state,
    state_key,
    value_from_concrete,
    value_from_primitive,
    value_singleton,
)
from .lang import (
    UNDEF,
    Assign,
    Branch,
    Call,
    Expr,
    Label,
    Lambda,
    NewObject,
    Op,
    Program,
    PropAccess,
    Ref,
    Reference,
    Return,
)
from .sealed import (
    AbstractInstantiationMap,
    Bot,
    Budgets,
    SealedOrConcrete,
    SealedRunResult,
    SealedState,
    SealedValue,
    placeholders_of,
    run_sealed,
    sealed_step,
)
from .sealed import state_key as sealed_state_key

logger = logging.getLogger("dsa.engine")


class ShortcutPolicy(Enum):
    OFF = "off"
    EVERY_VIEW = "every-view"
    FUNCTION_LEVEL = "function"

    @staticmethod
    def from_name(name: str) -> "ShortcutPolicy":
        for p in ShortcutPolicy:
            if p.value == name:
                return p
        raise ValueError(f"unknown policy {name!r}")


class SealFailure(Enum):
    POLICY_REJECTED = "policy-rejected"
    MULTI_INSTANCE_ADDRESS = "multi-instance-address"
    AMBIGUOUS_CONTEXT = "ambiguous-context"
    NO_FIRST_STEP = "no-first-step"


@dataclass(frozen=True)
class NotApplicable:
    reason: SealFailure
    detail: str = ""


@dataclass
class Seal:
    """A runnable rebuild of one view.

    cont_restore remembers, per continuation placeholder, the context
    entries it hides; unsealing puts them back."""

    state: SealedState
    imap: AbstractInstantiationMap
    cont_restore: dict[int, frozenset[ACtxEntry]]


def function_entry_labels(program: Program) -> frozenset[Label]:
    """Labels that are the body of some function literal in the program."""
    found: set[Label] = set()

    def walk_expr(e: Expr) -> None:
        if isinstance(e, Lambda):
            found.add(e.body)
        elif isinstance(e, Op):
            for a in e.args:
                walk_expr(a)
        elif isinstance(e, Ref):
            walk_ref(e.ref)

    def walk_ref(r: Reference) -> None:
        if isinstance(r, PropAccess):
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
    return frozenset(found)


def _concrete_loc(aloc: ALoc) -> Location:
    if isinstance(aloc, AVarLoc):
        return VarLoc(Addr("env", aloc.addr, 0), aloc.name)
    return PropLoc(Addr("obj", aloc.addr, 0), aloc.key)


def _abstract_loc(loc: Location) -> ALoc:
    if isinstance(loc, VarLoc):
        return AVarLoc(loc.env.site, loc.name)
    return APropLoc(loc.obj.site, loc.key)


def seal_view(
    program: Program,
    label: Label,
    state: AbstractState,
    policy: ShortcutPolicy,
    fn_entries: frozenset[Label] = frozenset(),
) -> Seal | NotApplicable:
    """Rebuild a view as a sealed state, if the view pins things down
    enough for that to be exact.

    Every address that must be materialized (environments, context slots,
    locations) needs its site allocated exactly once, so the canonical
    sequence-0 instance is the only instance.  Context slots need a
    single continuation with a single return target.  Values the view
    leaves open become placeholders.  Finally the rebuilt state must
    actually have a first sealed step; a view that would stop immediately
    is not worth sealing."""
    if policy is ShortcutPolicy.OFF:
        return NotApplicable(SealFailure.POLICY_REJECTED, "shortcuts are off")
    if state.is_bottom:
        return NotApplicable(SealFailure.POLICY_REJECTED, "bottom view")
    if policy is ShortcutPolicy.FUNCTION_LEVEL and label not in fn_entries:
        return NotApplicable(SealFailure.POLICY_REJECTED, f"label {label} is not a function entry")
    env_site = state.env
    assert env_site is not None
    seal_cont = policy is ShortcutPolicy.FUNCTION_LEVEL and env_site != TOP_SITE

    def single(site: int) -> bool:
        return state.counter.get(site, Count.ZERO) == Count.ONE

    if not single(env_site):
        return NotApplicable(SealFailure.MULTI_INSTANCE_ADDRESS, f"environment site {env_site}")

    imap: AbstractInstantiationMap = {}

    def mint(v: AbstractValue) -> SealedValue:
        w = SealedValue(len(imap))
        imap[w] = v
        return w

    memory: dict[Location, SealedOrConcrete] = {}
    for aloc in sorted(state.memory, key=lambda l: l.sort_key()):
        if not single(aloc.addr):
            return NotApplicable(SealFailure.MULTI_INSTANCE_ADDRESS, f"location site {aloc.addr}")
        v = state.memory[aloc]
        c = value_singleton(v, state.counter)
        memory[_concrete_loc(aloc)] = c if c is not None else mint(v)

    context: dict[Addr, object] = {}
    cont_restore: dict[int, frozenset[ACtxEntry]] = {}
    for site in sorted(state.context):
        if not single(site):
            return NotApplicable(SealFailure.MULTI_INSTANCE_ADDRESS, f"context site {site}")
        if seal_cont and site == env_site:
            continue  # replaced by a sealed continuation below
        entries = state.context[site]
        if len(entries) != 1:
            return NotApplicable(SealFailure.AMBIGUOUS_CONTEXT, f"{len(entries)} continuations at site {site}")
        (e,) = entries
        if len(e.targets) != 1:
            return NotApplicable(SealFailure.AMBIGUOUS_CONTEXT, f"{len(e.targets)} return targets at site {site}")
        if not single(e.ret_addr):
            return NotApplicable(SealFailure.MULTI_INSTANCE_ADDRESS, f"return environment site {e.ret_addr}")
        (tgt,) = e.targets
        if not single(tgt.addr):
            return NotApplicable(SealFailure.MULTI_INSTANCE_ADDRESS, f"return target site {tgt.addr}")
        context[Addr("env", site, 0)] = CtxEntry(Addr("env", e.ret_addr, 0), e.ret_label, _concrete_loc(tgt))
    if seal_cont:
        if env_site not in state.context:
            return NotApplicable(SealFailure.AMBIGUOUS_CONTEXT, f"no continuation recorded for site {env_site}")
        w = mint(value_from_primitive(state.domain, UNDEF))
        cont_restore[w.id] = state.context[env_site]
        context[Addr("env", env_site, 0)] = w

    sealed = SealedState(label, memory, context, Addr("env", env_site, 0), dict(state.counter), 1)
    first = sealed_step(program, sealed)
    if isinstance(first, Bot):
        return NotApplicable(SealFailure.NO_FIRST_STEP, first.reason.kind)
    return Seal(sealed, imap, cont_restore)


def unseal_state(
    domain: PrimitiveDomain,
    imap: AbstractInstantiationMap,
    state: SealedState,
    cont_restore: dict[int, frozenset[ACtxEntry]] | None = None,
) -> AbstractState:
    """Fold a sealed state back into a view state.  Addresses collapse to
    their sites (same-site locations join), placeholders read their
    abstract meaning off the instantiation map, and parked continuations
    come back from cont_restore."""
    memory: dict[ALoc, AbstractValue] = {}
    for loc in sorted(state.memory, key=lambda l: l.sort_key()):
        v = state.memory[loc]
        av = imap[v] if isinstance(v, SealedValue) else value_from_concrete(domain, v)
        aloc = _abstract_loc(loc)
        memory[aloc] = join_value(memory[aloc], av) if aloc in memory else av
    context: dict[int, frozenset[ACtxEntry]] = {}
    for a in sorted(state.context, key=lambda a: a.sort_key()):
        e = state.context[a]
        if isinstance(e, SealedValue):
            entries = (cont_restore or {})[e.id]
        elif isinstance(e, CtxEntry):
            entries = frozenset({ACtxEntry(e.ret_env.site, e.ret_label, frozenset({_abstract_loc(e.target)}))})
        else:
            raise TypeError(f"cannot unseal context entry {e!r}")
        context[a.site] = context.get(a.site, frozenset()) | entries
    return AbstractState(domain, memory, context, state.env.site, dict(state.counter)).normalized()


def pair_key(seal_or_imap: AbstractInstantiationMap, state: SealedState, cont_restore: dict[int, frozenset[ACtxEntry]] | None = None) -> tuple:
    """Identity of a sealed state together with the meanings of the
    placeholders still alive in it.  The parked continuations are part of
    the identity: two seals that differ only in what a continuation
    placeholder hides must not be treated as the same run."""
    live = placeholders_of(state)
    conts = tuple(
        sorted((wid, tuple(sorted(e.sort_key() for e in entries))) for wid, entries in (cont_restore or {}).items())
    )
    return (
        sealed_state_key(state),
        tuple((w.id, seal_or_imap[w].key()) for w in live),
        conts,
    )


# ---------------------------------------------------------------------------
# results

@dataclass(frozen=True)
class ShortcutEvent:
    start_view: Label
    outcome: str  # "taken" | "not-applicable" | "budget-reverted"
    end_view: Label | None = None
    steps: int = 0
    placeholder_count: int = 0
    terminal: str | None = None  # for taken runs: halt | stuck | sealed_access | sealed_return
    reason: str | None = None  # for not-applicable

    def to_json(self) -> dict:
        out: dict = {"start_view": self.start_view, "outcome": self.outcome}
        if self.outcome != "not-applicable":
            out["end_view"] = self.end_view
            out["steps"] = self.steps
            out["placeholder_count"] = self.placeholder_count
        if self.terminal is not None:
            out["terminal"] = self.terminal
        if self.reason is not None:
            out["reason"] = self.reason
        return out


@dataclass
class SealedRun:
    """One executed sealed run, kept for inspection and for the checking
    harness (its trace is a bag of sealed transitions to validate)."""

    start_view: Label
    imap: AbstractInstantiationMap
    result: SealedRunResult
    cont_restore: dict[int, frozenset[ACtxEntry]]


@dataclass
class ShortcutResult:
    views: ViewMap
    iterations: int
    diagnostics: list[str] = field(default_factory=list)
    metrics: Metrics = field(default_factory=Metrics)
    events: list[ShortcutEvent] = field(default_factory=list)
    runs: list[SealedRun] = field(default_factory=list)
    policy: ShortcutPolicy = ShortcutPolicy.OFF


# ---------------------------------------------------------------------------
# driver

def analyze_with_shortcuts(
    program: Program,
    initial: ViewMap,
    settings: AnalysisSettings | None = None,
    policy: ShortcutPolicy = ShortcutPolicy.EVERY_VIEW,
    budgets: Budgets = Budgets(),
) -> ShortcutResult:
    """Iterate to a fixpoint, replacing abstract stepping by sealed runs
    wherever the policy and the view allow it.

    Each round processes the views that changed in the previous round.
    A view that seals runs to its stopping point at once; every state the
    run passes through is folded back into the view map, and recorded so
    an identical later seal is recognized as already explored.  The
    stopping state itself stays unexplored unless the run halted or got
    stuck, because a placeholder access stops the run with behavior still
    to come; that view continues abstractly (a fresh seal of it has no
    first step).  A run that overruns its budget is thrown away and its
    view falls back to abstract stepping, permanently."""
    if not initial:
        raise ValueError("initial view map is empty")
    if settings is None:
        settings = AnalysisSettings(domain=next(iter(initial.values())).domain)
    views: ViewMap = {lbl: st.normalized() for lbl, st in initial.items() if not st.is_bottom}
    if not views:
        raise ValueError("initial view map is empty")
    domain = settings.domain
    diags: list[str] = []
    metrics = Metrics()
    events: list[ShortcutEvent] = []
    runs: list[SealedRun] = []
    fn_entries = function_entry_labels(program)
    covered: set[tuple] = set()
    blacklist: set[tuple[Label, tuple]] = set()
    attempted: set[tuple[Label, tuple]] = set()
    cap = settings.max_iterations if settings.max_iterations is not None else fixpoint_height_bound(program, domain)

    dirty = set(views)
    iterations = 0
    while dirty:
        if iterations >= cap:
            raise IterationCapExceededError(f"no fixpoint after {iterations} iterations")
        iterations += 1
        incoming: ViewMap = {}

        def push(to: Label, st: AbstractState) -> None:
            incoming[to] = join_state(incoming[to], st, diags) if to in incoming else st

        for label in sorted(dirty):
            d = views[label]
            akey = state_key(d)
            step_abstract = True
            if policy is not ShortcutPolicy.OFF and (label, akey) not in blacklist:
                seal = seal_view(program, label, d, policy, fn_entries)
                if isinstance(seal, NotApplicable):
                    if (label, akey) not in attempted:
                        attempted.add((label, akey))
                        events.append(ShortcutEvent(label, "not-applicable", reason=seal.reason.value))
                else:
                    step_abstract = False
                    pk = pair_key(seal.imap, seal.state, seal.cont_restore)
                    if pk in covered:
                        logger.debug("view %d: seal already explored", label)
                    else:
                        rr = run_sealed(program, seal.state, budgets)
                        metrics.sealed_steps += rr.steps
                        if rr.budget_exceeded:
                            blacklist.add((label, akey))
                            events.append(
                                ShortcutEvent(
                                    label,
                                    "budget-reverted",
                                    end_view=rr.trace[-1].label,
                                    steps=rr.steps,
                                    placeholder_count=len(seal.imap),
                                )
                            )
                            logger.info("view %d: sealed run overran its budget after %d steps; reverted", label, rr.steps)
                            step_abstract = True
                        else:
                            terminal = rr.terminal
                            assert terminal is not None
                            metrics.shortcuts_taken += 1
                            runs.append(SealedRun(label, seal.imap, rr, seal.cont_restore))
                            events.append(
                                ShortcutEvent(
                                    label,
                                    "taken",
                                    end_view=rr.trace[-1].label,
                                    steps=rr.steps,
                                    placeholder_count=len(seal.imap),
                                    terminal=terminal.kind,
                                )
                            )
                            logger.info(
                                "view %d: sealed run of %d steps ended at view %d (%s)",
                                label,
                                rr.steps,
                                rr.trace[-1].label,
                                terminal.kind,
                            )
                            explored = rr.trace if terminal.kind in ("halt", "stuck") else rr.trace[:-1]
                            for t in explored:
                                covered.add(pair_key(seal.imap, t, seal.cont_restore))
                            for t in rr.trace:
                                push(t.label, unseal_state(domain, seal.imap, t, seal.cont_restore))
            if step_abstract:
                for to, st in successors(program, label, d, settings, diags, metrics):
                    push(to, st)

        dirty = set()
        for to, st in incoming.items():
            old = views.get(to, AbstractState.bottom(domain))
            joined = join_state(old, st, diags)
            if joined != old:
                views[to] = joined
                dirty.add(to)
    return ShortcutResult(views, iterations, diags, metrics, events, runs, policy)


# ---------------------------------------------------------------------------
# comparing results

@dataclass
class PrecisionReport:
    """How two view maps over the same domain relate, label by label.
    `left-more-precise` means the left view is strictly below the right
    one; views with different environments are incomparable."""

    per_label: dict[Label, str]
    counts: dict[str, int]

    def to_json(self) -> dict:
        return {
            "per_label": {str(l): v for l, v in sorted(self.per_label.items())},
            "counts": dict(sorted(self.counts.items())),
        }


def compare_precision(left: ViewMap, right: ViewMap) -> PrecisionReport:
    domains = {st.domain for st in left.values()} | {st.domain for st in right.values()}
    if len(domains) > 1:
        raise DomainMismatchError("view maps use different domains")
    domain = domains.pop() if domains else None
    per_label: dict[Label, str] = {}
    counts = {"equal": 0, "left-more-precise": 0, "right-more-precise": 0, "incomparable": 0}
    for label in sorted(set(left) | set(right)):
        assert domain is not None
        bot = AbstractState.bottom(domain)
        a = left.get(label, bot)
        b = right.get(label, bot)
        ab = leq_state(a, b)
        ba = leq_state(b, a)
        if ab and ba:
            verdict = "equal"
        elif ab:
            verdict = "left-more-precise"
        elif ba:
            verdict = "right-more-precise"
        else:
            verdict = "incomparable"
        per_label[label] = verdict
        counts[verdict] += 1
    return PrecisionReport(per_label, counts)
