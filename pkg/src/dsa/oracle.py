"""Independent checks for analysis results.

Everything here leans only on the concrete machine and on enumeration of
what abstract values denote — not on the analyzer or the shortcut driver
— so a bug in those shows up as a reported violation rather than being
reproduced by the check.

Two checks are offered.  Soundness: run the program concretely from
every initial state an entry view denotes (within caps) and confirm that
each visited concrete state is covered by the computed view at its
label.  Validity: take one sealed step and confirm it commutes with
instantiation — a concrete successor per sample that matches, or, for a
stopping step, evidence that no single sealed successor could have
served every instantiation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .concrete import (
    TOP_SITE,
    ConcreteState,
    ConcreteValue,
    CtxEntry,
    Location,
    Next,
    VarLoc,
    concrete_step,
    initial_state,
    run_concrete,
)
from .domain import (
    ALoc,
    APropLoc,
    AbstractState,
    AVarLoc,
    Count,
    NonEnumerable,
    gamma_value,
    value_contains,
)
from .lang import UNDEF, Bool, Int, Label, Program, Str
from .sealed import (
    AbstractInstantiationMap,
    InstantiationMap,
    SealedState,
    SNext,
    gamma_imap,
    instantiate,
    sealed_step,
)


def _site_loc(loc: Location) -> ALoc:
    """The per-site location a concrete location folds onto."""
    if isinstance(loc, VarLoc):
        return AVarLoc(loc.env.site, loc.name)
    return APropLoc(loc.obj.site, loc.key)


@dataclass(frozen=True)
class OracleCaps:
    """Bounds that keep enumeration finite.  int_cap bounds how far
    open-ended integer categories are sampled; the other caps bound the
    cross products and the concrete runs."""

    int_cap: int = 4
    max_instantiations: int = 64
    step_budget: int = 1000
    max_initial_states: int = 64


# ---------------------------------------------------------------------------
# enumerating entry states

def enumerate_initial_states(
    program: Program,
    entry_view: AbstractState,
    caps: OracleCaps = OracleCaps(),
) -> tuple[list[ConcreteState], bool] | NonEnumerable:
    """Concrete entry states the view denotes: the cross product of each
    top-level binding's values.  The boolean is False when a category was
    sampled rather than exhausted or the product was truncated.  Views
    with call context, allocated objects, or address-valued bindings are
    not enumerable — there is no canonical heap to rebuild for them."""
    if entry_view.is_bottom:
        return ([], True)
    if entry_view.env != TOP_SITE:
        return NonEnumerable("entry view is not at top level")
    if entry_view.context:
        return NonEnumerable("entry view carries call context")
    if any(s != TOP_SITE and c != Count.ZERO for s, c in entry_view.counter.items()):
        return NonEnumerable("entry view carries allocated objects")
    names: list[str] = []
    columns: list[list[ConcreteValue]] = []
    exhaustive = True
    for aloc in sorted(entry_view.memory, key=lambda l: l.sort_key()):
        if not isinstance(aloc, AVarLoc) or aloc.addr != TOP_SITE:
            return NonEnumerable(f"entry binding at non-top location {aloc!r}")
        v = entry_view.memory[aloc]
        if v.addrs:
            return NonEnumerable(f"entry binding {aloc.name!r} holds object addresses")
        g = gamma_value(v, caps.int_cap)
        if isinstance(g, NonEnumerable):
            return NonEnumerable(f"entry binding {aloc.name!r}: {g.reason}")
        exhaustive = exhaustive and g.exhaustive
        names.append(aloc.name)
        columns.append(list(g.values))
    total = 1
    for col in columns:
        total *= len(col)
    if total > caps.max_initial_states:
        exhaustive = False
    states = [
        initial_state(program, dict(zip(names, combo)))
        for combo in itertools.islice(itertools.product(*columns), caps.max_initial_states)
    ]
    return (states, exhaustive)


# ---------------------------------------------------------------------------
# soundness

@dataclass(frozen=True)
class Violation:
    label: Label
    kind: str  # "missing-view" | "env" | "memory" | "context"
    detail: str


@dataclass
class SoundnessReport:
    initial_states: int
    states_checked: int
    violations: list[Violation] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    exhaustive: bool = True

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "initial_states": self.initial_states,
            "states_checked": self.states_checked,
            "exhaustive": self.exhaustive,
            "violations": [
                {"label": v.label, "kind": v.kind, "detail": v.detail} for v in self.violations
            ],
            "skipped": list(self.skipped),
        }


def coverage_problems(astate: AbstractState, cstate: ConcreteState) -> list[tuple[str, str]]:
    """Ways in which the view fails to account for the concrete state."""
    problems: list[tuple[str, str]] = []
    if astate.is_bottom:
        return [("env", "view is bottom")]
    if cstate.env.site != astate.env:
        problems.append(("env", f"environment site {cstate.env.site} vs view {astate.env}"))
    for loc in sorted(cstate.memory, key=lambda l: l.sort_key()):
        v = cstate.memory[loc]
        av = astate.memory.get(_site_loc(loc))
        if av is None:
            problems.append(("memory", f"{loc!r} is bound but the view has nothing there"))
        elif not value_contains(av, v):
            problems.append(("memory", f"{loc!r} holds {v!r}, not covered by the view"))
    for addr in sorted(cstate.context, key=lambda a: a.sort_key()):
        entry = cstate.context[addr]
        if not isinstance(entry, CtxEntry):
            continue  # placeholder junk; the machine will stop on it by itself
        entries = astate.context.get(addr.site, frozenset())
        matched = any(
            e.ret_addr == entry.ret_env.site
            and e.ret_label == entry.ret_label
            and _site_loc(entry.target) in e.targets
            for e in entries
        )
        if not matched:
            problems.append(("context", f"continuation at site {addr.site} ({entry!r}) has no abstract counterpart"))
    return problems


def check_soundness(
    program: Program,
    entry_view: AbstractState,
    views: dict[Label, AbstractState],
    caps: OracleCaps = OracleCaps(),
) -> SoundnessReport:
    """Every concrete state visited from any entry state the entry view
    denotes must be covered by the computed view at its label."""
    init = enumerate_initial_states(program, entry_view, caps)
    if isinstance(init, NonEnumerable):
        return SoundnessReport(0, 0, [], [f"cannot enumerate initial states: {init.reason}"], False)
    states, exhaustive = init
    violations: list[Violation] = []
    skipped: list[str] = []
    checked = 0
    for s0 in states:
        rr = run_concrete(program, s0, caps.step_budget)
        if rr.outcome == "budget":
            skipped.append(f"a run used up its {caps.step_budget}-step budget; only its visited prefix was checked")
            exhaustive = False
        for s in rr.collecting:
            checked += 1
            v = views.get(s.label)
            if v is None or v.is_bottom:
                violations.append(
                    Violation(s.label, "missing-view", f"a concrete run reaches label {s.label} but the analysis has no view there")
                )
                continue
            for kind, detail in coverage_problems(v, s):
                violations.append(Violation(s.label, kind, detail))
    return SoundnessReport(len(states), checked, violations, skipped, exhaustive)


# ---------------------------------------------------------------------------
# validity of sealed steps

_PROBES: tuple[ConcreteValue, ...] = (Int(-1), Int(0), Int(1), Str("p!"), Bool(True), Bool(False), UNDEF)


@dataclass
class ValidityReport:
    kind: str  # "next" | "halt" | "stuck" | "sealed_access" | "sealed_return"
    valid: bool | None  # None when the check was skipped
    samples: int
    skipped: str | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.valid is not False


def _sample_maps(imap: AbstractInstantiationMap, caps: OracleCaps) -> list[InstantiationMap] | NonEnumerable:
    """Instantiations to test against: the enumerated meanings of every
    placeholder, widened with probe values far outside those meanings so
    that agreement among the samples is not an artifact of sampling."""
    base = gamma_imap(imap, caps.int_cap, caps.max_instantiations)
    if isinstance(base, NonEnumerable):
        return base
    placeholders = sorted(imap, key=lambda w: w.id)
    samples = list(base)
    first = dict(samples[0]) if samples else {w: UNDEF for w in placeholders}
    for w in placeholders:
        for p in _PROBES:
            m = dict(first)
            m[w] = p
            samples.append(m)
    return samples


def _successors(program: Program, s: ConcreteState) -> list[ConcreteState]:
    r = concrete_step(program, s)
    return [r.state] if isinstance(r, Next) else []


def check_validity(
    program: Program,
    imap: AbstractInstantiationMap,
    state: SealedState,
    caps: OracleCaps = OracleCaps(),
) -> ValidityReport:
    """Check one sealed step out of `state` against Def-style commutation.

    A moving step must, under every sampled instantiation, match the one
    concrete step exactly.  A stopping step is justified when no single
    sealed successor could have reproduced every sample's concrete step:
    some sample has no concrete successor at all, or the successors
    disagree in a way no placeholder accounts for."""
    r = sealed_step(program, state)
    samples = _sample_maps(imap, caps)
    if isinstance(samples, NonEnumerable):
        kind = "next" if isinstance(r, SNext) else r.reason.kind
        return ValidityReport(kind, None, 0, skipped=samples.reason)

    if isinstance(r, SNext):
        for m in samples:
            succs = _successors(program, instantiate(state, m))
            want = instantiate(r.state, m)
            if len(succs) != 1:
                return ValidityReport(
                    "next", False, len(samples), detail=f"under {m!r} the concrete machine does not take exactly one step"
                )
            if succs[0] != want:
                return ValidityReport(
                    "next", False, len(samples), detail=f"under {m!r} the concrete step disagrees with the sealed one"
                )
        return ValidityReport("next", True, len(samples))

    reason = r.reason
    outcomes = [(m, _successors(program, instantiate(state, m))) for m in samples]
    with_succ = [o for o in outcomes if o[1]]

    if reason.kind in ("halt", "stuck"):
        if with_succ:
            m, _ = with_succ[0]
            return ValidityReport(
                reason.kind, False, len(samples), detail=f"claimed no continuation, but under {m!r} the concrete machine steps"
            )
        return ValidityReport(reason.kind, True, len(samples))

    # A placeholder access: justified unless one sealed successor would
    # have explained every sample.
    if len(with_succ) < len(outcomes):
        return ValidityReport(reason.kind, True, len(samples))
    if _uniform_candidate_exists(imap, samples, [s[0] for _, s in outcomes]):
        return ValidityReport(
            reason.kind, False, len(samples), detail="every sampled instantiation steps uniformly; stopping was unnecessary"
        )
    return ValidityReport(reason.kind, True, len(samples))


def _uniform_candidate_exists(
    imap: AbstractInstantiationMap,
    samples: list[InstantiationMap],
    succs: list[ConcreteState],
) -> bool:
    """Could a single sealed state instantiate to every successor?  Each
    position must either be the same concrete value everywhere or track
    some placeholder's sampled values exactly."""
    first = succs[0]
    if any(s.label != first.label or s.env != first.env for s in succs):
        return False
    if any(set(s.memory) != set(first.memory) or set(s.context) != set(first.context) for s in succs):
        return False

    def explainable(column: list[object]) -> bool:
        if all(v == column[0] for v in column):
            return True
        for w in imap:
            if all(v == m.get(w) for v, m in zip(column, samples)):
                return True
        return False

    for loc in first.memory:
        if not explainable([s.memory[loc] for s in succs]):
            return False
    for addr in first.context:
        if not explainable([s.context[addr] for s in succs]):
            return False
    return True
