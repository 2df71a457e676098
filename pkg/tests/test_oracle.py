"""Independent checks: view soundness against real runs, and step
validity of the sealed machine under sampled instantiations."""
from __future__ import annotations

import dataclasses

from dsa.analysis import AnalysisSettings, analyze_abstract, initial_views
from dsa.concrete import TOP_SITE, Addr, Bool, Int, Str, VarLoc
from dsa.domain import (
    AVarLoc,
    KSetDomain,
    NonEnumerable,
    SignDomain,
    join_value,
    value_from_primitive,
)
from dsa.engine import ShortcutPolicy, analyze_with_shortcuts
from dsa.lang import parse_program
from dsa.oracle import (
    OracleCaps,
    ValidityReport,
    _uniform_candidate_exists,
    check_soundness,
    check_validity,
    enumerate_initial_states,
)
from dsa.sealed import SealedState, SealedValue

SIGN = SignDomain()
KSET = KSetDomain()
ENV = Addr("env", TOP_SITE, 0)
W0 = SealedValue(0)

DIAMOND = """\
0: if ge(x, 0) 3
1: x = neg(x)
2: if true 4
3: x = x
4: x = neg(x)
5: ret x
"""


def sv(*ns: int):
    out = value_from_primitive(SIGN, Int(ns[0]))
    for n in ns[1:]:
        out = join_value(out, value_from_primitive(SIGN, Int(n)))
    return out


def kv(*ns: int):
    out = value_from_primitive(KSET, Int(ns[0]))
    for n in ns[1:]:
        out = join_value(out, value_from_primitive(KSET, Int(n)))
    return out


def analyzed(src: str, domain, bindings):
    p = parse_program(src)
    iv = initial_views(p, domain, bindings)
    res = analyze_abstract(p, iv, AnalysisSettings(domain))
    return p, iv[p.entry], res.views


def sealed(label: int, **bindings) -> SealedState:
    memory = {VarLoc(ENV, k): v for k, v in bindings.items()}
    return SealedState(label=label, memory=memory, context={}, env=ENV)


# -- soundness -----------------------------------------------------------------

def test_diamond_views_cover_every_run():
    p, entry, views = analyzed(DIAMOND, SIGN, {"x": sv(-1, 0, 1)})
    rep = check_soundness(p, entry, views)
    assert rep.ok
    assert rep.states_checked > 0
    # sign categories are sampled, never exhausted
    assert not rep.exhaustive


def test_kset_soundness_is_exhaustive():
    p, entry, views = analyzed(DIAMOND, KSET, {"x": kv(-2, 0, 3)})
    rep = check_soundness(p, entry, views)
    assert rep.ok and rep.exhaustive
    assert rep.initial_states == 3


def test_dropped_binding_is_caught():
    p, entry, views = analyzed(DIAMOND, KSET, {"x": kv(1)})
    v5 = views[5]
    broken = dict(views)
    broken[5] = dataclasses.replace(
        v5, memory={l: x for l, x in v5.memory.items() if not isinstance(l, AVarLoc) or l.name != "x"}
    )
    rep = check_soundness(p, entry, broken)
    assert not rep.ok
    assert {v.kind for v in rep.violations} == {"memory"}
    assert all(v.label == 5 for v in rep.violations)


def test_shrunken_value_is_caught():
    p, entry, views = analyzed(DIAMOND, KSET, {"x": kv(1)})
    loc = AVarLoc(TOP_SITE, "x")
    v5 = views[5]
    broken = dict(views)
    broken[5] = dataclasses.replace(v5, memory={**v5.memory, loc: kv(99)})
    rep = check_soundness(p, entry, broken)
    assert not rep.ok
    assert any(v.kind == "memory" and "not covered" in v.detail for v in rep.violations)


def test_deleted_view_is_caught():
    p, entry, views = analyzed(DIAMOND, KSET, {"x": kv(1)})
    broken = {l: s for l, s in views.items() if l != 4}
    rep = check_soundness(p, entry, broken)
    assert not rep.ok
    assert any(v.kind == "missing-view" and v.label == 4 for v in rep.violations)


def test_budget_exhausted_runs_are_reported_not_failed():
    src = "0: if true 0\n"
    p, entry, views = analyzed(src, KSET, {"x": kv(0)})
    rep = check_soundness(p, entry, views, OracleCaps(step_budget=10))
    assert rep.ok  # the visited prefix is still covered
    assert rep.skipped and not rep.exhaustive


def test_shortcut_results_pass_the_same_check():
    p = parse_program(DIAMOND)
    iv = initial_views(p, SIGN, {"x": sv(-1, 0, 1)})
    res = analyze_with_shortcuts(p, iv, policy=ShortcutPolicy.EVERY_VIEW)
    rep = check_soundness(p, iv[p.entry], res.views)
    assert rep.ok


# -- enumerating entry states -----------------------------------------------------

def test_bottom_view_denotes_nothing():
    p = parse_program(DIAMOND)
    from dsa.domain import AbstractState

    assert enumerate_initial_states(p, AbstractState.bottom(SIGN)) == ([], True)


def test_entry_with_call_context_is_not_enumerable():
    p, entry, _ = analyzed(DIAMOND, KSET, {"x": kv(1)})
    from dsa.domain import ACtxEntry

    noisy = dataclasses.replace(
        entry, context={TOP_SITE: frozenset({ACtxEntry(TOP_SITE, 1, frozenset())})}
    )
    out = enumerate_initial_states(p, noisy)
    assert isinstance(out, NonEnumerable) and "context" in out.reason


def test_entry_with_allocations_is_not_enumerable():
    from dsa.domain import Count

    p, entry, _ = analyzed(DIAMOND, KSET, {"x": kv(1)})
    noisy = dataclasses.replace(entry, counter={**entry.counter, 7: Count.ONE})
    out = enumerate_initial_states(p, noisy)
    assert isinstance(out, NonEnumerable)


def test_product_is_truncated_at_the_cap():
    wide = KSetDomain(k=9)
    p = parse_program("0: z = add(a, b)\n1: ret z\n")
    vals = value_from_primitive(wide, Int(-4))
    for n in range(-3, 5):
        vals = join_value(vals, value_from_primitive(wide, Int(n)))
    iv = initial_views(p, wide, {"a": vals, "b": vals})  # 9 * 9 = 81 > 64
    out = enumerate_initial_states(p, iv[0], OracleCaps(max_initial_states=64))
    assert not isinstance(out, NonEnumerable)
    states, exhaustive = out
    assert len(states) == 64 and not exhaustive


def test_small_product_is_exhaustive_and_ordered():
    p = parse_program("0: z = add(a, b)\n1: ret z\n")
    iv = initial_views(p, KSET, {"a": kv(1, 2), "b": kv(5)})
    states, exhaustive = enumerate_initial_states(p, iv[0])
    assert exhaustive and len(states) == 2
    got = {s.memory[VarLoc(ENV, "a")].value for s in states}
    assert got == {1, 2}
    assert all(s.memory[VarLoc(ENV, "b")] == Int(5) for s in states)


# -- validity ------------------------------------------------------------------------

def test_moving_step_commutes_under_every_sample():
    p = parse_program("0: y = add(1, 2)\n1: ret y\n")
    rep = check_validity(p, {W0: kv(3, 4)}, sealed(0, x=W0))
    assert rep.kind == "next" and rep.valid is True
    assert rep.samples > 2  # enumerated meanings plus probe widenings


def test_halt_is_final_under_every_sample():
    p = parse_program("0: ret y\n")
    rep = check_validity(p, {W0: kv(1)}, sealed(0, x=W0, y=Int(7)))
    assert rep.kind == "halt" and rep.valid is True


def test_placeholder_access_stop_is_justified():
    p = parse_program("0: y = add(x, 1)\n1: ret y\n")
    rep = check_validity(p, {W0: sv(0, 1)}, sealed(0, x=W0))
    assert rep.kind == "sealed_access" and rep.valid is True
    assert rep.ok


def test_branch_on_placeholder_stop_is_justified():
    p = parse_program("0: if x 2\n1: ret 0\n2: ret 1\n")
    rep = check_validity(p, {W0: kv(0)}, sealed(0, x=W0))
    # int samples make the branch stick; bool probes pull it both ways
    assert rep.kind == "sealed_access" and rep.valid is True


def test_unenumerable_meanings_skip_the_check():
    from dsa.domain import TOP, AbstractValue, PrimElem

    top_ints = AbstractValue(KSET, PrimElem(ints=TOP, strs=frozenset(), bools=frozenset(), undef=False))
    p = parse_program("0: y = add(x, 1)\n1: ret y\n")
    rep = check_validity(p, {W0: top_ints}, sealed(0, x=W0))
    assert rep.valid is None and rep.skipped
    assert rep.ok  # a skip is not a violation


def test_report_ok_tracks_valid():
    assert ValidityReport("next", True, 3).ok
    assert ValidityReport("next", None, 0, skipped="x").ok
    assert not ValidityReport("next", False, 3).ok


def test_every_transition_of_an_engine_run_is_valid():
    p = parse_program(DIAMOND)
    iv = initial_views(p, SIGN, {"x": sv(-1, 0, 1)})
    res = analyze_with_shortcuts(p, iv, policy=ShortcutPolicy.EVERY_VIEW)
    assert res.runs
    checked = 0
    for rn in res.runs:
        for st in rn.result.trace:
            rep = check_validity(p, rn.imap, st)
            assert rep.ok, rep.detail
            checked += 1
    assert checked > 0


# -- the anti-unification core of the validity check ----------------------------------

def _succ(label: int, **bindings):
    from dsa.concrete import ConcreteState

    return ConcreteState(
        label=label,
        memory={VarLoc(ENV, k): v for k, v in bindings.items()},
        context={},
        env=ENV,
    )


def test_identical_successors_are_explained_by_a_constant():
    samples = [{W0: Int(1)}, {W0: Int(2)}]
    succs = [_succ(1, y=Int(9)), _succ(1, y=Int(9))]
    assert _uniform_candidate_exists({W0: kv(1, 2)}, samples, succs)


def test_placeholder_tracking_column_is_explained():
    samples = [{W0: Int(1)}, {W0: Int(2)}]
    succs = [_succ(1, y=Int(1)), _succ(1, y=Int(2))]
    assert _uniform_candidate_exists({W0: kv(1, 2)}, samples, succs)


def test_diverging_labels_are_not_explained():
    samples = [{W0: Int(1)}, {W0: Int(2)}]
    succs = [_succ(1, y=Int(0)), _succ(2, y=Int(0))]
    assert not _uniform_candidate_exists({W0: kv(1, 2)}, samples, succs)


def test_untracked_divergence_is_not_explained():
    samples = [{W0: Int(1)}, {W0: Int(2)}]
    succs = [_succ(1, y=Int(10)), _succ(1, y=Int(20))]
    assert not _uniform_candidate_exists({W0: kv(1, 2)}, samples, succs)


def test_mismatched_domains_are_not_explained():
    samples = [{W0: Int(1)}, {W0: Int(2)}]
    succs = [_succ(1, y=Int(1)), _succ(1, y=Int(2), z=Bool(True))]
    assert not _uniform_candidate_exists({W0: kv(1, 2)}, samples, succs)
