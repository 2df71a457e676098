"""Flow-sensitive abstract interpretation to fixpoint."""
from __future__ import annotations

import pytest

from dsa.analysis import (
    NO_EDGE,
    AnalysisSettings,
    IterationCapExceededError,
    NonEnumerableKeyError,
    abstract_step,
    analyze_abstract,
    fixpoint_height_bound,
    initial_views,
    successors,
    view_transition,
    views_from_json,
    views_to_json,
)
from dsa.concrete import TOP_SITE, Int
from dsa.domain import (
    AVarLoc,
    AbstractState,
    KSetDomain,
    SignDomain,
    join_state,
    join_value,
    leq_state,
    value_from_primitive,
)
from dsa.lang import parse_program

SIGN = SignDomain()
KSET = KSetDomain()

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


def sign_at(result, label: int, name: str = "x") -> set[str]:
    return set(result.views[label].memory[AVarLoc(TOP_SITE, name)].prims.ints)


def analyze(src: str, domain, bindings):
    p = parse_program(src)
    iv = initial_views(p, domain, bindings)
    return p, analyze_abstract(p, iv, AnalysisSettings(domain))


def test_diamond_golden_table():
    """Every label's abstract x for the all-signs input, frozen."""
    _, r = analyze(DIAMOND, SIGN, {"x": sv(-1, 0, 1)})
    assert sign_at(r, 0) == {"-", "0", "+"}
    assert sign_at(r, 1) == {"-"}
    assert sign_at(r, 2) == {"+"}
    assert sign_at(r, 3) == {"0", "+"}
    assert sign_at(r, 4) == {"0", "+"}
    assert sign_at(r, 5) == {"-", "0"}
    assert r.iterations == 4
    assert r.metrics.abstract_transitions == 6


def test_diamond_negative_only_union():
    """A flow-insensitive summary of the negative-input run: x is negated
    exactly once on the taken path, so overall x is negative or positive."""
    _, r = analyze(DIAMOND, SIGN, {"x": sv(-1)})
    union = None
    for view in r.views.values():
        v = view.memory.get(AVarLoc(TOP_SITE, "x"))
        if v is not None:
            union = v if union is None else join_value(union, v)
    assert set(union.prims.ints) == {"-", "+"}


def test_branch_refinement_splits_signs():
    _, r = analyze(DIAMOND, SIGN, {"x": sv(-1, 0, 1)})
    assert sign_at(r, 1) == {"-"}      # else edge of ge(x, 0)
    assert sign_at(r, 3) == {"0", "+"}  # then edge


def test_branch_refinement_can_be_disabled():
    p = parse_program(DIAMOND)
    iv = initial_views(p, SIGN, {"x": sv(-1, 0, 1)})
    r = analyze_abstract(p, iv, AnalysisSettings(SIGN, branch_refinement=False))
    assert sign_at(r, 1) == {"-", "0", "+"}
    assert sign_at(r, 3) == {"-", "0", "+"}


def test_kset_does_not_refine_by_default():
    assert not AnalysisSettings(KSET).refinement_on()
    assert AnalysisSettings(SIGN).refinement_on()


def test_chaotic_iteration_matches_naive_resync():
    """The dirty-set loop must compute the same fixpoint as re-running the
    synchronous step on every view each round."""
    programs = [
        (DIAMOND, {"x": sv(-1, 0, 1)}),
        ("0: i = 0\n1: i = add(i, 1)\n2: if lt(i, 3) 1\n3: ret i\n", {}),
        (
            "0: f = fun(y)@4\n1: r = f(x)\n2: r = add(r, 1)\n3: ret r\n"
            "4: t = add(y, y)\n5: ret t\n",
            {"x": sv(1)},
        ),
    ]
    for src, bindings in programs:
        p = parse_program(src)
        settings = AnalysisSettings(SIGN)
        iv = initial_views(p, SIGN, bindings)
        fast = analyze_abstract(p, iv, settings).views

        views = {l: s.normalized() for l, s in iv.items()}
        for _ in range(fixpoint_height_bound(p, SIGN)):
            stepped = abstract_step(p, views, settings)
            new = dict(views)
            for l, s in stepped.items():
                new[l] = join_state(new.get(l, AbstractState.bottom(SIGN)), s)
            if new == views:
                break
            views = new
        else:
            pytest.fail("naive iteration did not settle")
        assert {l: v for l, v in views.items() if not v.is_bottom} == fast


def test_result_is_a_fixpoint_and_covers_initial():
    p = parse_program(DIAMOND)
    iv = initial_views(p, SIGN, {"x": sv(-1, 0, 1)})
    r = analyze_abstract(p, iv, AnalysisSettings(SIGN))
    assert leq_state(iv[p.entry], r.views[p.entry])
    settings = AnalysisSettings(SIGN)
    for label, view in r.views.items():
        for to, st in successors(p, label, view, settings):
            assert leq_state(st, r.views.get(to, AbstractState.bottom(SIGN)))


# -- calls and returns --------------------------------------------------------

CALLER = """\
0: f = fun(y)@4
1: r = f(x)
2: r = add(r, 1)
3: ret r
4: t = add(y, y)
5: ret t
"""


def test_call_and_return_flow():
    p = parse_program(CALLER)
    iv = initial_views(p, KSET, {"x": kv(2, 3)})
    r = analyze_abstract(p, iv, AnalysisSettings(KSET))
    body_param = r.views[4].memory[AVarLoc(4, "y")]
    assert set(body_param.prims.ints) == {2, 3}
    assert set(r.views[3].memory[AVarLoc(TOP_SITE, "r")].prims.ints) == {5, 6, 7}


def test_call_body_runs_under_its_own_environment():
    p = parse_program(CALLER)
    iv = initial_views(p, KSET, {"x": kv(2)})
    r = analyze_abstract(p, iv, AnalysisSettings(KSET))
    assert r.views[4].env == 4
    assert r.views[3].env == TOP_SITE


def test_two_call_sites_merge_in_the_body_and_split_back():
    src = (
        "0: f = fun(y)@5\n"
        "1: a = f(1)\n"
        "2: b = f(10)\n"
        "3: c = add(a, b)\n"
        "4: ret c\n"
        "5: t = add(y, 0)\n"
        "6: ret t\n"
    )
    p = parse_program(src)
    iv = initial_views(p, KSET, {})
    r = analyze_abstract(p, iv, AnalysisSettings(KSET))
    assert set(r.views[5].memory[AVarLoc(5, "y")].prims.ints) == {1, 10}
    # the merged body flows back to both call sites, so both targets get both
    assert set(r.views[4].memory[AVarLoc(TOP_SITE, "c")].prims.ints) == {2, 11, 20}


# -- objects -------------------------------------------------------------------

def test_object_property_tracking():
    src = '0: o = {}\n1: o["a"] = x\n2: y = o["a"]\n3: ret y\n'
    p = parse_program(src)
    iv = initial_views(p, SIGN, {"x": sv(1)})
    r = analyze_abstract(p, iv, AnalysisSettings(SIGN))
    assert set(r.views[3].memory[AVarLoc(TOP_SITE, "y")].prims.ints) == {"+"}


def test_unbounded_key_write_raises():
    # the key's string set overflows the domain bound, so the write can
    # touch any property and the analysis must refuse to guess
    src = '0: o = {}\n1: k = "a"\n2: k = concat(k, k)\n3: o[k] = 1\n4: if true 2\n'
    p = parse_program(src)
    d = KSetDomain(k=1)
    iv = initial_views(p, d, {})
    with pytest.raises(NonEnumerableKeyError):
        analyze_abstract(p, iv, AnalysisSettings(d))


# -- plumbing -------------------------------------------------------------------

def test_view_transition_edges():
    p = parse_program(DIAMOND)
    s = AbstractState.entry(SIGN, {"x": sv(-1, 0, 1)})
    settings = AnalysisSettings(SIGN)
    then_st = view_transition(p, 0, 3, s, settings)
    else_st = view_transition(p, 0, 1, s, settings)
    assert set(then_st.memory[AVarLoc(TOP_SITE, "x")].prims.ints) == {"0", "+"}
    assert set(else_st.memory[AVarLoc(TOP_SITE, "x")].prims.ints) == {"-"}
    assert view_transition(p, 0, 5, s, settings) is NO_EDGE


def test_empty_initial_views_rejected():
    p = parse_program(DIAMOND)
    with pytest.raises(ValueError):
        analyze_abstract(p, {}, AnalysisSettings(SIGN))


def test_iteration_cap_raises():
    p = parse_program("0: i = 0\n1: i = add(i, 1)\n2: if lt(i, 3) 1\n3: ret i\n")
    iv = initial_views(p, KSET, {})
    with pytest.raises(IterationCapExceededError):
        analyze_abstract(p, iv, AnalysisSettings(KSET, max_iterations=1))


def test_views_json_round_trip():
    p, r = analyze(DIAMOND, SIGN, {"x": sv(-1, 0, 1)})
    blob = views_to_json(r.views)
    assert set(blob) == {"0", "1", "2", "3", "4", "5"}
    assert views_from_json(SIGN, blob) == r.views


def test_fixpoint_height_bound_is_generous():
    p = parse_program(DIAMOND)
    _, r = analyze(DIAMOND, SIGN, {"x": sv(-1, 0, 1)})
    assert fixpoint_height_bound(p, SIGN) >= r.iterations
