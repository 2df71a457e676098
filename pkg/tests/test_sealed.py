"""Concrete stepping with opaque placeholders."""
from __future__ import annotations

import pytest

from dsa.concrete import (
    TOP_SITE,
    Addr,
    Bool,
    Closure,
    ConcreteState,
    CtxEntry,
    Int,
    Next,
    Str,
    UNDEF,
    VarLoc,
    concrete_step,
)
from dsa.domain import KSetDomain, NonEnumerable, SignDomain, value_from_primitive
from dsa.lang import parse_program
from dsa.sealed import (
    Bot,
    Budgets,
    SNext,
    SealedState,
    SealedValue,
    UnboundSymbolError,
    gamma_imap,
    instantiate,
    placeholders_of,
    run_sealed,
    sealed_step,
    state_key,
)

ENV = Addr("env", TOP_SITE, 0)
W0 = SealedValue(0)
W1 = SealedValue(1)


def state(program_or_label, **bindings) -> SealedState:
    label = program_or_label if isinstance(program_or_label, int) else 0
    memory = {VarLoc(ENV, k): v for k, v in bindings.items()}
    return SealedState(label=label, memory=memory, context={}, env=ENV)


# -- placeholders flow through moves ------------------------------------------

def test_assign_copies_a_placeholder():
    p = parse_program("0: y = x\n1: ret y\n")
    r = sealed_step(p, state(0, x=W0))
    assert isinstance(r, SNext)
    assert r.state.memory[VarLoc(ENV, "y")] is W0
    assert r.state.label == 1


def test_branch_on_literal_ignores_placeholders_in_memory():
    p = parse_program("0: if true 2\n1: ret x\n2: ret x\n")
    r = sealed_step(p, state(0, x=W0))
    assert isinstance(r, SNext) and r.state.label == 2


def test_call_passes_placeholder_argument_opaquely():
    p = parse_program("0: r = f(x)\n1: ret r\n2: t = p\n3: ret t\n")
    st = state(0, x=W0, f=Closure("p", 2))
    r = sealed_step(p, st)
    assert isinstance(r, SNext)
    assert r.state.label == 2
    assert r.state.memory[VarLoc(r.state.env, "p")] is W0
    assert isinstance(r.state.context[r.state.env], CtxEntry)


def test_property_write_of_placeholder_value():
    p = parse_program('0: o = {}\n1: o["k"] = x\n2: ret 0\n')
    r1 = sealed_step(p, state(0, x=W0))
    r2 = sealed_step(p, r1.state)
    assert isinstance(r2, SNext)
    from dsa.concrete import PropLoc

    locs = [l for l in r2.state.memory if isinstance(l, PropLoc)]
    assert len(locs) == 1 and r2.state.memory[locs[0]] is W0


# -- placeholder accesses stop the run -----------------------------------------

@pytest.mark.parametrize(
    "src,bindings",
    [
        ("0: y = add(x, 1)\n1: ret y\n", dict(x=W0)),            # operator operand
        ("0: if x 1\n1: ret x\n", dict(x=W0)),                   # branch condition
        ('0: y = x["k"]\n1: ret y\n', dict(x=W0)),               # property base
        ('0: o[x] = 1\n1: ret o\n', dict(x=W0, o=Addr("obj", 9, 1))),  # property key
        ("0: r = x(1)\n1: ret r\n", dict(x=W0)),                 # callee
    ],
)
def test_access_positions_stop(src, bindings):
    p = parse_program(src)
    r = sealed_step(p, state(0, **bindings))
    assert isinstance(r, Bot)
    assert r.reason.kind == "sealed_access"
    assert r.reason.placeholder == W0


def test_nested_operand_access_stops_too():
    p = parse_program("0: y = add(1, mul(2, x))\n1: ret y\n")
    r = sealed_step(p, state(0, x=W0))
    assert isinstance(r, Bot) and r.reason.kind == "sealed_access"


# -- returns ---------------------------------------------------------------------

def test_return_at_top_level_halts_with_value():
    p = parse_program("0: ret x\n")
    r = sealed_step(p, state(0, x=Int(3)))
    assert isinstance(r, Bot)
    assert r.reason.kind == "halt"
    assert r.reason.value == Int(3)


def test_return_can_hand_back_a_placeholder():
    p = parse_program("0: ret x\n")
    r = sealed_step(p, state(0, x=W0))
    assert isinstance(r, Bot)
    assert r.reason.kind == "halt"
    assert r.reason.value is W0


def test_return_through_concrete_frame_restores_caller():
    p = parse_program("0: f = fun(y)@3\n1: r = f(5)\n2: ret r\n3: y = add(y, 1)\n4: ret y\n")
    st = state(0)
    for _ in range(4):  # lambda, call, add, ret-from-body
        r = sealed_step(p, st)
        assert isinstance(r, SNext), r
        st = r.state
    assert st.label == 2
    assert st.env == ENV
    assert st.memory[VarLoc(ENV, "r")] == Int(6)


def test_return_through_sealed_frame_stops():
    p = parse_program("0: f = fun(y)@3\n1: r = f(5)\n2: ret r\n3: y = add(y, 1)\n4: ret y\n")
    body_env = Addr("env", 3, 1)
    st = SealedState(
        label=4,
        memory={VarLoc(body_env, "y"): Int(6)},
        context={body_env: W1},
        env=body_env,
    )
    r = sealed_step(p, st)
    assert isinstance(r, Bot)
    assert r.reason.kind == "sealed_return"


def test_stuck_on_type_error():
    p = parse_program("0: y = add(x, 1)\n1: ret y\n")
    r = sealed_step(p, state(0, x=Str("nope")))
    assert isinstance(r, Bot)
    assert r.reason.kind == "stuck"


# -- allocation bookkeeping -------------------------------------------------------

def test_allocations_bump_the_site_counter():
    from dsa.domain import Count

    p = parse_program("0: a = {}\n1: b = {}\n2: ret 0\n")
    st = state(0)
    r1 = sealed_step(p, st)
    assert r1.state.counter.get(0) == Count.ONE
    r2 = sealed_step(p, r1.state)
    assert r2.state.counter.get(0) == Count.ONE
    assert r2.state.counter.get(1) == Count.ONE
    a = r2.state.memory[VarLoc(ENV, "a")]
    b = r2.state.memory[VarLoc(ENV, "b")]
    assert isinstance(a, Addr) and isinstance(b, Addr) and a != b


def test_call_counts_the_body_environment_site():
    from dsa.domain import Count

    p = parse_program("0: r = f(1)\n1: ret r\n2: ret p\n")
    st = state(0, f=Closure("p", 2))
    r = sealed_step(p, st)
    assert r.state.counter.get(2) == Count.ONE


# -- whole runs --------------------------------------------------------------------

def test_run_without_placeholders_matches_concrete_run():
    p = parse_program("0: i = 0\n1: i = add(i, 2)\n2: if lt(i, 6) 1\n3: ret i\n")
    res = run_sealed(p, state(0))
    assert res.terminal is not None and res.terminal.kind == "halt"
    assert res.terminal.value == Int(6)
    # every intermediate state agrees with the concrete machine
    c = ConcreteState(0, {}, {}, ENV)
    for st in res.trace[:-1]:
        step = concrete_step(p, instantiate(st, {}))
        assert isinstance(step, Next)


def test_run_stops_at_first_access():
    p = parse_program("0: y = x\n1: z = y\n2: t = add(z, 1)\n3: ret t\n")
    res = run_sealed(p, state(0, x=W0))
    assert [s.label for s in res.trace] == [0, 1, 2]
    assert res.terminal.kind == "sealed_access"
    assert res.steps == 2


def test_self_loop_is_reported_as_budget_exhaustion_immediately():
    p = parse_program("0: if true 0\n")
    res = run_sealed(p, state(0), Budgets(max_steps=10_000))
    assert res.budget_exceeded
    assert res.terminal is None
    assert res.steps == 1  # the revisit proves non-termination; no grinding


def test_two_state_loop_detected():
    p = parse_program("0: x = 1\n1: if true 0\n")
    res = run_sealed(p, state(0), Budgets(max_steps=10_000))
    assert res.budget_exceeded
    assert res.steps <= 4


def test_step_budget_respected_when_states_keep_changing():
    p = parse_program("0: i = 0\n1: i = add(i, 1)\n2: if true 1\n")
    res = run_sealed(p, state(0), Budgets(max_steps=30))
    assert res.budget_exceeded
    assert res.steps == 30


def test_run_result_json_shape():
    p = parse_program("0: y = x\n1: t = add(y, 1)\n2: ret t\n")
    res = run_sealed(p, state(0, x=W0))
    blob = res.to_json()
    assert blob["start_label"] == 0 and blob["end_label"] == 1
    assert blob["terminal"] == "sealed_access"
    assert blob["placeholders"] == [0]


# -- instantiation ------------------------------------------------------------------

def test_instantiate_substitutes_everywhere():
    body_env = Addr("env", 3, 1)
    st = SealedState(
        label=4,
        memory={VarLoc(body_env, "y"): W0, VarLoc(ENV, "x"): Int(1)},
        context={body_env: W1},
        env=body_env,
        next_seq=7,
    )
    c = instantiate(st, {W0: Int(5), W1: Str("junk")})
    assert c.memory[VarLoc(body_env, "y")] == Int(5)
    assert c.memory[VarLoc(ENV, "x")] == Int(1)
    assert c.context[body_env] == Str("junk")
    assert c.next_seq == 7


def test_instantiate_requires_bindings_for_all_placeholders():
    st = state(0, x=W0)
    with pytest.raises(UnboundSymbolError):
        instantiate(st, {})


def test_placeholders_of_orders_by_id():
    st = state(0, b=W1, a=W0)
    assert placeholders_of(st) == [W0, W1]


def test_state_key_ignores_allocation_sequence():
    a = state(0, x=Int(1))
    b = state(0, x=Int(1))
    b.next_seq = 99
    assert state_key(a) == state_key(b)
    assert a == b


# -- enumerating instantiation maps ---------------------------------------------------

def test_gamma_imap_product():
    k = KSetDomain()
    imap = {
        W0: value_from_primitive(k, Int(1)),
        W1: value_from_primitive(k, Bool(True)),
    }
    from dsa.domain import join_value

    imap[W0] = join_value(imap[W0], value_from_primitive(k, Int(2)))
    maps = gamma_imap(imap)
    assert {(m[W0].value, m[W1].value) for m in maps} == {(1, True), (2, True)}


def test_gamma_imap_caps_unbounded_sign_components():
    s = SignDomain()
    imap = {W0: value_from_primitive(s, Int(3))}  # sign {+}: infinitely many ints
    maps = gamma_imap(imap, int_cap=4)
    assert [m[W0].value for m in maps] == [1, 2, 3, 4]


def test_gamma_imap_overflow_is_non_enumerable():
    k = KSetDomain(k=4)
    from dsa.domain import join_value

    v = value_from_primitive(k, Int(0))
    for n in (1, 2, 3):
        v = join_value(v, value_from_primitive(k, Int(n)))
    imap = {W0: v, W1: v, SealedValue(2): v, SealedValue(3): v}  # 4^4 = 256 > 64
    assert isinstance(gamma_imap(imap, max_maps=64), NonEnumerable)


def test_gamma_imap_top_component_is_non_enumerable():
    k = KSetDomain(k=1)
    from dsa.domain import join_value

    v = join_value(value_from_primitive(k, Int(0)), value_from_primitive(k, Int(1)))
    assert isinstance(gamma_imap({W0: v}), NonEnumerable)


def test_empty_imap_has_exactly_the_empty_map():
    assert gamma_imap({}) == [{}]
