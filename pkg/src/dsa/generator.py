"""Seeded program generation for stress-testing the analyses.

The programs are closed over a small discipline that keeps every run
meaningful: integer variables are introduced before use and never only
on one side of a branch, branches jump strictly forward, property keys
are written before they are read, and function bodies sit after the main
return and touch nothing but their parameter and own locals.  Under
those rules a generated program cannot get stuck or loop, so concrete
runs always halt and make good soundness fodder, while branches, calls,
objects, and mixed abstract inputs still exercise the interesting paths.
"""
from __future__ import annotations

import random

from .analysis import ViewMap, initial_views
from .domain import AbstractValue, PrimitiveDomain, SignDomain, join_value, value_from_primitive
from .lang import (
    Assign,
    Branch,
    Call,
    Expr,
    Instruction,
    Int,
    Lambda,
    NewObject,
    Op,
    Prim,
    Program,
    PropAccess,
    Ref,
    Return,
    Str,
    Var,
    format_program,
    parse_program,
    validate,
)

_ARITH = ("add", "sub", "mul", "neg")
_CMP = ("lt", "le", "gt", "ge", "eq")


def _var(name: str) -> Ref:
    return Ref(Var(name))


def generate_program(
    seed: int,
    max_lines: int = 20,
    max_calls: int = 2,
    use_objects: bool = True,
    domain: PrimitiveDomain | None = None,
    concrete_initial: bool = False,
    straight_line: bool = False,
) -> tuple[Program, ViewMap]:
    """A deterministic program for `seed`, with entry views to analyze it
    from.  Entry bindings are small integer shapes chosen so that the
    checking harness can enumerate them within its default caps;
    `concrete_initial` pins each input to one exact value instead."""
    if domain is None:
        domain = SignDomain()
    rng = random.Random(seed)
    nvars = rng.randint(1, 3)
    inputs = ["x", "y", "z"][:nvars]

    if straight_line:
        lines = _straight_line(rng, max_lines, inputs)
    else:
        lines = _structured(rng, max_lines, max_calls, use_objects, inputs)

    program = Program(tuple(enumerate(lines)))
    reparsed = parse_program(format_program(program))
    assert reparsed == program, "generated program does not round-trip"
    errors = [d for d in validate(program) if not d.warning]
    assert not errors, f"generated program does not validate: {errors}"

    bindings = _entry_bindings(rng, domain, inputs, concrete_initial)
    return program, initial_views(program, domain, bindings)


def _entry_bindings(
    rng: random.Random,
    domain: PrimitiveDomain,
    inputs: list[str],
    concrete_initial: bool,
) -> dict[str, AbstractValue]:
    bindings: dict[str, AbstractValue] = {}
    for name in inputs:
        picks = 1 if (concrete_initial or len(inputs) == 3) else rng.randint(1, 2)
        values = [value_from_primitive(domain, Int(rng.randint(-2, 2))) for _ in range(picks)]
        v = values[0]
        for other in values[1:]:
            v = join_value(v, other)
        bindings[name] = v
    return bindings


def _straight_line(rng: random.Random, n_lines: int, inputs: list[str]) -> list[Instruction]:
    assert n_lines >= 2
    defined = list(inputs)
    lines: list[Instruction] = []
    pool = [f"v{i}" for i in range(4)]
    for _ in range(n_lines - 1):
        # Build the expression before picking the target: a freshly
        # introduced target must not appear as one of its own operands.
        expr = _int_expr(rng, defined)
        lines.append(Assign(Var(_pick_target(rng, defined, pool, allow_new=True)), expr))
    lines.append(Return(_var(rng.choice(defined))))
    return lines


def _int_expr(rng: random.Random, defined: list[str]) -> Expr:
    def operand() -> Expr:
        if rng.random() < 0.3:
            return Prim(Int(rng.randint(-2, 2)))
        return _var(rng.choice(defined))

    op = rng.choice(_ARITH)
    if op == "neg":
        return Op("neg", (operand(),))
    return Op(op, (operand(), operand()))


def _pick_target(rng: random.Random, defined: list[str], pool: list[str], allow_new: bool) -> str:
    fresh = [v for v in pool if v not in defined]
    if allow_new and fresh and rng.random() < 0.4:
        name = fresh[0]
        defined.append(name)
        return name
    return rng.choice(defined)


def _structured(
    rng: random.Random,
    max_lines: int,
    max_calls: int,
    use_objects: bool,
    inputs: list[str],
) -> list[Instruction]:
    n_fun = rng.randint(0, max_calls)
    body_lens = [rng.randint(2, 3) for _ in range(n_fun)]
    while n_fun and max_lines - sum(body_lens) < n_fun + 3:
        n_fun -= 1
        body_lens.pop()
    main_len = max_lines - sum(body_lens)
    body_starts = []
    at = main_len
    for ln in body_lens:
        body_starts.append(at)
        at += ln

    ints = list(inputs)  # integer variables, defined on every path
    objs: list[str] = []  # object variables
    keys: dict[str, list[str]] = {}  # object -> keys written on every path
    funs = [f"f{i}" for i in range(n_fun)]
    pool = [f"v{i}" for i in range(4)]
    calls_left = max_calls

    lines: list[Instruction] = []
    for i, f in enumerate(funs):
        lines.append(Assign(Var(f), Lambda("p", body_starts[i])))

    restrict_until = 0  # below this label, a forward branch may skip us

    def may_introduce(label: int) -> bool:
        return label >= restrict_until

    label = len(lines)
    ret_label = main_len - 1
    while label < ret_label:
        slots_left = ret_label - label
        choices = ["op", "op", "op"]
        if funs and calls_left > 0:
            choices.append("call")
        if use_objects and may_introduce(label) and len(objs) < 2:
            choices.append("new")
        if objs:
            choices.append("propwrite")
        if any(keys.get(o) for o in objs):
            choices.append("propread")
        if slots_left >= 3:
            choices.append("branch")
            choices.append("branch")
        kind = rng.choice(choices)
        if kind == "op":
            expr = _int_expr(rng, ints)  # operands drawn before the target exists
            target = _pick_target(rng, ints, pool, allow_new=may_introduce(label))
            lines.append(Assign(Var(target), expr))
        elif kind == "call":
            calls_left -= 1
            callee = _var(rng.choice(funs))
            arg = _int_expr(rng, ints)
            target = _pick_target(rng, ints, pool, allow_new=may_introduce(label))
            lines.append(Call(Var(target), callee, arg))
        elif kind == "new":
            name = f"o{len(objs)}"
            objs.append(name)
            keys[name] = []
            lines.append(NewObject(Var(name)))
        elif kind == "propwrite":
            obj = rng.choice(objs)
            registered = keys[obj]
            if may_introduce(label) and len(registered) < 3 and (not registered or rng.random() < 0.6):
                key = f"k{len(registered)}"
                registered.append(key)
            elif registered:
                key = rng.choice(registered)
            else:
                key = "k0"  # this write may be skipped, so the key stays unreadable
            lines.append(Assign(PropAccess(_var(obj), Prim(Str(key))), _int_expr(rng, ints)))
        elif kind == "propread":
            obj = rng.choice([o for o in objs if keys.get(o)])
            key = rng.choice(keys[obj])
            target = _pick_target(rng, ints, pool, allow_new=may_introduce(label))
            lines.append(Assign(Var(target), Ref(PropAccess(_var(obj), Prim(Str(key))))))
        else:  # branch
            target_label = rng.randint(label + 2, ret_label)
            restrict_until = max(restrict_until, target_label)
            cond = Op(rng.choice(_CMP), (_var(rng.choice(ints)), Prim(Int(rng.randint(-2, 2)))))
            lines.append(Branch(cond, target_label))
        label = len(lines)

    lines.append(Return(_var(rng.choice(ints))))

    for blen in body_lens:
        locals_: list[str] = ["p"]
        body_pool = [f"t{i}" for i in range(3)]
        for _ in range(blen - 1):
            expr = _int_expr(rng, locals_)
            lines.append(Assign(Var(_pick_target(rng, locals_, body_pool, allow_new=True)), expr))
        lines.append(Return(_var(rng.choice(locals_))))
    return lines
