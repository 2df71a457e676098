"""Abstract value and state domains.

A primitive domain abstracts one primitive value per type component:
integers, strings, booleans, undef.  Two implementations:

* ``SignDomain``: integers by sign ({-, 0, +} subsets), strings and
  booleans as small exact sets (strings go to top past a bound).
* ``KSetDomain``: every type as a set of at most k concrete values,
  with a per-type top once the bound is exceeded.

An abstract value adds allocation sites (object addresses collapse to
the label that allocated them) and closures.  Join and order are
componentwise.  Lattice laws, exact operator tables, and the counting
discipline for strong updates all live here; soundness of each table is
established by enumeration in the test suite rather than trusted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

from .concrete import Addr, Closure, ConcreteValue, TOP_SITE
from .lang import Bool, Int, Primitive, Str, UNDEF, Undef

TOP = None  # marker for "all values of this type": a set field set to None

_SIGNS = ("-", "0", "+")


def sign_of(n: int) -> str:
    return "-" if n < 0 else ("0" if n == 0 else "+")


@dataclass(frozen=True)
class PrimElem:
    """One element of a primitive domain.  ``ints`` is a frozenset of sign
    tags (sign domain) or of concrete ints (k-set domain); ``ints`` and
    ``strs`` may be TOP (None) where the domain allows it."""

    ints: frozenset | None
    strs: frozenset | None
    bools: frozenset
    undef: bool

    def key(self) -> tuple:
        ints = "top" if self.ints is TOP else tuple(sorted(self.ints, key=repr))
        strs = "top" if self.strs is TOP else tuple(sorted(self.strs))
        return (ints, strs, tuple(sorted(self.bools)), self.undef)


class DomainMismatchError(Exception):
    pass


class EnvMismatchError(Exception):
    pass


@dataclass(frozen=True)
class GammaResult:
    values: tuple[ConcreteValue, ...]
    exhaustive: bool


@dataclass(frozen=True)
class NonEnumerable:
    reason: str


# ---------------------------------------------------------------------------
# sign arithmetic tables
#
# Exact by case analysis on the sign categories; the tests re-derive every
# entry by enumerating small representatives.

def _sym(table: dict) -> dict:
    out = dict(table)
    for (a, b), r in table.items():
        out.setdefault((b, a), r)
    return out


_SIGN_ADD = _sym({
    ("-", "-"): frozenset({"-"}),
    ("-", "0"): frozenset({"-"}),
    ("-", "+"): frozenset({"-", "0", "+"}),
    ("0", "0"): frozenset({"0"}),
    ("0", "+"): frozenset({"+"}),
    ("+", "+"): frozenset({"+"}),
})

_SIGN_MUL = _sym({
    ("-", "-"): frozenset({"+"}),
    ("-", "0"): frozenset({"0"}),
    ("-", "+"): frozenset({"-"}),
    ("0", "0"): frozenset({"0"}),
    ("0", "+"): frozenset({"0"}),
    ("+", "+"): frozenset({"+"}),
})

_SIGN_NEG = {"-": "+", "0": "0", "+": "-"}

# possible orderings of (x, y) for x in the first category, y in the second
_SIGN_ORDS = {
    ("-", "-"): frozenset({"<", "=", ">"}),
    ("-", "0"): frozenset({"<"}),
    ("-", "+"): frozenset({"<"}),
    ("0", "-"): frozenset({">"}),
    ("0", "0"): frozenset({"="}),
    ("0", "+"): frozenset({"<"}),
    ("+", "-"): frozenset({">"}),
    ("+", "0"): frozenset({">"}),
    ("+", "+"): frozenset({"<", "=", ">"}),
}

_CMP_TRUE_ORDS = {
    "lt": frozenset({"<"}),
    "le": frozenset({"<", "="}),
    "gt": frozenset({">"}),
    "ge": frozenset({">", "="}),
    "eq": frozenset({"="}),
}

# sign category ranges for refinement against an integer literal
_SIGN_RANGE = {"-": (None, -1), "0": (0, 0), "+": (1, None)}


def _range_can(cat: str, op: str, c: int) -> bool:
    """Can some v in the category satisfy `v op c`?"""
    lo, hi = _SIGN_RANGE[cat]
    if op == "lt":
        return lo is None or lo < c
    if op == "le":
        return lo is None or lo <= c
    if op == "gt":
        return hi is None or hi > c
    if op == "ge":
        return hi is None or hi >= c
    if op == "eq":
        return (lo is None or lo <= c) and (hi is None or hi >= c)
    if op == "ne":
        if lo is None or hi is None:
            return True
        return not (lo == hi == c)
    raise ValueError(op)


_CMP_NEGATION = {"lt": "ge", "le": "gt", "gt": "le", "ge": "lt", "eq": "ne"}


# ---------------------------------------------------------------------------
# domains

class PrimitiveDomain:
    """Shared string/boolean/undef handling; integer behavior in subclasses."""

    def _str_bound(self) -> int:
        raise NotImplementedError

    def bottom(self) -> PrimElem:
        return PrimElem(frozenset(), frozenset(), frozenset(), False)

    def is_bottom(self, e: PrimElem) -> bool:
        return e.ints == frozenset() and e.strs == frozenset() and not e.bools and not e.undef

    def from_primitive(self, p: Primitive) -> PrimElem:
        b = self.bottom()
        if isinstance(p, Int):
            return PrimElem(self._int_abstract(p.value), b.strs, b.bools, False)
        if isinstance(p, Str):
            return PrimElem(b.ints, frozenset({p.value}), b.bools, False)
        if isinstance(p, Bool):
            return PrimElem(b.ints, b.strs, frozenset({p.value}), False)
        if isinstance(p, Undef):
            return PrimElem(b.ints, b.strs, b.bools, True)
        raise TypeError(f"not a primitive: {p!r}")

    def _bound_strs(self, strs: frozenset | None) -> frozenset | None:
        if strs is TOP or len(strs) > self._str_bound():
            return TOP
        return strs

    def join(self, a: PrimElem, b: PrimElem) -> PrimElem:
        strs = TOP if (a.strs is TOP or b.strs is TOP) else self._bound_strs(a.strs | b.strs)
        return PrimElem(self._int_join(a.ints, b.ints), strs, a.bools | b.bools, a.undef or b.undef)

    def leq(self, a: PrimElem, b: PrimElem) -> bool:
        if not self._int_leq(a.ints, b.ints):
            return False
        if b.strs is not TOP and (a.strs is TOP or not a.strs <= b.strs):
            return False
        return a.bools <= b.bools and (not a.undef or b.undef)

    def contains(self, e: PrimElem, p: Primitive) -> bool:
        if isinstance(p, Int):
            return self._int_contains(e.ints, p.value)
        if isinstance(p, Str):
            return e.strs is TOP or p.value in e.strs
        if isinstance(p, Bool):
            return p.value in e.bools
        if isinstance(p, Undef):
            return e.undef
        return False

    def as_singleton(self, e: PrimElem) -> Primitive | None:
        """The unique concrete primitive this element denotes, if any."""
        found: list[Primitive] = []
        ints = self._int_enumerate_exact(e.ints)
        if ints is TOP:
            return None
        found.extend(Int(v) for v in ints)
        if e.strs is TOP:
            return None
        found.extend(Str(s) for s in sorted(e.strs))
        found.extend(Bool(v) for v in sorted(e.bools))
        if e.undef:
            found.append(UNDEF)
        if len(found) == 1:
            return found[0]
        return None

    def gamma(self, e: PrimElem, int_cap: int) -> GammaResult | NonEnumerable:
        values: list[Primitive] = []
        ints = self._int_gamma(e.ints, int_cap)
        if ints is TOP:
            return NonEnumerable("integer component is top")
        int_values, exhaustive = ints
        values.extend(Int(v) for v in int_values)
        if e.strs is TOP:
            return NonEnumerable("string component is top")
        values.extend(Str(s) for s in sorted(e.strs))
        values.extend(Bool(b) for b in sorted(e.bools))
        if e.undef:
            values.append(UNDEF)
        return GammaResult(tuple(values), exhaustive)

    # --- operator application on primitive parts ------------------------

    def apply_op(self, op: str, args: list[PrimElem], diags: list[str] | None = None) -> PrimElem:
        b = self.bottom()
        if op in ("add", "sub", "mul"):
            return PrimElem(self._int_arith(op, args[0].ints, args[1].ints), b.strs, b.bools, False)
        if op == "neg":
            return PrimElem(self._int_neg(args[0].ints), b.strs, b.bools, False)
        if op in ("lt", "le", "gt", "ge", "eq"):
            return PrimElem(b.ints, b.strs, self._int_cmp(op, args[0].ints, args[1].ints), False)
        if op == "not":
            return PrimElem(b.ints, b.strs, frozenset(not v for v in args[0].bools), False)
        if op in ("and", "or"):
            fn = (lambda x, y: x and y) if op == "and" else (lambda x, y: x or y)
            res = frozenset(fn(x, y) for x in args[0].bools for y in args[1].bools)
            return PrimElem(b.ints, b.strs, res, False)
        if op == "concat":
            if args[0].strs is TOP or args[1].strs is TOP:
                strs = TOP if (args[0].strs is TOP or args[0].strs) and (args[1].strs is TOP or args[1].strs) else frozenset()
            else:
                strs = self._bound_strs(frozenset(x + y for x in args[0].strs for y in args[1].strs))
            return PrimElem(b.ints, strs, b.bools, False)
        if op == "num2str":
            return PrimElem(b.ints, self._int_to_str(args[0].ints), b.bools, False)
        if op == "typeof":
            names: set[str] = set()
            if (args[0].ints is TOP) or args[0].ints:
                names.add("int")
            if args[0].strs is TOP or args[0].strs:
                names.add("string")
            if args[0].bools:
                names.add("bool")
            if args[0].undef:
                names.add("undef")
            return PrimElem(b.ints, self._bound_strs(frozenset(names)), b.bools, False)
        raise ValueError(f"unknown operator {op!r}")

    def refine_cmp(self, e: PrimElem, op: str, literal: int, keep_true: bool) -> PrimElem:
        """Narrow the integer component to values that can make
        `v op literal` evaluate to keep_true."""
        raise NotImplementedError

    def value_height(self) -> int:
        """Length bound for strictly ascending chains of elements."""
        raise NotImplementedError

    # --- integer hooks ---------------------------------------------------

    def _int_abstract(self, n: int) -> frozenset:
        raise NotImplementedError

    def _int_join(self, a, b):
        raise NotImplementedError

    def _int_leq(self, a, b) -> bool:
        raise NotImplementedError

    def _int_contains(self, a, n: int) -> bool:
        raise NotImplementedError

    def _int_enumerate_exact(self, a):
        """All concrete ints, or TOP when infinite/unbounded."""
        raise NotImplementedError

    def _int_gamma(self, a, cap: int):
        raise NotImplementedError

    def _int_arith(self, op: str, a, b):
        raise NotImplementedError

    def _int_neg(self, a):
        raise NotImplementedError

    def _int_cmp(self, op: str, a, b) -> frozenset:
        raise NotImplementedError

    def _int_to_str(self, a):
        raise NotImplementedError

    def prims_to_json(self, e: PrimElem) -> dict:
        raise NotImplementedError

    def prims_from_json(self, obj: dict) -> PrimElem:
        raise NotImplementedError

    def _json_strs(self, e: PrimElem) -> object:
        return "top" if e.strs is TOP else sorted(e.strs)

    def _strs_from_json(self, obj: object) -> frozenset | None:
        return TOP if obj == "top" else frozenset(obj)  # type: ignore[arg-type]


@dataclass(frozen=True)
class SignDomain(PrimitiveDomain):
    str_bound: int = 4

    def _str_bound(self) -> int:
        return self.str_bound

    def _int_abstract(self, n: int) -> frozenset:
        return frozenset({sign_of(n)})

    def _int_join(self, a: frozenset, b: frozenset) -> frozenset:
        return a | b

    def _int_leq(self, a: frozenset, b: frozenset) -> bool:
        return a <= b

    def _int_contains(self, a: frozenset, n: int) -> bool:
        return sign_of(n) in a

    def _int_enumerate_exact(self, a: frozenset):
        if not a:
            return []
        if a == frozenset({"0"}):
            return [0]
        return TOP

    def _int_gamma(self, a: frozenset, cap: int):
        values: list[int] = []
        exhaustive = True
        if "-" in a:
            values.extend(range(-cap, 0))
            exhaustive = False
        if "0" in a:
            values.append(0)
        if "+" in a:
            values.extend(range(1, cap + 1))
            exhaustive = False
        return (values, exhaustive)

    def _int_arith(self, op: str, a: frozenset, b: frozenset) -> frozenset:
        table = _SIGN_ADD if op == "add" else _SIGN_MUL if op == "mul" else None
        out: set[str] = set()
        for x in a:
            for y in b:
                if op == "sub":
                    out |= _SIGN_ADD[(x, _SIGN_NEG[y])]
                else:
                    out |= table[(x, y)]  # type: ignore[index]
        return frozenset(out)

    def _int_neg(self, a: frozenset) -> frozenset:
        return frozenset(_SIGN_NEG[x] for x in a)

    def _int_cmp(self, op: str, a: frozenset, b: frozenset) -> frozenset:
        true_ords = _CMP_TRUE_ORDS[op]
        out: set[bool] = set()
        for x in a:
            for y in b:
                ords = _SIGN_ORDS[(x, y)]
                if ords & true_ords:
                    out.add(True)
                if ords - true_ords:
                    out.add(False)
        return frozenset(out)

    def _int_to_str(self, a: frozenset) -> frozenset | None:
        if not a:
            return frozenset()
        if a == frozenset({"0"}):
            return frozenset({"0"})
        return TOP

    def refine_cmp(self, e: PrimElem, op: str, literal: int, keep_true: bool) -> PrimElem:
        test = op if keep_true else _CMP_NEGATION[op]
        kept = frozenset(s for s in e.ints if _range_can(s, test, literal))
        return PrimElem(kept, e.strs, e.bools, e.undef)

    def value_height(self) -> int:
        return 3 + (self.str_bound + 2) + 2 + 1

    def prims_to_json(self, e: PrimElem) -> dict:
        return {
            "sign": [s for s in _SIGNS if s in e.ints],
            "strs": self._json_strs(e),
            "bools": sorted(e.bools),
            "undef": e.undef,
        }

    def prims_from_json(self, obj: dict) -> PrimElem:
        return PrimElem(
            frozenset(obj.get("sign", [])),
            self._strs_from_json(obj.get("strs", [])),
            frozenset(obj.get("bools", [])),
            bool(obj.get("undef", False)),
        )


@dataclass(frozen=True)
class KSetDomain(PrimitiveDomain):
    k: int = 4

    def _str_bound(self) -> int:
        return self.k

    def _bound_ints(self, ints: frozenset | None) -> frozenset | None:
        if ints is TOP or len(ints) > self.k:
            return TOP
        return ints

    def _int_abstract(self, n: int) -> frozenset:
        return frozenset({n})

    def _int_join(self, a, b):
        if a is TOP or b is TOP:
            return TOP
        return self._bound_ints(a | b)

    def _int_leq(self, a, b) -> bool:
        if b is TOP:
            return True
        if a is TOP:
            return False
        return a <= b

    def _int_contains(self, a, n: int) -> bool:
        return a is TOP or n in a

    def _int_enumerate_exact(self, a):
        if a is TOP:
            return TOP
        return sorted(a)

    def _int_gamma(self, a, cap: int):
        if a is TOP:
            return TOP
        return (sorted(a), True)

    def _int_arith(self, op: str, a, b):
        if a is TOP or b is TOP:
            # empty x top is still empty: no concrete pair exists
            if a == frozenset() or b == frozenset():
                return frozenset()
            return TOP
        fn = {"add": lambda x, y: x + y, "sub": lambda x, y: x - y, "mul": lambda x, y: x * y}[op]
        return self._bound_ints(frozenset(fn(x, y) for x in a for y in b))

    def _int_neg(self, a):
        if a is TOP:
            return TOP
        return frozenset(-x for x in a)

    def _int_cmp(self, op: str, a, b) -> frozenset:
        if a is TOP or b is TOP:
            if a == frozenset() or b == frozenset():
                return frozenset()
            return frozenset({True, False})
        fn = {
            "lt": lambda x, y: x < y,
            "le": lambda x, y: x <= y,
            "gt": lambda x, y: x > y,
            "ge": lambda x, y: x >= y,
            "eq": lambda x, y: x == y,
        }[op]
        return frozenset(fn(x, y) for x in a for y in b)

    def _int_to_str(self, a):
        if a is TOP:
            return TOP
        return self._bound_strs(frozenset(str(x) for x in a))

    def refine_cmp(self, e: PrimElem, op: str, literal: int, keep_true: bool) -> PrimElem:
        if e.ints is TOP:
            return e
        fn = {
            "lt": lambda x: x < literal,
            "le": lambda x: x <= literal,
            "gt": lambda x: x > literal,
            "ge": lambda x: x >= literal,
            "eq": lambda x: x == literal,
        }[op]
        kept = frozenset(x for x in e.ints if fn(x) is keep_true)
        return PrimElem(kept, e.strs, e.bools, e.undef)

    def value_height(self) -> int:
        return (self.k + 2) * 2 + 2 + 1

    def prims_to_json(self, e: PrimElem) -> dict:
        return {
            "ints": "top" if e.ints is TOP else sorted(e.ints),
            "strs": self._json_strs(e),
            "bools": sorted(e.bools),
            "undef": e.undef,
        }

    def prims_from_json(self, obj: dict) -> PrimElem:
        ints = obj.get("ints", [])
        return PrimElem(
            TOP if ints == "top" else frozenset(ints),
            self._strs_from_json(obj.get("strs", [])),
            frozenset(obj.get("bools", [])),
            bool(obj.get("undef", False)),
        )


# ---------------------------------------------------------------------------
# abstract values

@dataclass(frozen=True)
class AbstractValue:
    domain: PrimitiveDomain
    prims: PrimElem
    addrs: frozenset[int] = frozenset()
    funcs: frozenset[Closure] = frozenset()

    def key(self) -> tuple:
        return (self.prims.key(), tuple(sorted(self.addrs)), tuple(sorted(self.funcs, key=lambda c: (c.param, c.body))))


def bottom_value(domain: PrimitiveDomain) -> AbstractValue:
    return AbstractValue(domain, domain.bottom())


def is_bottom_value(v: AbstractValue) -> bool:
    return v.domain.is_bottom(v.prims) and not v.addrs and not v.funcs


def value_from_primitive(domain: PrimitiveDomain, p: Primitive) -> AbstractValue:
    return AbstractValue(domain, domain.from_primitive(p))


def value_from_concrete(domain: PrimitiveDomain, v: ConcreteValue) -> AbstractValue:
    if isinstance(v, Addr):
        return AbstractValue(domain, domain.bottom(), addrs=frozenset({v.site}))
    if isinstance(v, Closure):
        return AbstractValue(domain, domain.bottom(), funcs=frozenset({v}))
    return value_from_primitive(domain, v)


def _check_domains(a: AbstractValue, b: AbstractValue) -> None:
    if a.domain != b.domain:
        raise DomainMismatchError(f"{a.domain!r} vs {b.domain!r}")


def join_value(a: AbstractValue, b: AbstractValue) -> AbstractValue:
    _check_domains(a, b)
    return AbstractValue(a.domain, a.domain.join(a.prims, b.prims), a.addrs | b.addrs, a.funcs | b.funcs)


def leq_value(a: AbstractValue, b: AbstractValue) -> bool:
    _check_domains(a, b)
    return a.domain.leq(a.prims, b.prims) and a.addrs <= b.addrs and a.funcs <= b.funcs


def value_singleton(v: AbstractValue, counter: dict[int, "Count"] | None = None) -> ConcreteValue | None:
    """The unique concrete value v denotes, if there is one.

    A lone allocation site whose counter is ONE denotes exactly one live
    address, materialized canonically with sequence number 0."""
    parts = 0
    prim = v.domain.as_singleton(v.prims)
    if not v.domain.is_bottom(v.prims):
        if prim is None:
            return None
        parts += 1
    if v.funcs:
        parts += len(v.funcs)
    if v.addrs:
        if counter is None:
            return None
        if len(v.addrs) != 1:
            return None
        (site,) = v.addrs
        if counter.get(site, Count.ZERO) != Count.ONE:
            return None
        parts += 1
    if parts != 1:
        return None
    if prim is not None:
        return prim
    if v.funcs:
        (c,) = v.funcs
        return c
    (site,) = v.addrs
    return Addr("obj", site, 0)


def value_contains(v: AbstractValue, concrete: ConcreteValue) -> bool:
    if isinstance(concrete, Addr):
        return concrete.site in v.addrs
    if isinstance(concrete, Closure):
        return concrete in v.funcs
    return v.domain.contains(v.prims, concrete)


def gamma_value(v: AbstractValue, int_cap: int = 8) -> GammaResult | NonEnumerable:
    """Concrete values denoted by v.  Sign categories are enumerated only
    within +/- int_cap and flagged non-exhaustive; allocation sites
    materialize as their canonical sequence-0 address."""
    prim = v.domain.gamma(v.prims, int_cap)
    if isinstance(prim, NonEnumerable):
        return prim
    values: list[ConcreteValue] = list(prim.values)
    exhaustive = prim.exhaustive
    for c in sorted(v.funcs, key=lambda c: (c.param, c.body)):
        values.append(c)
    for site in sorted(v.addrs):
        values.append(Addr("obj", site, 0))
        exhaustive = False
    return GammaResult(tuple(values), exhaustive)


# ---------------------------------------------------------------------------
# counters

class Count(IntEnum):
    ZERO = 0
    ONE = 1
    TWO_PLUS = 2

    def to_json(self) -> str:
        return {Count.ZERO: "0", Count.ONE: "1", Count.TWO_PLUS: "2+"}[self]

    @staticmethod
    def from_json(s: str) -> "Count":
        return {"0": Count.ZERO, "1": Count.ONE, "2+": Count.TWO_PLUS}[s]


def inc(counter: dict[int, Count], addr: int) -> dict[int, Count]:
    """Bump the allocation count at one site: 0 -> 1 -> 2+ -> 2+.
    Other sites are untouched."""
    new = dict(counter)
    cur = new.get(addr, Count.ZERO)
    new[addr] = Count.ONE if cur == Count.ZERO else Count.TWO_PLUS
    return new


def join_counter(a: dict[int, Count], b: dict[int, Count]) -> dict[int, Count]:
    out = dict(a)
    for site, c in b.items():
        out[site] = max(out.get(site, Count.ZERO), c)
    return {s: c for s, c in out.items() if c != Count.ZERO}


def leq_counter(a: dict[int, Count], b: dict[int, Count]) -> bool:
    return all(c <= b.get(site, Count.ZERO) for site, c in a.items())


# ---------------------------------------------------------------------------
# abstract locations, context, state

@dataclass(frozen=True)
class AVarLoc:
    addr: int
    name: str

    def sort_key(self) -> tuple:
        return (0, self.addr, self.name)


@dataclass(frozen=True)
class APropLoc:
    addr: int
    key: str

    def sort_key(self) -> tuple:
        return (1, self.addr, self.key)


ALoc = AVarLoc | APropLoc


@dataclass(frozen=True)
class ACtxEntry:
    ret_addr: int
    ret_label: int
    targets: frozenset[ALoc]

    def sort_key(self) -> tuple:
        return (self.ret_addr, self.ret_label, tuple(sorted(t.sort_key() for t in self.targets)))


@dataclass
class AbstractState:
    """One view's abstract state.  env is the abstract address of the
    current environment (TOP_SITE at top level) or None for bottom."""

    domain: PrimitiveDomain
    memory: dict[ALoc, AbstractValue] = field(default_factory=dict)
    context: dict[int, frozenset[ACtxEntry]] = field(default_factory=dict)
    env: int | None = None
    counter: dict[int, Count] = field(default_factory=dict)

    @property
    def is_bottom(self) -> bool:
        return self.env is None

    @classmethod
    def bottom(cls, domain: PrimitiveDomain) -> "AbstractState":
        return cls(domain)

    @classmethod
    def entry(cls, domain: PrimitiveDomain, bindings: dict[str, AbstractValue] | None = None) -> "AbstractState":
        memory = {AVarLoc(TOP_SITE, name): v for name, v in (bindings or {}).items()}
        return cls(domain, memory, {}, TOP_SITE, {TOP_SITE: Count.ONE})

    def copy(self) -> "AbstractState":
        return AbstractState(self.domain, dict(self.memory), dict(self.context), self.env, dict(self.counter))

    def normalized(self) -> "AbstractState":
        """Drop bottom bindings, empty context entries, zero counters.
        Concretization is unchanged."""
        if self.is_bottom:
            return AbstractState.bottom(self.domain)
        memory = {loc: v for loc, v in self.memory.items() if not is_bottom_value(v)}
        context = {a: es for a, es in self.context.items() if es}
        counter = {s: c for s, c in self.counter.items() if c != Count.ZERO}
        return AbstractState(self.domain, memory, context, self.env, counter)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AbstractState):
            return NotImplemented
        return (
            self.domain == other.domain
            and self.env == other.env
            and self.memory == other.memory
            and self.context == other.context
            and self.counter == other.counter
        )


def state_key(state: AbstractState) -> tuple:
    if state.is_bottom:
        return ("bottom",)
    mem = tuple(sorted(((loc.sort_key(), v.key()) for loc, v in state.memory.items())))
    ctx = tuple(sorted((a, tuple(sorted(e.sort_key() for e in es))) for a, es in state.context.items()))
    cnt = tuple(sorted(state.counter.items()))
    return (state.env, mem, ctx, cnt)


def join_state(a: AbstractState, b: AbstractState, diags: list[str] | None = None) -> AbstractState:
    """Componentwise join.  Joining states with different envs is reported:
    raised as EnvMismatchError without a diagnostics sink, otherwise noted
    there while the first env is kept and the rest accumulates."""
    if a.is_bottom:
        return b.normalized()
    if b.is_bottom:
        return a.normalized()
    if a.domain != b.domain:
        raise DomainMismatchError(f"{a.domain!r} vs {b.domain!r}")
    if a.env != b.env:
        if diags is None:
            raise EnvMismatchError(f"env {a.env} vs {b.env}")
        diags.append(f"env mismatch on join: kept {a.env}, dropped {b.env}")
    memory = dict(a.memory)
    for loc, v in b.memory.items():
        memory[loc] = join_value(memory[loc], v) if loc in memory else v
    context = dict(a.context)
    for addr, entries in b.context.items():
        context[addr] = context.get(addr, frozenset()) | entries
    return AbstractState(a.domain, memory, context, a.env, join_counter(a.counter, b.counter)).normalized()


def leq_state(a: AbstractState, b: AbstractState) -> bool:
    """Componentwise order.  States with different envs are incomparable."""
    if a.is_bottom:
        return True
    if b.is_bottom:
        return False
    if a.domain != b.domain:
        raise DomainMismatchError(f"{a.domain!r} vs {b.domain!r}")
    if a.env != b.env:
        return False
    for loc, v in a.memory.items():
        if is_bottom_value(v):
            continue
        other = b.memory.get(loc)
        if other is None or not leq_value(v, other):
            return False
    for addr, entries in a.context.items():
        if not entries <= b.context.get(addr, frozenset()):
            return False
    return leq_counter(a.counter, b.counter)


def mem_update(
    memory: dict[ALoc, AbstractValue],
    counter: dict[int, Count],
    targets: frozenset[ALoc],
    value: AbstractValue,
) -> dict[ALoc, AbstractValue]:
    """Write `value` to the target locations.  The update is strong
    (overwrite) only when there is exactly one target and its address has
    been allocated exactly once; otherwise each target keeps what it had,
    joined with the new value."""
    new = dict(memory)
    if len(targets) == 1:
        (t,) = targets
        if counter.get(t.addr, Count.ZERO) == Count.ONE:
            new[t] = value
            return new
    for t in targets:
        new[t] = join_value(new[t], value) if t in new else value
    return new


def abstract_apply_op(op: str, args: list[AbstractValue], diags: list[str] | None = None) -> AbstractValue:
    """Lift an operator over abstract values.  Only primitive components
    take part, except typeof which also sees sites and closures;
    non-primitive operands elsewhere contribute nothing and are flagged."""
    domain = args[0].domain
    prims = domain.apply_op(op, [a.prims for a in args], diags)
    if op == "typeof":
        extra: set[str] = set()
        if args[0].addrs:
            extra.add("object")
        if args[0].funcs:
            extra.add("function")
        if extra:
            strs = prims.strs
            strs = TOP if strs is TOP else domain._bound_strs(strs | frozenset(extra))
            prims = PrimElem(prims.ints, strs, prims.bools, prims.undef)
    elif diags is not None and any(a.addrs or a.funcs for a in args):
        diags.append(f"{op}: non-primitive operand ignored")
    return AbstractValue(domain, prims)


# ---------------------------------------------------------------------------
# JSON encoding

def value_to_json(v: AbstractValue) -> dict:
    return {
        "prims": v.domain.prims_to_json(v.prims),
        "addrs": sorted(v.addrs),
        "funcs": [{"param": c.param, "body": c.body} for c in sorted(v.funcs, key=lambda c: (c.param, c.body))],
    }


def value_from_json(domain: PrimitiveDomain, obj: dict) -> AbstractValue:
    return AbstractValue(
        domain,
        domain.prims_from_json(obj.get("prims", {})),
        frozenset(obj.get("addrs", [])),
        frozenset(Closure(f["param"], f["body"]) for f in obj.get("funcs", [])),
    )


def _loc_to_json(loc: ALoc) -> dict:
    if isinstance(loc, AVarLoc):
        return {"kind": "var", "addr": loc.addr, "name": loc.name}
    return {"kind": "prop", "addr": loc.addr, "key": loc.key}


def _loc_from_json(obj: dict) -> ALoc:
    if obj["kind"] == "var":
        return AVarLoc(obj["addr"], obj["name"])
    return APropLoc(obj["addr"], obj["key"])


def state_to_json(state: AbstractState) -> dict | None:
    if state.is_bottom:
        return None
    memory = [
        {**_loc_to_json(loc), "value": value_to_json(v)}
        for loc, v in sorted(state.memory.items(), key=lambda kv: kv[0].sort_key())
    ]
    context = [
        {
            "addr": addr,
            "entries": [
                {
                    "ret_addr": e.ret_addr,
                    "ret_label": e.ret_label,
                    "targets": [_loc_to_json(t) for t in sorted(e.targets, key=lambda t: t.sort_key())],
                }
                for e in sorted(entries, key=lambda e: e.sort_key())
            ],
        }
        for addr, entries in sorted(state.context.items())
    ]
    counter = {str(site): c.to_json() for site, c in sorted(state.counter.items())}
    return {"env": state.env, "memory": memory, "context": context, "counter": counter}


def state_from_json(domain: PrimitiveDomain, obj: dict | None) -> AbstractState:
    if obj is None:
        return AbstractState.bottom(domain)
    memory = {_loc_from_json(m): value_from_json(domain, m["value"]) for m in obj.get("memory", [])}
    context = {
        c["addr"]: frozenset(
            ACtxEntry(e["ret_addr"], e["ret_label"], frozenset(_loc_from_json(t) for t in e["targets"]))
            for e in c["entries"]
        )
        for c in obj.get("context", [])
    }
    counter = {int(site): Count.from_json(c) for site, c in obj.get("counter", {}).items()}
    return AbstractState(domain, memory, context, obj["env"], counter)
