"""Core language: syntax tree, parser, printer, validator.

Programs are flat lists of labeled instructions.  Labels are explicit
non-negative integers, unique and strictly increasing in source order;
control flow falls through to the next line unless an instruction says
otherwise.  An unconditional jump is written as a branch on ``true``.

Text form, one instruction per line, ``#`` starts a comment::

    0: x = neg(y)
    1: o = {}
    2: o["p"] = x
    3: f = fun(a)@6
    4: r = f(3)
    5: ret r
    6: ret add(a, 1)
"""
from __future__ import annotations

from dataclasses import dataclass, field

Label = int


# ---------------------------------------------------------------------------
# primitives

@dataclass(frozen=True)
class Int:
    value: int


@dataclass(frozen=True)
class Str:
    value: str


@dataclass(frozen=True)
class Bool:
    value: bool


@dataclass(frozen=True)
class Undef:
    pass


UNDEF = Undef()
Primitive = Int | Str | Bool | Undef


# ---------------------------------------------------------------------------
# expressions and references

@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class PropAccess:
    obj: "Expr"
    key: "Expr"


Reference = Var | PropAccess


@dataclass(frozen=True)
class Prim:
    value: Primitive


@dataclass(frozen=True)
class Lambda:
    param: str
    body: Label


@dataclass(frozen=True)
class Ref:
    ref: Reference


@dataclass(frozen=True)
class Op:
    name: str
    args: tuple["Expr", ...]


Expr = Prim | Lambda | Ref | Op


# ---------------------------------------------------------------------------
# instructions

@dataclass(frozen=True)
class Assign:
    target: Reference
    source: Expr


@dataclass(frozen=True)
class NewObject:
    target: Reference


@dataclass(frozen=True)
class Call:
    target: Reference
    callee: Expr
    arg: Expr


@dataclass(frozen=True)
class Return:
    value: Expr


@dataclass(frozen=True)
class Branch:
    cond: Expr
    then_label: Label


Instruction = Assign | NewObject | Call | Return | Branch


# ---------------------------------------------------------------------------
# operator table: name -> (arity, argument types, result type)
# types: "int" | "str" | "bool" | "any"

OP_TABLE: dict[str, tuple[tuple[str, ...], str]] = {
    "add": (("int", "int"), "int"),
    "sub": (("int", "int"), "int"),
    "mul": (("int", "int"), "int"),
    "neg": (("int",), "int"),
    "lt": (("int", "int"), "bool"),
    "le": (("int", "int"), "bool"),
    "gt": (("int", "int"), "bool"),
    "ge": (("int", "int"), "bool"),
    "eq": (("int", "int"), "bool"),
    "not": (("bool",), "bool"),
    "and": (("bool", "bool"), "bool"),
    "or": (("bool", "bool"), "bool"),
    "concat": (("str", "str"), "str"),
    "num2str": (("int",), "str"),
    "typeof": (("any",), "str"),
}


# ---------------------------------------------------------------------------
# program

@dataclass(frozen=True)
class Program:
    lines: tuple[tuple[Label, Instruction], ...]
    _index: dict = field(default_factory=dict, compare=False, repr=False)
    _next: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        index: dict[Label, Instruction] = {}
        nxt: dict[Label, Label | None] = {}
        for i, (label, instr) in enumerate(self.lines):
            index[label] = instr
            if i + 1 < len(self.lines):
                nxt[label] = self.lines[i + 1][0]
            else:
                nxt[label] = None
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_next", nxt)

    @property
    def entry(self) -> Label:
        return self.lines[0][0]

    @property
    def labels(self) -> tuple[Label, ...]:
        return tuple(l for l, _ in self.lines)

    def instruction_at(self, label: Label) -> Instruction:
        try:
            return self._index[label]
        except KeyError:
            raise UnknownLabelError(label) from None

    def has_label(self, label: Label) -> bool:
        return label in self._index


# ---------------------------------------------------------------------------
# errors and diagnostics

class LangError(Exception):
    pass


class ParseError(LangError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class DuplicateLabelError(ParseError):
    pass


class DanglingLabelError(ParseError):
    pass


class UnknownLabelError(LangError):
    def __init__(self, label: Label):
        super().__init__(f"no such label: {label}")
        self.label = label


@dataclass(frozen=True)
class Diagnostic:
    label: Label
    code: str
    message: str
    warning: bool = False


# ---------------------------------------------------------------------------
# lexer

_KEYWORDS = {"ret", "if", "true", "false", "undef", "fun"}
_PUNCT = {":", "=", "(", ")", "[", "]", "{", "}", ",", "@"}


@dataclass(frozen=True)
class _Tok:
    kind: str  # "int" | "ident" | "string" | punct literal
    text: str
    value: object = None


def _lex(line: str, lineno: int) -> list[_Tok]:
    toks: list[_Tok] = []
    i, n = 0, len(line)
    while i < n:
        c = line[i]
        if c == "#":
            break
        if c.isspace():
            i += 1
            continue
        if c == '"':
            j = i + 1
            out: list[str] = []
            while j < n and line[j] != '"':
                if line[j] == "\\":
                    if j + 1 >= n:
                        raise ParseError(lineno, "unterminated escape in string")
                    esc = line[j + 1]
                    try:
                        out.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}[esc])
                    except KeyError:
                        raise ParseError(lineno, f"bad escape \\{esc}") from None
                    j += 2
                else:
                    out.append(line[j])
                    j += 1
            if j >= n:
                raise ParseError(lineno, "unterminated string literal")
            toks.append(_Tok("string", line[i : j + 1], "".join(out)))
            i = j + 1
            continue
        if c.isdigit() or (c == "-" and i + 1 < n and line[i + 1].isdigit()):
            j = i + 1
            while j < n and line[j].isdigit():
                j += 1
            toks.append(_Tok("int", line[i:j], int(line[i:j])))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i + 1
            while j < n and (line[j].isalnum() or line[j] == "_"):
                j += 1
            toks.append(_Tok("ident", line[i:j]))
            i = j
            continue
        if c in _PUNCT:
            toks.append(_Tok(c, c))
            i += 1
            continue
        raise ParseError(lineno, f"unexpected character {c!r}")
    return toks


# ---------------------------------------------------------------------------
# parser

class _LineParser:
    def __init__(self, toks: list[_Tok], lineno: int):
        self.toks = toks
        self.pos = 0
        self.lineno = lineno

    def peek(self) -> _Tok | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, kind: str | None = None) -> _Tok:
        tok = self.peek()
        if tok is None:
            raise ParseError(self.lineno, "unexpected end of line")
        if kind is not None and tok.kind != kind:
            raise ParseError(self.lineno, f"expected {kind!r}, got {tok.text!r}")
        self.pos += 1
        return tok

    def at(self, kind: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == kind

    def done(self) -> bool:
        return self.pos >= len(self.toks)

    # expr := INT | STRING | true | false | undef | fun(IDENT)@NAT
    #       | OPNAME(expr, ...) | ref
    # ref  := IDENT | expr[expr]
    # Calls are instructions, never expressions; a bare IDENT followed by
    # "(" is only consumed here when IDENT names an operator.
    def parse_expr(self) -> Expr:
        expr = self._parse_primary()
        while self.at("["):
            self.take("[")
            key = self.parse_expr()
            self.take("]")
            expr = Ref(PropAccess(expr, key))
        return expr

    def _parse_primary(self) -> Expr:
        tok = self.peek()
        if tok is None:
            raise ParseError(self.lineno, "expected expression")
        if tok.kind == "int":
            self.take()
            return Prim(Int(tok.value))  # type: ignore[arg-type]
        if tok.kind == "string":
            self.take()
            return Prim(Str(tok.value))  # type: ignore[arg-type]
        if tok.kind == "ident":
            name = tok.text
            if name == "true":
                self.take()
                return Prim(Bool(True))
            if name == "false":
                self.take()
                return Prim(Bool(False))
            if name == "undef":
                self.take()
                return Prim(UNDEF)
            if name == "fun":
                self.take()
                self.take("(")
                param = self.take("ident").text
                self.take(")")
                self.take("@")
                body = self.take("int")
                if body.value < 0:  # type: ignore[operator]
                    raise ParseError(self.lineno, "body label must be non-negative")
                return Lambda(param, body.value)  # type: ignore[arg-type]
            if name in _KEYWORDS:
                raise ParseError(self.lineno, f"unexpected keyword {name!r}")
            self.take()
            if name in OP_TABLE and self.at("("):
                self.take("(")
                args = [self.parse_expr()]
                while self.at(","):
                    self.take(",")
                    args.append(self.parse_expr())
                self.take(")")
                return Op(name, tuple(args))
            return Ref(Var(name))
        raise ParseError(self.lineno, f"unexpected token {tok.text!r}")

    def parse_ref_expr(self) -> Reference:
        expr = self.parse_expr()
        if isinstance(expr, Ref):
            return expr.ref
        raise ParseError(self.lineno, "assignment target must be a variable or property")

    def parse_instr(self) -> Instruction:
        tok = self.peek()
        if tok is None:
            raise ParseError(self.lineno, "empty instruction")
        if tok.kind == "ident" and tok.text == "ret":
            self.take()
            value = self.parse_expr()
            return Return(value)
        if tok.kind == "ident" and tok.text == "if":
            self.take()
            cond = self.parse_expr()
            target = self.take("int")
            if target.value < 0:  # type: ignore[operator]
                raise ParseError(self.lineno, "branch target must be non-negative")
            return Branch(cond, target.value)  # type: ignore[arg-type]
        target_ref = self.parse_ref_expr()
        self.take("=")
        if self.at("{"):
            self.take("{")
            self.take("}")
            return NewObject(target_ref)
        source = self.parse_expr()
        if self.at("("):
            self.take("(")
            arg = self.parse_expr()
            self.take(")")
            return Call(target_ref, source, arg)
        return Assign(target_ref, source)


def parse_program(text: str) -> Program:
    """Parse program text; raises ParseError (or a subclass) on bad input."""
    lines: list[tuple[Label, Instruction]] = []
    seen: set[Label] = set()
    last_label = -1
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _lex(raw, lineno)
        if not toks:
            continue
        p = _LineParser(toks, lineno)
        label_tok = p.take("int")
        label: Label = label_tok.value  # type: ignore[assignment]
        if label < 0:
            raise ParseError(lineno, "labels must be non-negative")
        p.take(":")
        if label in seen:
            raise DuplicateLabelError(lineno, f"duplicate label {label}")
        if label <= last_label:
            raise ParseError(lineno, f"labels must be strictly increasing (got {label} after {last_label})")
        instr = p.parse_instr()
        if not p.done():
            raise ParseError(lineno, f"trailing tokens: {p.peek().text!r}")  # type: ignore[union-attr]
        seen.add(label)
        last_label = label
        lines.append((label, instr))
    if not lines:
        raise ParseError(0, "program has no instructions")
    program = Program(tuple(lines))
    for diag in validate(program):
        if diag.code == "dangling-label":
            raise DanglingLabelError(0, diag.message)
    return program


def next_label(program: Program, label: Label) -> Label | None:
    """Label of the line after `label` in source order, None past the end."""
    try:
        return program._next[label]
    except KeyError:
        raise UnknownLabelError(label) from None


# ---------------------------------------------------------------------------
# validation

def _expr_diags(program: Program, label: Label, expr: Expr, out: list[Diagnostic]) -> None:
    if isinstance(expr, Lambda):
        if not program.has_label(expr.body):
            out.append(Diagnostic(label, "dangling-label", f"label {label}: lambda body {expr.body} does not exist"))
    elif isinstance(expr, Ref):
        if isinstance(expr.ref, PropAccess):
            _expr_diags(program, label, expr.ref.obj, out)
            _expr_diags(program, label, expr.ref.key, out)
    elif isinstance(expr, Op):
        if expr.name not in OP_TABLE:
            out.append(Diagnostic(label, "unknown-op", f"label {label}: unknown operator {expr.name!r}"))
        else:
            want = len(OP_TABLE[expr.name][0])
            if len(expr.args) != want:
                out.append(
                    Diagnostic(
                        label,
                        "arity-mismatch",
                        f"label {label}: {expr.name} takes {want} argument(s), got {len(expr.args)}",
                    )
                )
        for arg in expr.args:
            _expr_diags(program, label, arg, out)


def validate(program: Program) -> list[Diagnostic]:
    """Static checks.  Errors: duplicate/dangling labels, unknown ops,
    arity mismatches.  Warning: final line is not `ret` (execution can
    fall off the end)."""
    out: list[Diagnostic] = []
    seen: set[Label] = set()
    prev = -1
    for label, instr in program.lines:
        if label in seen:
            out.append(Diagnostic(label, "duplicate-label", f"duplicate label {label}"))
        elif label <= prev:
            out.append(Diagnostic(label, "label-order", f"label {label} not strictly increasing"))
        seen.add(label)
        prev = max(prev, label)
        if isinstance(instr, Assign):
            _ref_diags(program, label, instr.target, out)
            _expr_diags(program, label, instr.source, out)
        elif isinstance(instr, NewObject):
            _ref_diags(program, label, instr.target, out)
        elif isinstance(instr, Call):
            _ref_diags(program, label, instr.target, out)
            _expr_diags(program, label, instr.callee, out)
            _expr_diags(program, label, instr.arg, out)
        elif isinstance(instr, Return):
            _expr_diags(program, label, instr.value, out)
        elif isinstance(instr, Branch):
            _expr_diags(program, label, instr.cond, out)
            if not program.has_label(instr.then_label):
                out.append(
                    Diagnostic(label, "dangling-label", f"label {label}: branch target {instr.then_label} does not exist")
                )
    last_label, last_instr = program.lines[-1]
    if not isinstance(last_instr, Return):
        out.append(Diagnostic(last_label, "no-final-return", f"label {last_label}: last line is not ret", warning=True))
    return out


def _ref_diags(program: Program, label: Label, ref: Reference, out: list[Diagnostic]) -> None:
    if isinstance(ref, PropAccess):
        _expr_diags(program, label, ref.obj, out)
        _expr_diags(program, label, ref.key, out)


# ---------------------------------------------------------------------------
# printing

def _fmt_prim(p: Primitive) -> str:
    if isinstance(p, Int):
        return str(p.value)
    if isinstance(p, Str):
        body = p.value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")
        return f'"{body}"'
    if isinstance(p, Bool):
        return "true" if p.value else "false"
    return "undef"


def format_expr(expr: Expr) -> str:
    if isinstance(expr, Prim):
        return _fmt_prim(expr.value)
    if isinstance(expr, Lambda):
        return f"fun({expr.param})@{expr.body}"
    if isinstance(expr, Ref):
        return format_ref(expr.ref)
    if isinstance(expr, Op):
        return f"{expr.name}({', '.join(format_expr(a) for a in expr.args)})"
    raise TypeError(f"not an expression: {expr!r}")


def format_ref(ref: Reference) -> str:
    if isinstance(ref, Var):
        return ref.name
    return f"{format_expr(ref.obj)}[{format_expr(ref.key)}]"


def format_instr(instr: Instruction) -> str:
    if isinstance(instr, Assign):
        return f"{format_ref(instr.target)} = {format_expr(instr.source)}"
    if isinstance(instr, NewObject):
        return f"{format_ref(instr.target)} = {{}}"
    if isinstance(instr, Call):
        return f"{format_ref(instr.target)} = {format_expr(instr.callee)}({format_expr(instr.arg)})"
    if isinstance(instr, Return):
        return f"ret {format_expr(instr.value)}"
    if isinstance(instr, Branch):
        return f"if {format_expr(instr.cond)} {instr.then_label}"
    raise TypeError(f"not an instruction: {instr!r}")


def format_program(program: Program) -> str:
    """Canonical text form; parse_program(format_program(p)) == p."""
    return "\n".join(f"{label}: {format_instr(instr)}" for label, instr in program.lines) + "\n"
