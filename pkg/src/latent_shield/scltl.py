"""Syntactically co-safe LTL: parsing, printing, progression and monitoring.

Concrete syntax::

    phi := true | ident | !ident | phi & phi | phi | phi
         | X phi | <> phi | phi U phi | ( phi )

Binding strength, tightest first: ``!``, then ``X`` / ``<>``, then ``&``,
then ``|``, then ``U`` (right associative).
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, Sequence, Union

Valuation = frozenset  # frozenset[str] of propositions true at one step


@dataclass(frozen=True)
class TrueF:
    def __str__(self) -> str:
        return "true"


@dataclass(frozen=True)
class FalseF:
    def __str__(self) -> str:
        return "false"


@dataclass(frozen=True)
class Atom:
    name: str


@dataclass(frozen=True)
class NotAtom:
    name: str


@dataclass(frozen=True)
class Or:
    lhs: "Formula"
    rhs: "Formula"


@dataclass(frozen=True)
class And:
    lhs: "Formula"
    rhs: "Formula"


@dataclass(frozen=True)
class Next:
    sub: "Formula"


@dataclass(frozen=True)
class Until:
    lhs: "Formula"
    rhs: "Formula"


@dataclass(frozen=True)
class Eventually:
    sub: "Formula"


Formula = Union[TrueF, FalseF, Atom, NotAtom, Or, And, Next, Until, Eventually]

TRUE = TrueF()
FALSE = FalseF()


class ParseError(ValueError):
    """Syntax error at a byte offset of the input."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownPropositionError(ValueError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown proposition {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"\s*(?:(<>)|([!&|()])|([A-Za-z_][A-Za-z0-9_]*))")
_KEYWORDS = {"true", "X", "U"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    data = text.encode("utf-8")
    tokens = []
    pos = 0
    # work on the byte string so offsets are byte offsets
    src = data.decode("latin-1")
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None:
            stripped = len(src[pos:]) - len(src[pos:].lstrip())
            raise ParseError(f"unexpected character {src[pos + stripped]!r}", pos + stripped)
        start = m.start(m.lastindex)
        lexeme = m.group(m.lastindex)
        if m.lastindex == 3:
            kind = lexeme if lexeme in _KEYWORDS else "ident"
        else:
            kind = lexeme
        tokens.append((kind, lexeme, start))
        pos = m.end()
    tokens.append(("eof", "", len(data)))
    return tokens


class _Parser:
    def __init__(self, text: str, alphabet: Iterable[str] | None):
        self.tokens = _tokenize(text)
        self.i = 0
        self.alphabet = None if alphabet is None else set(alphabet)

    def peek(self) -> str:
        return self.tokens[self.i][0]

    def take(self, kind: str | None = None) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        if kind is not None and tok[0] != kind:
            want = "end of input" if kind == "eof" else repr(kind)
            got = "end of input" if tok[0] == "eof" else repr(tok[1])
            raise ParseError(f"expected {want}, found {got}", tok[2])
        self.i += 1
        return tok

    def atom_name(self) -> str:
        _, name, offset = self.take("ident")
        if self.alphabet is not None and name not in self.alphabet:
            raise UnknownPropositionError(name, offset)
        return name

    def until(self) -> Formula:
        lhs = self.disjunction()
        if self.peek() == "U":
            self.take()
            return Until(lhs, self.until())
        return lhs

    def disjunction(self) -> Formula:
        f = self.conjunction()
        while self.peek() == "|":
            self.take()
            f = Or(f, self.conjunction())
        return f

    def conjunction(self) -> Formula:
        f = self.unary()
        while self.peek() == "&":
            self.take()
            f = And(f, self.unary())
        return f

    def unary(self) -> Formula:
        kind = self.peek()
        if kind == "X":
            self.take()
            return Next(self.unary())
        if kind == "<>":
            self.take()
            return Eventually(self.unary())
        return self.primary()

    def primary(self) -> Formula:
        kind, lexeme, offset = self.tokens[self.i]
        if kind == "true":
            self.take()
            return TRUE
        if kind == "ident":
            return Atom(self.atom_name())
        if kind == "!":
            self.take()
            if self.peek() != "ident":
                tok = self.tokens[self.i]
                raise ParseError("negation applies only to a proposition", tok[2])
            return NotAtom(self.atom_name())
        if kind == "(":
            self.take()
            f = self.until()
            self.take(")")
            return f
        got = "end of input" if kind == "eof" else repr(lexeme)
        raise ParseError(f"expected a formula, found {got}", offset)


def parse(text: str, alphabet: Iterable[str] | None = None) -> Formula:
    """Parse ``text`` into a formula AST.

    When ``alphabet`` is given every proposition must belong to it.
    """
    p = _Parser(text, alphabet)
    f = p.until()
    p.take("eof")
    return f


def to_text(f: Formula) -> str:
    """Print ``f`` in the concrete syntax; ``parse(to_text(f)) == f``."""
    if isinstance(f, (TrueF, FalseF)):
        return str(f)
    if isinstance(f, Atom):
        return f.name
    if isinstance(f, NotAtom):
        return "!" + f.name
    if isinstance(f, Next):
        return "X " + to_text(f.sub)
    if isinstance(f, Eventually):
        return "<> " + to_text(f.sub)
    op = {Or: "|", And: "&", Until: "U"}[type(f)]
    return f"({to_text(f.lhs)} {op} {to_text(f.rhs)})"


def atoms(f: Formula) -> set[str]:
    if isinstance(f, (Atom, NotAtom)):
        return {f.name}
    if isinstance(f, (Next, Eventually)):
        return atoms(f.sub)
    if isinstance(f, (Or, And, Until)):
        return atoms(f.lhs) | atoms(f.rhs)
    return set()


# ---------------------------------------------------------------------------
# progression


@lru_cache(maxsize=1 << 18)
def simplify(f: Formula) -> Formula:
    """Boolean identity/absorption/idempotence rules, bottom-up.

    A single bottom-up pass already reaches the fixpoint: every rewrite
    returns either a constant, an already simplified child, or a node whose
    children are simplified, non-constant and distinct.
    """
    if isinstance(f, Or):
        lhs, rhs = simplify(f.lhs), simplify(f.rhs)
        if lhs == TRUE or rhs == TRUE:
            return TRUE
        if lhs == FALSE:
            return rhs
        if rhs == FALSE or lhs == rhs:
            return lhs
        return Or(lhs, rhs)
    if isinstance(f, And):
        lhs, rhs = simplify(f.lhs), simplify(f.rhs)
        if lhs == FALSE or rhs == FALSE:
            return FALSE
        if lhs == TRUE:
            return rhs
        if rhs == TRUE or lhs == rhs:
            return lhs
        return And(lhs, rhs)
    if isinstance(f, Next):
        return Next(simplify(f.sub))
    if isinstance(f, Eventually):
        return Eventually(simplify(f.sub))
    if isinstance(f, Until):
        return Until(simplify(f.lhs), simplify(f.rhs))
    return f


def _prog(f: Formula, v: frozenset) -> Formula:
    if isinstance(f, (TrueF, FalseF)):
        return f
    if isinstance(f, Atom):
        return TRUE if f.name in v else FALSE
    if isinstance(f, NotAtom):
        return FALSE if f.name in v else TRUE
    if isinstance(f, Or):
        return Or(_prog(f.lhs, v), _prog(f.rhs, v))
    if isinstance(f, And):
        return And(_prog(f.lhs, v), _prog(f.rhs, v))
    if isinstance(f, Next):
        return f.sub
    if isinstance(f, Until):
        return Or(_prog(f.rhs, v), And(_prog(f.lhs, v), f))
    if isinstance(f, Eventually):
        return Or(_prog(f.sub, v), f)
    raise TypeError(f"not a formula: {f!r}")


@lru_cache(maxsize=1 << 18)
def progress(f: Formula, v: frozenset) -> Formula:
    """One-step residual of ``f`` after observing valuation ``v``."""
    return simplify(_prog(f, frozenset(v)))


# ---------------------------------------------------------------------------
# monitoring


class Status(str, enum.Enum):
    SAFE = "safe"
    UNSAFE = "unsafe"
    SATISFIED = "satisfied"


@dataclass(frozen=True)
class Monitor:
    current: Formula
    status: Status = Status.SAFE

    @classmethod
    def start(cls, f: Formula) -> "Monitor":
        return cls(f, _status_of(simplify(f)))


def _status_of(f: Formula) -> Status:
    if f == FALSE:
        return Status.UNSAFE
    if f == TRUE:
        return Status.SATISFIED
    return Status.SAFE


def monitor_step(m: Monitor, v: Iterable[str]) -> Monitor:
    if m.status is not Status.SAFE:
        return m
    nxt = progress(m.current, frozenset(v))
    return Monitor(nxt, _status_of(nxt))


class Verdict(str, enum.Enum):
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    PENDING = "pending"


def semantic_verdict(f: Formula, trace: Sequence[Iterable[str]]) -> Verdict:
    """Three-valued finite-trace evaluation by the expansion laws.

    Independent of :func:`progress`; used as a test oracle. Positions past the
    end of the trace are unknown, combined with Kleene connectives.
    """
    if not trace:
        raise ValueError("trace must be nonempty")
    steps = [frozenset(v) for v in trace]
    n = len(steps)
    memo: dict[tuple[int, int], bool | None] = {}

    def ev(g: Formula, i: int) -> bool | None:
        key = (id(g), i)
        if key in memo:
            return memo[key]
        if isinstance(g, TrueF):
            r: bool | None = True
        elif isinstance(g, FalseF):
            r = False
        elif i >= n:
            r = None
            if isinstance(g, (Or, And)):
                r = _kleene(type(g), ev(g.lhs, i), ev(g.rhs, i))
        elif isinstance(g, Atom):
            r = g.name in steps[i]
        elif isinstance(g, NotAtom):
            r = g.name not in steps[i]
        elif isinstance(g, (Or, And)):
            r = _kleene(type(g), ev(g.lhs, i), ev(g.rhs, i))
        elif isinstance(g, Next):
            r = ev(g.sub, i + 1)
        elif isinstance(g, Until):
            r = _kleene(Or, ev(g.rhs, i), _kleene(And, ev(g.lhs, i), ev(g, i + 1)))
        elif isinstance(g, Eventually):
            r = _kleene(Or, ev(g.sub, i), ev(g, i + 1))
        else:
            raise TypeError(f"not a formula: {g!r}")
        memo[key] = r
        return r

    r = ev(f, 0)
    if r is None:
        return Verdict.PENDING
    return Verdict.SATISFIED if r else Verdict.VIOLATED


def _kleene(op, a: bool | None, b: bool | None) -> bool | None:
    if op is Or:
        if a is True or b is True:
            return True
        if a is False and b is False:
            return False
        return None
    if a is False or b is False:
        return False
    if a is True and b is True:
        return True
    return None


# ---------------------------------------------------------------------------
# labelling


@dataclass
class Labeller:
    """Per-step violation flag for an environment (the labelling function).

    A step is a violation when the monitored residual collapses to false.
    The monitor then restarts from the original formula so later violations
    in the same episode are also counted.
    """

    formula: Formula
    monitor: Monitor = field(init=False)

    def __post_init__(self):
        self.reset()

    def reset(self) -> None:
        self.monitor = Monitor.start(self.formula)

    def step(self, valuation: Iterable[str]) -> bool:
        self.monitor = monitor_step(self.monitor, valuation)
        if self.monitor.status is Status.UNSAFE:
            self.monitor = Monitor.start(self.formula)
            return True
        return False

    def peek(self, valuation: Iterable[str]) -> bool:
        """Violation flag for ``valuation`` without advancing."""
        return monitor_step(self.monitor, valuation).status is Status.UNSAFE

    def copy(self) -> "Labeller":
        other = Labeller.__new__(Labeller)
        other.formula = self.formula
        other.monitor = self.monitor
        return other


# ---------------------------------------------------------------------------
# trace files


def read_trace(lines: Iterable[str], alphabet: Iterable[str] | None = None) -> Iterator[frozenset]:
    """Yield valuations from the line-oriented trace format.

    One step per line, comma-separated true propositions; an empty line is
    the empty valuation and lines starting with ``#`` are comments.
    """
    allowed = None if alphabet is None else set(alphabet)
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if line.lstrip().startswith("#"):
            continue
        names = frozenset(p.strip() for p in line.split(",") if p.strip())
        if allowed is not None:
            bad = sorted(names - allowed)
            if bad:
                raise ValueError(f"line {lineno}: unknown proposition {bad[0]!r}")
        yield names
