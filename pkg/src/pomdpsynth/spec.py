"""Specifications and their memory automata.

Supported shapes::

    P<op>λ [ ψ ]   Pmax [ ψ ]   Pmin [ ψ ]
    E<op>λ [ ψ ]   Emax [ ψ ]   Emin [ ψ ]

with ψ one of ``F a`` / ``true U a``, ``!x U a``, ``F (a & F b)`` and
``GF a & GF b & !F x`` (conjuncts in any order, ``G !x`` accepted for
``!F x``). Anything else is rejected.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

from .models import Mdp


class SpecError(ValueError):
    pass


class UnsupportedFormulaError(SpecError):
    pass


@dataclass(frozen=True)
class Eventually:
    goal: str


@dataclass(frozen=True)
class Until:
    avoid: str
    goal: str


@dataclass(frozen=True)
class SeqReach:
    first: str
    second: str


@dataclass(frozen=True)
class RecurrenceSafety:
    rec1: str
    rec2: str
    avoid: str


Template = Eventually | Until | SeqReach | RecurrenceSafety

_OPS = {"<": lambda v, t: v < t, "<=": lambda v, t: v <= t,
        ">=": lambda v, t: v >= t, ">": lambda v, t: v > t}


@dataclass(frozen=True)
class Specification:
    kind: str  # "prob" or "reward"
    template: Template
    direction: str | None = None  # "max" / "min" for optimisation queries
    comparison: str | None = None
    threshold: float | None = None
    text: str = ""

    def __post_init__(self):
        if self.kind not in ("prob", "reward"):
            raise SpecError(f"unknown specification kind {self.kind!r}")
        if (self.direction is None) == (self.comparison is None):
            raise SpecError("exactly one of direction / comparison must be set")
        if self.comparison is not None:
            if self.comparison not in _OPS:
                raise SpecError(f"unknown comparison {self.comparison!r}")
            lam = self.threshold
            if lam is None or (self.kind == "prob" and not 0 <= lam <= 1) or lam < 0:
                raise SpecError(f"threshold {lam!r} outside its domain")
        if self.kind == "reward" and isinstance(self.template, (Until, RecurrenceSafety)):
            raise UnsupportedFormulaError("expected-reward properties take F a or F (a & F b)")

    @property
    def maximizing(self) -> bool:
        """Whether larger values of the measured quantity are better."""
        if self.direction is not None:
            return self.direction == "max"
        return self.comparison in (">", ">=")

    def satisfied_by(self, value: float) -> bool | None:
        if self.comparison is None:
            return None
        return bool(_OPS[self.comparison](value, self.threshold))

    def propositions(self) -> tuple[str, ...]:
        t = self.template
        return tuple(getattr(t, f) for f in t.__dataclass_fields__)

    def check_labels(self, m: Mdp) -> None:
        missing = [ap for ap in self.propositions() if ap not in m.labels]
        if missing:
            raise SpecError(f"model {m.name!r} has no label(s) {missing}")

    def __str__(self) -> str:
        return self.text or format_spec(self)


def format_spec(spec: Specification) -> str:
    head = "P" if spec.kind == "prob" else "E"
    head += spec.direction if spec.direction else f"{spec.comparison}{spec.threshold:g}"
    t = spec.template
    if isinstance(t, Eventually):
        body = f"F {t.goal}"
    elif isinstance(t, Until):
        body = f"!{t.avoid} U {t.goal}"
    elif isinstance(t, SeqReach):
        body = f"F ({t.first} & F {t.second})"
    else:
        body = f"GF {t.rec1} & GF {t.rec2} & !F {t.avoid}"
    return f"{head} [ {body} ]"


# --- formula parsing -------------------------------------------------------

_TOKEN = re.compile(r'\s*(?:(?P<op>GF|[()!&|])|(?P<str>"[^"]*")|(?P<id>[A-Za-z_][A-Za-z0-9_]*))')


def _tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise SpecError(f"unexpected character {text[pos:].strip()[:1]!r} at offset {pos}")
        if m.group("op") == "GF":
            out.extend(["G", "F"])
        elif m.group("str"):
            out.append(("ap", m.group("str")[1:-1]))
        else:
            out.append(m.group("op") or m.group("id"))
        pos = m.end()
    return out


class _Parser:
    # precedence: | < & < U < unary (! F G)
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expect=None):
        tok = self.peek()
        if tok is None or (expect is not None and tok != expect):
            raise SpecError(f"expected {expect or 'a formula'}, got {tok!r}")
        self.i += 1
        return tok

    def parse(self):
        node = self.disj()
        if self.peek() is not None:
            raise SpecError(f"trailing input at {self.peek()!r}")
        return node

    def disj(self):
        node = self.conj()
        while self.peek() == "|":
            self.take()
            node = ("or", node, self.conj())
        return node

    def conj(self):
        node = self.until()
        while self.peek() == "&":
            self.take()
            node = ("and", node, self.until())
        return node

    def until(self):
        node = self.unary()
        if self.peek() == "U":
            self.take()
            node = ("U", node, self.until())
        return node

    def unary(self):
        tok = self.peek()
        if tok == "!":
            self.take()
            return ("not", self.unary())
        if tok in ("F", "G"):
            self.take()
            return (tok, self.unary())
        if tok == "(":
            self.take()
            node = self.disj()
            self.take(")")
            return node
        tok = self.take()
        if isinstance(tok, tuple):
            return tok
        if tok in ("true", "false"):
            return (tok,)
        if tok in (")", "&", "|", "U"):
            raise SpecError(f"unexpected {tok!r}")
        return ("ap", tok)


def _flatten_and(node):
    if node[0] == "and":
        return _flatten_and(node[1]) + _flatten_and(node[2])
    return [node]


def _template(ast) -> Template:
    kind = ast[0]
    if kind == "F" and ast[1][0] == "ap":
        return Eventually(ast[1][1])
    if kind == "U" and ast[2][0] == "ap":
        left = ast[1]
        if left == ("true",):
            return Eventually(ast[2][1])
        if left[0] == "not" and left[1][0] == "ap":
            return Until(left[1][1], ast[2][1])
    if kind == "F" and ast[1][0] == "and":
        a, b = ast[1][1], ast[1][2]
        if a[0] == "ap" and b[0] == "F" and b[1][0] == "ap":
            return SeqReach(a[1], b[1][1])
    if kind == "and":
        parts = _flatten_and(ast)
        rec, avoid = [], []
        for p in parts:
            if p[0] == "G" and p[1][0] == "F" and p[1][1][0] == "ap":
                rec.append(p[1][1][1])
            elif p[0] == "not" and p[1][0] == "F" and p[1][1][0] == "ap":
                avoid.append(p[1][1][1])
            elif p[0] == "G" and p[1][0] == "not" and p[1][1][0] == "ap":
                avoid.append(p[1][1][1])
            else:
                break
        else:
            if len(rec) == 2 and len(avoid) == 1:
                return RecurrenceSafety(rec[0], rec[1], avoid[0])
    raise UnsupportedFormulaError(f"formula outside the supported templates: {ast!r}")


_HEAD = re.compile(r"\s*(?P<kind>[PE])\s*(?:(?P<dir>max|min)|(?P<cmp><=|>=|<|>)\s*(?P<val>[0-9.eE+-]+))\s*\[(?P<body>.*)\]\s*$", re.S)


def parse_spec(text: str) -> Specification:
    m = _HEAD.match(text)
    if not m:
        raise SpecError(f"cannot parse specification {text!r}")
    ast = _Parser(_tokenize(m.group("body"))).parse()
    template = _template(ast)
    threshold = None
    if m.group("val") is not None:
        try:
            threshold = float(m.group("val"))
        except ValueError:
            raise SpecError(f"invalid threshold {m.group('val')!r}") from None
    return Specification(
        kind="prob" if m.group("kind") == "P" else "reward",
        template=template,
        direction=m.group("dir"),
        comparison=m.group("cmp"),
        threshold=threshold,
        text=text.strip(),
    )


# --- automata ---------------------------------------------------------------

@dataclass(frozen=True)
class SpecAutomaton:
    """Deterministic automaton over label sets.

    ``step[q][frozenset(aps)]`` gives the successor node after reading a
    state whose relevant propositions are ``aps``. Acceptance is either a
    reach condition (``accept_node`` combined with ``goal`` label) or a
    recurrence/safety pair for ``RecurrenceSafety``.
    """

    num_nodes: int
    initial: int
    relevant: tuple[str, ...]
    step: tuple[dict, ...]
    goal: str | None = None
    accept_node: int | None = None
    avoid: str | None = None
    recurrence: tuple[str, ...] = ()

    def successor(self, q: int, holding) -> int:
        return self.step[q][frozenset(ap for ap in holding if ap in self.relevant)]

    def subsets(self):
        rel = self.relevant
        for r in range(len(rel) + 1):
            for combo in itertools.combinations(rel, r):
                yield frozenset(combo)


def build_automaton(spec: Specification) -> SpecAutomaton:
    t = spec.template
    if isinstance(t, (Eventually, Until)):
        rel = (t.goal,) if isinstance(t, Eventually) else (t.avoid, t.goal)
        table = {sub: 0 for sub in _powerset(rel)}
        return SpecAutomaton(1, 0, rel, (table,), goal=t.goal, accept_node=0,
                             avoid=getattr(t, "avoid", None))
    if isinstance(t, SeqReach):
        rel = (t.first, t.second)
        q0 = {sub: (1 if t.first in sub else 0) for sub in _powerset(rel)}
        q1 = {sub: 1 for sub in _powerset(rel)}
        return SpecAutomaton(2, 0, rel, (q0, q1), goal=t.second, accept_node=1)
    rel = (t.rec1, t.rec2, t.avoid)
    table = {sub: 0 for sub in _powerset(rel)}
    return SpecAutomaton(1, 0, rel, (table,), avoid=t.avoid, recurrence=(t.rec1, t.rec2))


def _powerset(items):
    return [frozenset(c) for r in range(len(items) + 1) for c in itertools.combinations(items, r)]
