"""Signal temporal logic over named traffic-rule predicates.

Formulas are immutable ASTs built from predicate leaves, Boolean
connectives, and bounded/unbounded temporal operators. Three semantics
are provided, all driven by the same max/min recursion:

* :func:`eval_characteristic` -- qualitative evaluation in {-1, +1};
* :func:`eval_robustness` -- model-free quantitative semantics where a
  predicate leaf contributes its raw evaluation-function value;
* :func:`eval_smooth_robustness` -- the same recursion with max/min
  replaced by temperature-scaled log-sum-exp softenings.

Conjunction, *eventually*, and *globally* are sugar: ``a & b`` evaluates
as ``!(!a | !b)``, ``F[I] p`` as ``true U[I] p``, and ``G[I] p`` as
``!F[I]!p``, so the disjunction/until recursion is the single semantic
source for every operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from rulerob.errors import (
    FormulaSyntaxError,
    HorizonError,
    InputError,
    UnknownPredicateError,
)

RHO_MAX_DEFAULT = 1e3


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class StepInterval:
    """Discrete step interval [lo, hi]; ``hi=None`` means unbounded."""

    lo: int
    hi: int | None

    def __post_init__(self):
        if self.lo < 0:
            raise InputError(f"interval lower bound must be >= 0, got {self.lo}")
        if self.hi is not None and self.hi < self.lo:
            raise InputError(f"malformed interval: lower bound {self.lo} > upper bound {self.hi}")

    def __str__(self) -> str:
        hi = "inf" if self.hi is None else str(self.hi)
        return f"[{self.lo},{hi}]"


class Formula:
    """Base class for formula nodes. Instances are immutable and hashable."""

    def __str__(self) -> str:
        return format_formula(self)

    def __and__(self, other: "Formula") -> "Formula":
        return And(self, other)

    def __or__(self, other: "Formula") -> "Formula":
        return Or(self, other)

    def __invert__(self) -> "Formula":
        return Not(self)


@dataclass(frozen=True)
class Predicate(Formula):
    name: str
    args: tuple[str, ...]


@dataclass(frozen=True)
class Not(Formula):
    child: Formula


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Until(Formula):
    interval: StepInterval
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Eventually(Formula):
    interval: StepInterval
    child: Formula


@dataclass(frozen=True)
class Globally(Formula):
    interval: StepInterval
    child: Formula


@dataclass(frozen=True)
class _TrueLeaf(Formula):
    """Internal constant used to desugar *eventually*; not printable."""


_TRUE = _TrueLeaf()


def iter_predicates(phi: Formula):
    """Yield every predicate leaf of ``phi`` (with repetition)."""
    stack = [phi]
    while stack:
        node = stack.pop()
        if isinstance(node, Predicate):
            yield node
        elif isinstance(node, Not):
            stack.append(node.child)
        elif isinstance(node, (And, Or, Until)):
            stack.append(node.left)
            stack.append(node.right)
        elif isinstance(node, (Eventually, Globally)):
            stack.append(node.child)


# ---------------------------------------------------------------------------
# Leaf evaluation protocol (implemented by the predicate registry)


class LeafEvaluator(Protocol):
    """Adapter supplying predicate values to the STL recursion."""

    def boolean(self, name: str, args: tuple[str, ...], k: int) -> bool:
        """Boolean value of the named predicate at step ``k``."""
        ...

    def alpha(self, name: str, args: tuple[str, ...], k: int) -> float:
        """Quantitative value of the named predicate at step ``k``."""
        ...

    def __len__(self) -> int:
        """Number of steps of the underlying signal."""
        ...


@dataclass
class EvalDetails:
    """Optional out-parameter collecting evaluation side information."""

    truncated: bool = False


# ---------------------------------------------------------------------------
# Semantics


class _Semantics:
    """max/min algebra shared by the characteristic and robustness runs."""

    def leaf(self, phi: Predicate, leaves: LeafEvaluator, k: int) -> float:
        raise NotImplementedError

    def top(self) -> float:
        raise NotImplementedError

    def fmax(self, values: Sequence[float]) -> float:
        return max(values)

    def fmin(self, values: Sequence[float]) -> float:
        return min(values)


class _CharacteristicSemantics(_Semantics):
    def leaf(self, phi, leaves, k):
        return 1.0 if leaves.boolean(phi.name, phi.args, k) else -1.0

    def top(self):
        return 1.0


class _RobustnessSemantics(_Semantics):
    def __init__(self, rho_max: float):
        self.rho_max = rho_max

    def leaf(self, phi, leaves, k):
        return float(leaves.alpha(phi.name, phi.args, k))

    def top(self):
        return self.rho_max


class _SmoothSemantics(_RobustnessSemantics):
    def __init__(self, rho_max: float, temperature: float):
        super().__init__(rho_max)
        if temperature <= 0:
            raise InputError(f"temperature must be > 0, got {temperature}")
        self.temperature = temperature

    def fmax(self, values):
        t = self.temperature
        m = max(values)
        return m + t * math.log(sum(math.exp((v - m) / t) for v in values))

    def fmin(self, values):
        return -self.fmax([-v for v in values])


def _eval(phi: Formula, leaves: LeafEvaluator, k: int, sem: _Semantics, details: EvalDetails) -> float:
    n_last = len(leaves) - 1
    if not 0 <= k <= n_last:
        raise HorizonError(f"step {k} outside signal of length {n_last + 1}")

    if isinstance(phi, _TrueLeaf):
        return sem.top()
    if isinstance(phi, Predicate):
        return sem.leaf(phi, leaves, k)
    if isinstance(phi, Not):
        return -_eval(phi.child, leaves, k, sem, details)
    if isinstance(phi, And):
        # !(!a | !b), kept inline to avoid rebuilding nodes
        return -sem.fmax([
            -_eval(phi.left, leaves, k, sem, details),
            -_eval(phi.right, leaves, k, sem, details),
        ])
    if isinstance(phi, Or):
        return sem.fmax([
            _eval(phi.left, leaves, k, sem, details),
            _eval(phi.right, leaves, k, sem, details),
        ])
    if isinstance(phi, Eventually):
        return _eval(Until(phi.interval, _TRUE, phi.child), leaves, k, sem, details)
    if isinstance(phi, Globally):
        return -_eval(Until(phi.interval, _TRUE, Not(phi.child)), leaves, k, sem, details)
    if isinstance(phi, Until):
        lo = k + phi.interval.lo
        if phi.interval.hi is None:
            hi = n_last
            details.truncated = True
        else:
            hi = k + phi.interval.hi
            if hi > n_last:
                raise HorizonError(
                    f"operator interval {phi.interval} at step {k} extends past signal end {n_last}"
                )
        if lo > hi:
            # truncation emptied the candidate range: nothing can witness the until
            return -sem.top()
        candidates = []
        for tau in range(lo, hi + 1):
            right_val = _eval(phi.right, leaves, tau, sem, details)
            # min over the open range (k, tau); empty -> top per convention
            inner = [_eval(phi.left, leaves, tp, sem, details) for tp in range(k + 1, tau)]
            left_val = sem.fmin(inner) if inner else sem.top()
            candidates.append(sem.fmin([right_val, left_val]))
        return sem.fmax(candidates)
    raise InputError(f"unknown formula node {type(phi).__name__}")


def eval_characteristic(
    phi: Formula, leaves: LeafEvaluator, k: int, *, details: EvalDetails | None = None
) -> int:
    """Qualitative value of ``phi`` at step ``k``: +1 (satisfied) or -1."""
    value = _eval(phi, leaves, k, _CharacteristicSemantics(), details or EvalDetails())
    return 1 if value > 0 else -1


def eval_robustness(
    phi: Formula,
    leaves: LeafEvaluator,
    k: int,
    *,
    rho_max: float = RHO_MAX_DEFAULT,
    details: EvalDetails | None = None,
) -> float:
    """Model-free quantitative value of ``phi`` at step ``k``.

    Predicate leaves contribute their raw evaluation-function values;
    connectives and temporal operators combine them with the same
    max/min recursion as the characteristic semantics. Values arising
    from empty index sets are clipped to ``+-rho_max``.
    """
    return _eval(phi, leaves, k, _RobustnessSemantics(rho_max), details or EvalDetails())


def eval_smooth_robustness(
    phi: Formula,
    leaves: LeafEvaluator,
    k: int,
    temperature: float,
    *,
    rho_max: float = RHO_MAX_DEFAULT,
    details: EvalDetails | None = None,
) -> float:
    """Smoothed robustness: log-sum-exp max and its negation-dual min.

    Converges to :func:`eval_robustness` as ``temperature -> 0``; each
    operator node with ``m`` operands deviates by at most
    ``temperature * ln(m)``.
    """
    sem = _SmoothSemantics(rho_max, temperature)
    return _eval(phi, leaves, k, sem, details or EvalDetails())


def smooth_error_bound(phi: Formula, n_steps: int, k: int, temperature: float) -> float:
    """Upper bound on |smooth - exact| from stacking per-node LSE bounds.

    max/min and their softened variants are 1-Lipschitz in the sup norm,
    so node errors add along the recursion.
    """

    def bound(node: Formula, at: int) -> float:
        if isinstance(node, (Predicate, _TrueLeaf)):
            return 0.0
        if isinstance(node, Not):
            return bound(node.child, at)
        if isinstance(node, (And, Or)):
            return temperature * math.log(2) + max(bound(node.left, at), bound(node.right, at))
        if isinstance(node, Eventually):
            return bound(Until(node.interval, _TRUE, node.child), at)
        if isinstance(node, Globally):
            return bound(Until(node.interval, _TRUE, Not(node.child)), at)
        if isinstance(node, Until):
            lo = at + node.interval.lo
            hi = n_steps - 1 if node.interval.hi is None else at + node.interval.hi
            hi = min(hi, n_steps - 1)
            if lo > hi:
                return 0.0
            worst = 0.0
            for tau in range(lo, hi + 1):
                inner_m = max(tau - at - 1, 0)
                err = bound(node.right, tau)
                if inner_m > 0:
                    err = max(err, temperature * math.log(inner_m) + max(
                        bound(node.left, tp) for tp in range(at + 1, tau)
                    ))
                # min over {right, inner} has 2 operands, then the outer max
                worst = max(worst, err + temperature * math.log(2))
            return worst + temperature * math.log(hi - lo + 1)
        raise InputError(f"unknown formula node {type(node).__name__}")

    return bound(phi, k)


# ---------------------------------------------------------------------------
# Parser / printer


_PUNCT = {"(", ")", "[", "]", ",", "!", "&", "|"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in _PUNCT:
            tokens.append(("punct", ch, i))
            i += 1
            continue
        if ch.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            tokens.append(("int", text[i:j], i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        raise FormulaSyntaxError(f"unexpected character {ch!r}", i)
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, registry: Mapping[str, int] | None):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.registry = registry

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str):
        kind, val, at = self.next()
        if val != value:
            raise FormulaSyntaxError(f"expected {value!r}, found {val or 'end of input'!r}", at)

    def parse(self) -> Formula:
        phi = self.parse_or()
        kind, val, at = self.peek()
        if kind != "end":
            raise FormulaSyntaxError(f"unexpected trailing input {val!r}", at)
        return phi

    def parse_or(self) -> Formula:
        phi = self.parse_and()
        while self.peek()[1] == "|":
            self.next()
            phi = Or(phi, self.parse_and())
        return phi

    def parse_and(self) -> Formula:
        phi = self.parse_until()
        while self.peek()[1] == "&":
            self.next()
            phi = And(phi, self.parse_until())
        return phi

    def parse_until(self) -> Formula:
        phi = self.parse_unary()
        kind, val, _ = self.peek()
        if kind == "name" and val == "U":
            self.next()
            interval = self.parse_interval()
            return Until(interval, phi, self.parse_until())
        return phi

    def parse_unary(self) -> Formula:
        kind, val, at = self.peek()
        if val == "!":
            self.next()
            return Not(self.parse_unary())
        if val == "(":
            self.next()
            phi = self.parse_or()
            self.expect(")")
            return phi
        if kind == "name" and val in ("G", "F"):
            self.next()
            interval = self.parse_interval() if self.peek()[1] == "[" else StepInterval(0, None)
            self.expect("(")
            phi = self.parse_or()
            self.expect(")")
            return Globally(interval, phi) if val == "G" else Eventually(interval, phi)
        if kind == "name":
            return self.parse_predicate()
        raise FormulaSyntaxError(f"expected formula, found {val or 'end of input'!r}", at)

    def parse_interval(self) -> StepInterval:
        self.expect("[")
        lo = self.parse_bound(allow_inf=False)
        self.expect(",")
        hi = self.parse_bound(allow_inf=True)
        _, _, at = self.peek()
        self.expect("]")
        try:
            return StepInterval(lo, hi)
        except InputError as exc:
            raise FormulaSyntaxError(str(exc), at) from exc

    def parse_bound(self, allow_inf: bool) -> int | None:
        kind, val, at = self.next()
        if kind == "int":
            return int(val)
        if allow_inf and kind == "name" and val == "inf":
            return None
        raise FormulaSyntaxError(f"expected interval bound, found {val!r}", at)

    def parse_predicate(self) -> Formula:
        kind, name, at = self.next()
        self.expect("(")
        args = []
        if self.peek()[1] != ")":
            while True:
                akind, aval, aat = self.next()
                if akind != "name":
                    raise FormulaSyntaxError(f"expected vehicle id, found {aval!r}", aat)
                args.append(aval)
                if self.peek()[1] == ",":
                    self.next()
                    continue
                break
        self.expect(")")
        if self.registry is not None:
            if name not in self.registry:
                raise UnknownPredicateError(f"unknown predicate {name!r}")
            arity = self.registry[name]
            if len(args) != arity:
                raise InputError(
                    f"predicate {name!r} takes {arity} vehicle argument(s), got {len(args)}"
                )
        return Predicate(name, tuple(args))


def parse_formula(text: str, registry: Mapping[str, int] | None = None) -> Formula:
    """Parse the formula grammar into an AST.

    ``registry`` maps predicate names to arities; when given, unknown
    names and wrong argument counts are rejected.
    """
    return _Parser(text, registry).parse()


def format_formula(phi: Formula) -> str:
    """Canonical text form; ``parse_formula(format_formula(phi)) == phi``."""
    if isinstance(phi, Predicate):
        return f"{phi.name}({','.join(phi.args)})"
    if isinstance(phi, Not):
        return f"!{format_formula(phi.child)}"
    if isinstance(phi, And):
        return f"({format_formula(phi.left)} & {format_formula(phi.right)})"
    if isinstance(phi, Or):
        return f"({format_formula(phi.left)} | {format_formula(phi.right)})"
    if isinstance(phi, Until):
        return f"({format_formula(phi.left)} U{phi.interval} {format_formula(phi.right)})"
    if isinstance(phi, Eventually):
        return f"F{phi.interval}({format_formula(phi.child)})"
    if isinstance(phi, Globally):
        return f"G{phi.interval}({format_formula(phi.child)})"
    raise InputError(f"cannot print formula node {type(phi).__name__}")


def load_rules(path, registry: Mapping[str, int] | None = None) -> dict[str, Formula]:
    """Load named formulas from a rules file (one ``name := formula`` per line)."""
    rules: dict[str, Formula] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":=" not in line:
                raise InputError(f"{path}:{lineno}: expected 'name := formula'")
            name, _, body = line.partition(":=")
            name = name.strip()
            if not name or not name.replace("_", "").isalnum():
                raise InputError(f"{path}:{lineno}: invalid rule name {name!r}")
            if name in rules:
                raise InputError(f"{path}:{lineno}: duplicate rule name {name!r}")
            rules[name] = parse_formula(body.strip(), registry)
    return rules
