"""Formula DSL for additive distributional-parameter predictors.

Each distributional parameter gets one formula.  Grammar (whitespace is
insignificant, offsets in errors are byte positions in the source string)::

    formula    = "~" term { "+" term }
    term       = "1" | "0" | "-1" | ozterm | call | NAME
    ozterm     = call "%OZ%" oztarget
    oztarget   = structured | "(" structured { "+" structured } ")"
    structured = call | NAME
    call       = NAME "(" arg { "," arg } ")"
    arg        = NAME | NAME "=" value
    value      = NAME | NUMBER | STRING

Known call heads and their named arguments:

    s(x, bs=, k=, df=)      one-dimensional smooth ("tp" or "ps" basis)
    te(x, z, ..., k=, df=)  tensor-product smooth
    ti(...)                 treated as te
    lin(x, ...)             explicit linear term
    ridge(x, ..., la=)      L2-penalized linear term
    lasso(x, ..., la=)      L1-penalized linear term (Hoff parameterization)
    offset(x)               fixed offset column

Any other call head is a network term; the head must match a registered
network architecture at build time.  ``%OZ%`` attaches an explicit
orthogonalization target to a network term; the right side is one
structured term or a parenthesized sum of structured terms.

``0`` / ``-1`` drop the intercept, ``1`` forces one.  Without a directive
the intercept is implied.  The intercept appears as an ``Intercept`` term
in the parsed term list; ``0``/``-1`` only clear the flag and leave no term.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields

from .errors import FormulaError

STRUCTURED_HEADS = ("s", "te", "ti", "lin", "ridge", "lasso", "offset")


# ---------------------------------------------------------------------------
# term specifications


@dataclass(frozen=True)
class Intercept:
    pass


@dataclass(frozen=True)
class Linear:
    vars: tuple[str, ...]


@dataclass(frozen=True)
class Ridge:
    vars: tuple[str, ...]
    la: float = 0.0


@dataclass(frozen=True)
class Lasso:
    vars: tuple[str, ...]
    la: float = 0.0


@dataclass(frozen=True)
class Offset:
    var: str


@dataclass(frozen=True)
class Smooth:
    var: str
    basis: str = "tp"
    k: int | None = None
    df: float | None = None


@dataclass(frozen=True)
class TensorSmooth:
    vars: tuple[str, ...]
    k: tuple[int, ...] | None = None
    df: float | None = None


@dataclass(frozen=True)
class NetworkTerm:
    name: str
    vars: tuple[str, ...]


@dataclass(frozen=True)
class Orthogonalized:
    net: NetworkTerm
    against: tuple[object, ...]


TermSpec = (
    Intercept
    | Linear
    | Ridge
    | Lasso
    | Offset
    | Smooth
    | TensorSmooth
    | NetworkTerm
    | Orthogonalized
)

STRUCTURED_KINDS = (Intercept, Linear, Ridge, Lasso, Offset, Smooth, TensorSmooth)


@dataclass(frozen=True)
class ParameterFormula:
    terms: tuple[TermSpec, ...]
    has_intercept: bool
    source: str = field(default="", compare=False)


@dataclass(frozen=True)
class FormulaSet:
    """Ordered formulas plus an optional formula-to-parameter mapping.

    ``mapping[i]`` lists the 1-based distributional-parameter indices the
    i-th formula contributes to.  Without a mapping, formula i feeds
    parameter i+1 and the number of formulas must equal the number of
    parameters.
    """

    names: tuple[str, ...]
    formulas: tuple[ParameterFormula, ...]
    mapping: tuple[tuple[int, ...], ...] | None = None


def term_variables(term: TermSpec) -> tuple[str, ...]:
    """Data columns a term reads (networks included, intercept none)."""
    if isinstance(term, (Linear, Ridge, Lasso, TensorSmooth)):
        return term.vars
    if isinstance(term, Smooth):
        return (term.var,)
    if isinstance(term, Offset):
        return (term.var,)
    if isinstance(term, NetworkTerm):
        return term.vars
    if isinstance(term, Orthogonalized):
        seen = list(term.net.vars)
        for target in term.against:
            for v in term_variables(target):
                if v not in seen:
                    seen.append(v)
        return tuple(seen)
    return ()


# ---------------------------------------------------------------------------
# lexer


class TT:
    NAME = "NAME"
    NUMBER = "NUMBER"
    STRING = "STRING"
    TILDE = "TILDE"
    PLUS = "PLUS"
    MINUS = "MINUS"
    COMMA = "COMMA"
    EQUALS = "EQUALS"
    LPAREN = "LPAREN"
    RPAREN = "RPAREN"
    OZ = "OZ"
    EOF = "EOF"


@dataclass(frozen=True)
class Token:
    type: str
    value: str
    offset: int


_NAME_RE = re.compile(r"[A-Za-z_.][A-Za-z0-9_.]*")
_NUMBER_RE = re.compile(r"\d+(\.\d*)?([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?")

_SINGLE = {
    "~": TT.TILDE,
    "+": TT.PLUS,
    "-": TT.MINUS,
    ",": TT.COMMA,
    "=": TT.EQUALS,
    "(": TT.LPAREN,
    ")": TT.RPAREN,
}


def _lex(src: str) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    n = len(src)
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "%":
            if src.startswith("%OZ%", i):
                tokens.append(Token(TT.OZ, "%OZ%", i))
                i += 4
                continue
            raise FormulaError(f"unknown operator starting with {src[i:i+4]!r}", i)
        if ch in _SINGLE:
            tokens.append(Token(_SINGLE[ch], ch, i))
            i += 1
            continue
        if ch in "\"'":
            j = src.find(ch, i + 1)
            if j < 0:
                raise FormulaError("unterminated string literal", i)
            tokens.append(Token(TT.STRING, src[i + 1 : j], i))
            i = j + 1
            continue
        m = _NUMBER_RE.match(src, i)
        if m:
            tokens.append(Token(TT.NUMBER, m.group(0), i))
            i = m.end()
            continue
        m = _NAME_RE.match(src, i)
        if m:
            tokens.append(Token(TT.NAME, m.group(0), i))
            i = m.end()
            continue
        raise FormulaError(f"unexpected character {ch!r}", i)
    tokens.append(Token(TT.EOF, "", n))
    return tokens


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = _lex(src)
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, ttype: str) -> Token:
        tok = self.next()
        if tok.type != ttype:
            raise FormulaError(f"expected {ttype}, got {tok.value!r}", tok.offset)
        return tok

    # -- entry point --------------------------------------------------------

    def parse(self) -> ParameterFormula:
        self.expect(TT.TILDE)
        raw_terms: list[TermSpec | str] = [self.term()]
        while self.peek().type == TT.PLUS:
            self.next()
            raw_terms.append(self.term())
        tok = self.peek()
        if tok.type != TT.EOF:
            raise FormulaError(f"unexpected token {tok.value!r}", tok.offset)

        directives = [t for t in raw_terms if isinstance(t, str)]
        if len(directives) > 1:
            raise FormulaError("duplicate intercept directive")
        terms: list[TermSpec] = []
        has_intercept = True
        if directives == ["drop"]:
            has_intercept = False
            terms = [t for t in raw_terms if not isinstance(t, str)]
        elif directives == ["keep"]:
            terms = [Intercept() if isinstance(t, str) else t for t in raw_terms]
        else:
            terms = [Intercept()] + [t for t in raw_terms if not isinstance(t, str)]
        return ParameterFormula(tuple(terms), has_intercept, source=self.src)

    # -- grammar rules ------------------------------------------------------

    def term(self) -> TermSpec | str:
        tok = self.peek()
        if tok.type == TT.MINUS:
            self.next()
            num = self.expect(TT.NUMBER)
            if num.value != "1":
                raise FormulaError("'-' is only valid in '-1'", num.offset)
            return "drop"
        if tok.type == TT.NUMBER:
            self.next()
            if tok.value == "1":
                return "keep"
            if tok.value == "0":
                return "drop"
            raise FormulaError(f"bare number {tok.value!r} is not a term", tok.offset)
        base = self.structured_or_call()
        if self.peek().type == TT.OZ:
            oz = self.next()
            if not isinstance(base, NetworkTerm):
                raise FormulaError("left side of %OZ% must be a network term", oz.offset)
            return Orthogonalized(base, tuple(self.oz_target()))
        return base

    def oz_target(self) -> list[TermSpec]:
        if self.peek().type == TT.LPAREN:
            self.next()
            items = [self.oz_item()]
            while self.peek().type == TT.PLUS:
                self.next()
                items.append(self.oz_item())
            self.expect(TT.RPAREN)
            return items
        return [self.oz_item()]

    def oz_item(self) -> TermSpec:
        tok = self.peek()
        item = self.structured_or_call()
        if isinstance(item, (NetworkTerm, Orthogonalized)):
            raise FormulaError("%OZ% target must be a structured term", tok.offset)
        return item

    def structured_or_call(self) -> TermSpec:
        name = self.expect(TT.NAME)
        if self.peek().type != TT.LPAREN:
            return Linear((name.value,))
        self.next()
        pos_args: list[str] = []
        kw_args: dict[str, Token] = {}
        if self.peek().type != TT.RPAREN:
            self.call_arg(pos_args, kw_args, name)
            while self.peek().type == TT.COMMA:
                self.next()
                self.call_arg(pos_args, kw_args, name)
        self.expect(TT.RPAREN)
        return self.build_call(name, pos_args, kw_args)

    def call_arg(self, pos_args: list[str], kw_args: dict[str, Token], head: Token) -> None:
        tok = self.next()
        if tok.type == TT.NAME and self.peek().type == TT.EQUALS:
            self.next()
            val = self.next()
            if val.type not in (TT.NAME, TT.NUMBER, TT.STRING):
                raise FormulaError(f"bad value for argument {tok.value!r}", val.offset)
            if tok.value in kw_args:
                raise FormulaError(f"duplicate argument {tok.value!r}", tok.offset)
            kw_args[tok.value] = val
            return
        if tok.type == TT.NAME:
            pos_args.append(tok.value)
            return
        raise FormulaError(
            f"positional arguments of {head.value}() must be variable names", tok.offset
        )

    def build_call(self, head: Token, pos_args: list[str], kw_args: dict[str, Token]) -> TermSpec:
        name = head.value

        def num(key: str) -> float:
            tok = kw_args[key]
            if tok.type != TT.NUMBER:
                raise FormulaError(f"argument {key!r} must be a number", tok.offset)
            return float(tok.value)

        def check_keys(allowed: tuple[str, ...]):
            for key, tok in kw_args.items():
                if key not in allowed:
                    raise FormulaError(f"unknown argument {key!r} for {name}()", tok.offset)

        def need_vars(count: int | None = None):
            if not pos_args:
                raise FormulaError(f"{name}() needs at least one variable", head.offset)
            if count is not None and len(pos_args) != count:
                raise FormulaError(f"{name}() takes exactly {count} variable(s)", head.offset)

        if name == "s":
            check_keys(("bs", "k", "df"))
            need_vars(1)
            basis = kw_args["bs"].value if "bs" in kw_args else "tp"
            if basis not in ("tp", "ps"):
                raise FormulaError(f"unknown basis {basis!r}", kw_args["bs"].offset)
            k = int(num("k")) if "k" in kw_args else None
            df = num("df") if "df" in kw_args else None
            return Smooth(pos_args[0], basis=basis, k=k, df=df)
        if name in ("te", "ti"):
            check_keys(("k", "df"))
            if len(pos_args) < 2:
                raise FormulaError(f"{name}() needs at least two variables", head.offset)
            k = None
            if "k" in kw_args:
                k = (int(num("k")),) * len(pos_args)
            df = num("df") if "df" in kw_args else None
            return TensorSmooth(tuple(pos_args), k=k, df=df)
        if name == "lin":
            check_keys(())
            need_vars()
            return Linear(tuple(pos_args))
        if name == "ridge":
            check_keys(("la",))
            need_vars()
            return Ridge(tuple(pos_args), la=num("la") if "la" in kw_args else 0.0)
        if name == "lasso":
            check_keys(("la",))
            need_vars()
            return Lasso(tuple(pos_args), la=num("la") if "la" in kw_args else 0.0)
        if name == "offset":
            check_keys(())
            need_vars(1)
            return Offset(pos_args[0])
        # anything else is a network call
        check_keys(())
        need_vars()
        return NetworkTerm(name, tuple(pos_args))


def parse_formula(src: str) -> ParameterFormula:
    """Parse one formula string; raises FormulaError with a byte offset."""
    if not isinstance(src, str):
        raise FormulaError(f"formula must be a string, got {type(src).__name__}")
    return _Parser(src).parse()


# ---------------------------------------------------------------------------
# canonical formatting


def _fmt_num(v: float) -> str:
    if float(v) == int(v):
        return str(int(v))
    return repr(float(v))


def format_term(term: TermSpec) -> str:
    if isinstance(term, Intercept):
        return "1"
    if isinstance(term, Linear):
        if len(term.vars) == 1:
            return term.vars[0]
        return f"lin({', '.join(term.vars)})"
    if isinstance(term, Ridge):
        return f"ridge({', '.join(term.vars)}, la={_fmt_num(term.la)})"
    if isinstance(term, Lasso):
        return f"lasso({', '.join(term.vars)}, la={_fmt_num(term.la)})"
    if isinstance(term, Offset):
        return f"offset({term.var})"
    if isinstance(term, Smooth):
        parts = [term.var, f'bs="{term.basis}"']
        if term.k is not None:
            parts.append(f"k={term.k}")
        if term.df is not None:
            parts.append(f"df={_fmt_num(term.df)}")
        return f"s({', '.join(parts)})"
    if isinstance(term, TensorSmooth):
        parts = list(term.vars)
        if term.k is not None:
            ks = set(term.k)
            if len(ks) != 1:
                raise ValueError("per-margin k values cannot be formatted")
            parts.append(f"k={term.k[0]}")
        if term.df is not None:
            parts.append(f"df={_fmt_num(term.df)}")
        return f"te({', '.join(parts)})"
    if isinstance(term, NetworkTerm):
        return f"{term.name}({', '.join(term.vars)})"
    if isinstance(term, Orthogonalized):
        inner = " + ".join(format_term(t) for t in term.against)
        return f"{format_term(term.net)} %OZ% ({inner})"
    raise TypeError(f"unknown term type {type(term).__name__}")


def canonical_format(formula: ParameterFormula) -> str:
    """Deterministic source form; parse(canonical_format(f)) == f."""
    parts = [format_term(t) for t in formula.terms]
    if not formula.has_intercept:
        parts = ["0"] + parts
    if not parts:
        parts = ["0"]
    return "~ " + " + ".join(parts)


# ---------------------------------------------------------------------------
# overlap detection


def _network_of(term: TermSpec) -> NetworkTerm | None:
    if isinstance(term, NetworkTerm):
        return term
    if isinstance(term, Orthogonalized):
        return term.net
    return None


def detect_overlap(
    formula: ParameterFormula, identify_intercept: bool = False
) -> list[tuple[TermSpec, list[TermSpec]]]:
    """Structured terms sharing input variables with each network term.

    Returns ``(network-bearing term, [overlapping structured terms])``
    pairs, in formula order, for networks with at least one overlap.  With
    ``identify_intercept`` the intercept (when present) counts as
    overlapping for every network.
    """
    structured = [t for t in formula.terms if isinstance(t, STRUCTURED_KINDS) and not isinstance(t, (Offset, Intercept))]
    out: list[tuple[TermSpec, list[TermSpec]]] = []
    for term in formula.terms:
        net = _network_of(term)
        if net is None:
            continue
        overlaps: list[TermSpec] = []
        if identify_intercept and formula.has_intercept:
            overlaps.append(Intercept())
        net_vars = set(net.vars)
        for st in structured:
            if net_vars & set(term_variables(st)):
                overlaps.append(st)
        if overlaps:
            out.append((term, overlaps))
    return out
