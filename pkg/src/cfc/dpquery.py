"""SQL-subset DP query language.

Grammar (keywords case-insensitive, ``--`` comments ignored)::

    query     := SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS '(' option {',' option} ')'
                 item {',' item} [','] FROM ident GROUP BY ident {',' ident} [';']
    option    := ident '=' number
    item      := ident
               | SUM '(' ident ')' [hint] AS ident
               | COUNT '(' '*' ')' [hint] AS ident
    hint      := '@' '{' ident '=' number {',' ident '=' number} '}'

Anything outside this grammar is rejected.  :func:`lower` turns the AST into
a :class:`DpQueryConfig`; COUNT becomes a SUM over an implicit all-ones
column.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .errors import AdmissionDenied, QuerySemanticError, QuerySyntaxError

KEYWORDS = {"SELECT", "WITH", "DIFFERENTIAL_PRIVACY", "OPTIONS", "AS", "FROM", "GROUP", "BY", "SUM", "COUNT"}
ONES_COLUMN = "__ones__"

OPTION_NAMES = ("epsilon", "delta", "max_groups_contributed")
HINT_NAMES = {"L_INF": "l_inf", "L_1": "l_1", "L_2": "l_2"}

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>--[^\n]*)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),=@{}*;])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # KEYWORD, IDENT, NUMBER, PUNCT, EOF
    text: str
    line: int
    column: int

    @property
    def upper(self) -> str:
        return self.text.upper()


def tokenize(src: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        col = pos - line_start + 1
        if m is None:
            raise QuerySyntaxError("unexpected character", line, col, src[pos])
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "number":
            tokens.append(Token("NUMBER", text, line, col))
        elif kind == "ident":
            tokens.append(Token("KEYWORD" if text.upper() in KEYWORDS else "IDENT", text, line, col))
        elif kind == "punct":
            tokens.append(Token("PUNCT", text, line, col))
        pos = m.end()
    tokens.append(Token("EOF", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Number:
    text: str

    @property
    def value(self) -> float:
        return float(self.text)


@dataclass(frozen=True)
class Setting:
    name: str
    value: Number


@dataclass(frozen=True)
class ColumnRef:
    name: str


@dataclass(frozen=True)
class Aggregate:
    func: str             # "SUM" or "COUNT"
    column: str | None    # None for COUNT(*)
    hints: tuple[Setting, ...]
    alias: str


@dataclass(frozen=True)
class Query:
    options: tuple[Setting, ...]
    items: tuple[ColumnRef | Aggregate, ...]
    source_table: str
    group_by: tuple[str, ...]


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def _fail(self, msg: str, tok: Token | None = None):
        t = tok or self.tok
        raise QuerySyntaxError(msg, t.line, t.column, t.text or "<end of input>")

    def _advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def _is_kw(self, word: str) -> bool:
        return self.tok.kind == "KEYWORD" and self.tok.upper == word

    def _is_punct(self, ch: str) -> bool:
        return self.tok.kind == "PUNCT" and self.tok.text == ch

    def expect_kw(self, word: str) -> Token:
        if not self._is_kw(word):
            self._fail(f"expected {word}")
        return self._advance()

    def expect_punct(self, ch: str) -> Token:
        if not self._is_punct(ch):
            self._fail(f"expected {ch!r}")
        return self._advance()

    def ident(self) -> str:
        if self.tok.kind != "IDENT":
            self._fail("expected identifier")
        return self._advance().text

    def number(self) -> Number:
        if self.tok.kind != "NUMBER":
            self._fail("expected number")
        return Number(self._advance().text)

    def setting(self) -> Setting:
        name = self.ident()
        self.expect_punct("=")
        return Setting(name, self.number())

    def query(self) -> Query:
        select = self.expect_kw("SELECT")
        # a missing options clause is reported at the SELECT it belongs to
        for word in ("WITH", "DIFFERENTIAL_PRIVACY", "OPTIONS"):
            if not self._is_kw(word):
                self._fail("SELECT must be followed by WITH DIFFERENTIAL_PRIVACY OPTIONS (...)", select)
            self._advance()
        self.expect_punct("(")
        options = [self.setting()]
        while self._is_punct(","):
            self._advance()
            options.append(self.setting())
        self.expect_punct(")")

        items = [self.item()]
        while self._is_punct(","):
            self._advance()
            if self._is_kw("FROM"):  # trailing comma before FROM
                break
            items.append(self.item())
        self.expect_kw("FROM")
        table = self.ident()
        self.expect_kw("GROUP")
        self.expect_kw("BY")
        group = [self.ident()]
        while self._is_punct(","):
            self._advance()
            group.append(self.ident())
        if self._is_punct(";"):
            self._advance()
        if self.tok.kind != "EOF":
            self._fail("unexpected trailing input")
        return Query(tuple(options), tuple(items), table, tuple(group))

    def item(self) -> ColumnRef | Aggregate:
        if self._is_kw("SUM"):
            self._advance()
            self.expect_punct("(")
            col = self.ident()
            self.expect_punct(")")
            func = "SUM"
        elif self._is_kw("COUNT"):
            self._advance()
            self.expect_punct("(")
            self.expect_punct("*")
            self.expect_punct(")")
            col, func = None, "COUNT"
        elif self.tok.kind == "IDENT":
            return ColumnRef(self._advance().text)
        else:
            self._fail("expected a column or SUM/COUNT aggregate")
        hints: list[Setting] = []
        if self._is_punct("@"):
            self._advance()
            self.expect_punct("{")
            hints.append(self.setting())
            while self._is_punct(","):
                self._advance()
                hints.append(self.setting())
            self.expect_punct("}")
        self.expect_kw("AS")
        return Aggregate(func, col, tuple(hints), self.ident())


def parse(q: str) -> Query:
    return _Parser(tokenize(q)).query()


def _fmt_settings(settings: tuple[Setting, ...]) -> str:
    return ", ".join(f"{s.name} = {s.value.text}" for s in settings)


def format_query(ast: Query) -> str:
    """Render an AST back to query text; ``parse(format_query(a)) == a``."""
    items = []
    for it in ast.items:
        if isinstance(it, ColumnRef):
            items.append(it.name)
            continue
        arg = "*" if it.func == "COUNT" else it.column
        hint = f" @{{{_fmt_settings(it.hints)}}}" if it.hints else ""
        items.append(f"{it.func}({arg}){hint} AS {it.alias}")
    return (
        "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS\n"
        f"    ({_fmt_settings(ast.options)})\n  "
        + ",\n  ".join(items)
        + f"\nFROM\n  {ast.source_table}\nGROUP BY\n  {', '.join(ast.group_by)};\n"
    )


# ---------------------------------------------------------------------------
# Lowering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Aggregation:
    input_column: str
    output_name: str
    l_inf: float
    l_1: float | None = None
    l_2: float | None = None

    def to_dict(self) -> dict:
        d = {"input_column": self.input_column, "output_name": self.output_name, "l_inf": self.l_inf}
        if self.l_1 is not None:
            d["l_1"] = self.l_1
        if self.l_2 is not None:
            d["l_2"] = self.l_2
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Aggregation":
        return cls(d["input_column"], d["output_name"], float(d["l_inf"]),
                   None if d.get("l_1") is None else float(d["l_1"]),
                   None if d.get("l_2") is None else float(d["l_2"]))


@dataclass(frozen=True)
class DpQueryConfig:
    epsilon: float
    delta: float
    max_groups_contributed: int
    key_columns: tuple[str, ...]
    aggregations: tuple[Aggregation, ...]
    source_table: str = ""

    def __post_init__(self):
        check_config(self)

    def get(self, name: str, default=None):
        """Mapping-style access used by policy edge matching."""
        return getattr(self, name, default)

    @property
    def value_columns(self) -> tuple[str, ...]:
        return tuple(a.input_column for a in self.aggregations)

    def to_dict(self) -> dict:
        return {
            "kind": "phh",
            "epsilon": self.epsilon,
            "delta": self.delta,
            "max_groups_contributed": self.max_groups_contributed,
            "key_columns": list(self.key_columns),
            "aggregations": [a.to_dict() for a in self.aggregations],
            "source_table": self.source_table,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DpQueryConfig":
        return cls(
            epsilon=float(d["epsilon"]),
            delta=float(d["delta"]),
            max_groups_contributed=int(d["max_groups_contributed"]),
            key_columns=tuple(d["key_columns"]),
            aggregations=tuple(Aggregation.from_dict(a) for a in d["aggregations"]),
            source_table=d.get("source_table", ""),
        )


def check_config(cfg: DpQueryConfig) -> None:
    if not (math.isfinite(cfg.epsilon) and cfg.epsilon > 0):
        raise QuerySemanticError("epsilon must be > 0")
    if not 0 < cfg.delta < 1:
        raise QuerySemanticError("delta must lie in (0, 1)")
    if cfg.max_groups_contributed < 1:
        raise QuerySemanticError("max_groups_contributed must be >= 1")
    if not cfg.aggregations:
        raise QuerySemanticError("query has no aggregation")
    for a in cfg.aggregations:
        for name in ("l_inf", "l_1", "l_2"):
            v = getattr(a, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise QuerySemanticError(f"{a.output_name}: {name} must be positive")
        if a.l_1 is not None and a.l_1 < a.l_inf:
            raise QuerySemanticError(f"{a.output_name}: L_1 = {a.l_1} is tighter than L_inf = {a.l_inf}")
        if a.l_2 is not None and a.l_2 < a.l_inf:
            raise QuerySemanticError(f"{a.output_name}: L_2 = {a.l_2} is tighter than L_inf = {a.l_inf}")


def lower(ast: Query) -> DpQueryConfig:
    opts: dict[str, Number] = {}
    for s in ast.options:
        name = s.name.lower()
        if name not in OPTION_NAMES:
            raise QuerySemanticError(f"unknown option {s.name}")
        if name in opts:
            raise QuerySemanticError(f"duplicate option {s.name}")
        opts[name] = s.value
    missing = [n for n in OPTION_NAMES if n not in opts]
    if missing:
        raise QuerySemanticError(f"missing option(s) {', '.join(missing)}")
    l0 = opts["max_groups_contributed"].value
    if not l0.is_integer():
        raise QuerySemanticError("max_groups_contributed must be an integer")

    group = ast.group_by
    if len(set(group)) != len(group):
        raise QuerySemanticError("duplicate GROUP BY column")
    aggs: list[Aggregation] = []
    outputs: set[str] = set()
    for it in ast.items:
        if isinstance(it, ColumnRef):
            if it.name not in group:
                raise QuerySemanticError(f"column {it.name} is neither aggregated nor in GROUP BY")
            continue
        if it.column is not None and it.column in group:
            raise QuerySemanticError(f"GROUP BY column {it.column} is also aggregated")
        if it.alias in outputs or it.alias in group:
            raise QuerySemanticError(f"duplicate output name {it.alias}")
        outputs.add(it.alias)
        bounds: dict[str, float] = {}
        for h in it.hints:
            key = HINT_NAMES.get(h.name.upper())
            if key is None:
                raise QuerySemanticError(f"unknown hint {h.name}")
            if key in bounds:
                raise QuerySemanticError(f"duplicate hint {h.name}")
            if not h.value.value > 0:
                raise QuerySemanticError(f"hint {h.name} must be positive")
            bounds[key] = h.value.value
        if "l_inf" not in bounds:
            raise QuerySemanticError(f"aggregate {it.alias} lacks an L_inf hint")
        aggs.append(Aggregation(it.column if it.func == "SUM" else ONES_COLUMN, it.alias,
                                bounds["l_inf"], bounds.get("l_1"), bounds.get("l_2")))
    return DpQueryConfig(
        epsilon=opts["epsilon"].value,
        delta=opts["delta"].value,
        max_groups_contributed=int(l0),
        key_columns=tuple(group),
        aggregations=tuple(aggs),
        source_table=ast.source_table,
    )


def compile_query(text: str) -> DpQueryConfig:
    return lower(parse(text))


def admit(config, edge) -> None:
    """Raise :class:`AdmissionDenied` unless ``edge`` permits the budget."""
    eps_max, delta_max = edge.epsilon_max, edge.delta_max
    if eps_max is None or not config.epsilon <= eps_max:
        raise AdmissionDenied("epsilon", f"epsilon={config.epsilon} not <= epsilon_max={eps_max}")
    if delta_max is None or not config.delta <= delta_max:
        raise AdmissionDenied("delta", f"delta={config.delta} not <= delta_max={delta_max}")
