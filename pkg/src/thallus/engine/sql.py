"""Parser for the supported SQL subset::

    SELECT cols FROM ident [WHERE ident cmp literal] [LIMIT uint]

``cols`` is ``*`` or a comma-separated identifier list. Keywords are
case-insensitive, strings are single-quoted with ``''`` as the escape, and
error positions are 1-based columns.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from ..errors import ParseError

KEYWORDS = ("SELECT", "FROM", "WHERE", "LIMIT")
COMPARATORS = ("=", "!=", "<", "<=", ">", ">=")

Literal = Union[int, float, str]

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>-?\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|-?\.\d+(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>'(?:[^']|'')*')
  | (?P<op><=|>=|!=|<|>|=)
  | (?P<punct>[*,])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # keyword, ident, number, string, op, punct, eof
    value: object
    pos: int
    text: str = ""


@dataclass(frozen=True)
class Predicate:
    column: str
    op: str
    literal: Literal


@dataclass(frozen=True)
class ParsedQuery:
    projection: tuple[str, ...] | None  # None selects every column
    table: str
    predicate: Predicate | None = None
    limit: int | None = None

    @property
    def select_all(self) -> bool:
        return self.projection is None


def tokenize(sql: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(sql):
        m = _TOKEN.match(sql, pos)
        if m is None:
            if sql[pos] == "'":
                raise ParseError("unterminated string literal", pos + 1)
            raise ParseError(f"unexpected character {sql[pos]!r}", pos + 1)
        kind, text = m.lastgroup, m.group()
        col = pos + 1
        pos = m.end()
        if kind == "ws":
            continue
        if kind == "ident" and text.upper() in KEYWORDS:
            tokens.append(Token("keyword", text.upper(), col, text))
        elif kind == "number":
            is_float = any(c in text for c in ".eE")
            tokens.append(Token("number", float(text) if is_float else int(text), col, text))
        elif kind == "string":
            tokens.append(Token("string", text[1:-1].replace("''", "'"), col, text))
        else:
            tokens.append(Token(kind, text, col, text))
    tokens.append(Token("eof", None, len(sql) + 1, ""))
    return tokens


class _Parser:
    def __init__(self, sql: str):
        self.tokens = tokenize(sql)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def fail(self, expected):
        tok = self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise ParseError(f"unexpected {found}", tok.pos, expected)

    def keyword(self, word: str, required: bool = True) -> bool:
        if self.tok.kind == "keyword" and self.tok.value == word:
            self.i += 1
            return True
        if required:
            self.fail([word])
        return False

    def ident(self, expected=("identifier",)) -> str:
        if self.tok.kind != "ident":
            self.fail(expected)
        name = self.tok.value
        self.i += 1
        return name

    def parse(self) -> ParsedQuery:
        self.keyword("SELECT")
        if self.tok.kind == "punct" and self.tok.value == "*":
            self.i += 1
            projection = None
        else:
            names = [self.ident(("*", "identifier"))]
            while self.tok.kind == "punct" and self.tok.value == ",":
                self.i += 1
                names.append(self.ident())
            projection = tuple(names)
        self.keyword("FROM")
        table = self.ident()

        predicate = None
        if self.keyword("WHERE", required=False):
            column = self.ident()
            if self.tok.kind != "op":
                self.fail(COMPARATORS)
            op = self.tok.value
            self.i += 1
            if self.tok.kind not in ("number", "string"):
                self.fail(["number", "string"])
            predicate = Predicate(column, op, self.tok.value)
            self.i += 1

        limit = None
        if self.keyword("LIMIT", required=False):
            tok = self.tok
            if tok.kind != "number" or not isinstance(tok.value, int) or tok.value < 0 or tok.text.startswith("-"):
                self.fail(["unsigned integer"])
            limit = tok.value
            self.i += 1

        if self.tok.kind != "eof":
            expected = []
            if predicate is None and limit is None:
                expected.append("WHERE")
            if limit is None:
                expected.append("LIMIT")
            self.fail(expected + ["end of input"])
        return ParsedQuery(projection, table, predicate, limit)


def parse_query(sql: str) -> ParsedQuery:
    return _Parser(sql).parse()
