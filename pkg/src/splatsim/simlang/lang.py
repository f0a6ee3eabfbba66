"""Scene-editing script language: lexer, AST, parser, canonical printer.

Scripts are line-oriented sequences of editing statements:

    locate "red cup" nearest to "pressure cooker" as cup
    recolor cup to #00ff00
    simulate cup material (density = 1000, youngs = 1e5, poisson = 0.3) for 2 s
    render frames 0 .. 19 out "shots"

The printer emits a canonical form whose parse equals the original AST
(floats are printed with repr, so round-trips are bit-exact).
"""

from __future__ import annotations

import string
from dataclasses import dataclass

from ..errors import LexError, ParseError

__all__ = [
    "Token",
    "tokenize",
    "Statement",
    "Locate",
    "Remove",
    "Insert",
    "Recolor",
    "Retexture",
    "Move",
    "Resize",
    "Simulate",
    "Refine",
    "Render",
    "parse_program",
    "print_program",
    "print_statement",
]


# ---------------------------------------------------------------------------
# Lexer


KEYWORDS = frozenset(
    [
        "locate", "as", "nearest", "to", "left", "right", "above", "below",
        "of", "remove", "insert", "asset", "at", "scale", "recolor",
        "retexture", "with", "move", "resize", "by", "simulate", "material",
        "density", "youngs", "poisson", "for", "s", "refine", "iters", "off",
        "render", "frames", "camera", "out",
    ]
)

# Token kinds: KEYWORD, IDENT, STRING, NUMBER, COLORHEX, PUNCT, EOF.
PUNCT = ("..", "(", ")", ",", "=")

_HEX = set(string.hexdigits)
_IDENT_START = set(string.ascii_letters + "_")
_IDENT_CONT = _IDENT_START | set(string.digits)
_DIGITS = set(string.digits)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    value: object
    line: int
    col: int

    def __str__(self):
        if self.kind == "EOF":
            return "end of input"
        return "%s '%s'" % (self.kind, self.text)


def _number(src, i, line, col):
    """Lex a number starting at src[i] (a digit, or '-' before a digit)."""
    j = i
    if src[j] == "-":
        j += 1
    while j < len(src) and src[j] in _DIGITS:
        j += 1
    if j < len(src) and src[j] == "." and j + 1 < len(src) and src[j + 1] in _DIGITS:
        j += 1
        while j < len(src) and src[j] in _DIGITS:
            j += 1
    if j < len(src) and src[j] in "eE":
        k = j + 1
        if k < len(src) and src[k] in "+-":
            k += 1
        if k < len(src) and src[k] in _DIGITS:
            j = k
            while j < len(src) and src[j] in _DIGITS:
                j += 1
    text = src[i:j]
    return Token("NUMBER", text, float(text), line, col), j


def _string(src, i, line, col):
    j = i + 1
    out = []
    while j < len(src):
        ch = src[j]
        if ch == "\\" and j + 1 < len(src) and src[j + 1] in ('"', "\\"):
            out.append(src[j + 1])
            j += 2
            continue
        if ch == '"':
            return Token("STRING", src[i : j + 1], "".join(out), line, col), j + 1
        if ch == "\n":
            break
        out.append(ch)
        j += 1
    raise LexError("unterminated string literal", line, col)


def tokenize(src):
    """Tokenize a script; returns a list of Tokens ending with EOF.

    '#' followed by six hex digits is a color literal; any other '#'
    starts a comment running to end of line.  A '-' immediately followed
    by a digit begins a negative number literal.
    """
    tokens = []
    i = 0
    line = 1
    col = 1
    n = len(src)
    while i < n:
        ch = src[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            rest = src[i + 1 : i + 7]
            if len(rest) == 6 and all(c in _HEX for c in rest):
                rgb = tuple(int(rest[k : k + 2], 16) / 255.0 for k in (0, 2, 4))
                tokens.append(Token("COLORHEX", "#" + rest.lower(), rgb, line, col))
                i += 7
                col += 7
                continue
            while i < n and src[i] != "\n":
                i += 1
            continue
        if ch in _DIGITS or (ch == "-" and i + 1 < n and src[i + 1] in _DIGITS):
            tok, j = _number(src, i, line, col)
            tokens.append(tok)
            col += j - i
            i = j
            continue
        if ch == '"':
            tok, j = _string(src, i, line, col)
            tokens.append(tok)
            col += j - i
            i = j
            continue
        if ch in _IDENT_START:
            j = i
            while j < n and src[j] in _IDENT_CONT:
                j += 1
            text = src[i:j]
            kind = "KEYWORD" if text in KEYWORDS else "IDENT"
            tokens.append(Token(kind, text, text, line, col))
            col += j - i
            i = j
            continue
        matched = None
        for p in PUNCT:  # longest first ('..' precedes '.')
            if src.startswith(p, i):
                matched = p
                break
        if matched is not None:
            tokens.append(Token("PUNCT", matched, matched, line, col))
            i += len(matched)
            col += len(matched)
            continue
        raise LexError("unexpected character %r" % ch, line, col)
    tokens.append(Token("EOF", "", None, line, col))
    return tokens


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Statement:
    pass


@dataclass(frozen=True)
class Locate(Statement):
    phrase: str
    binding: str
    relation: str | None = None  # nearest-to | left-of | right-of | above | below
    anchor: str | None = None


@dataclass(frozen=True)
class Remove(Statement):
    target: str


@dataclass(frozen=True)
class Insert(Statement):
    asset_type: str
    attributes: tuple = ()  # ((name, value), ...); value is str, float, or rgb tuple
    position: tuple = (0.0, 0.0, 0.0)
    scale: float | None = None
    binding: str | None = None


@dataclass(frozen=True)
class Recolor(Statement):
    target: str
    color_hex: str  # canonical '#rrggbb'

    @property
    def rgb(self):
        h = self.color_hex[1:]
        return tuple(int(h[k : k + 2], 16) / 255.0 for k in (0, 2, 4))


@dataclass(frozen=True)
class Retexture(Statement):
    target: str
    reference: str


@dataclass(frozen=True)
class Move(Statement):
    target: str
    position: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Resize(Statement):
    target: str
    factor: float = 1.0


@dataclass(frozen=True)
class Simulate(Statement):
    target: str
    density: float = 1000.0
    youngs: float = 1e5
    poisson: float = 0.3
    duration: float = 1.0


@dataclass(frozen=True)
class Refine(Statement):
    iters: float | None = None
    off: bool = False


@dataclass(frozen=True)
class Render(Statement):
    frames: tuple | None = None  # (first, last) inclusive
    camera: str | None = None
    out: str | None = None


# ---------------------------------------------------------------------------
# Parser


_STATEMENT_STARTS = (
    "locate", "remove", "insert", "recolor", "retexture",
    "move", "resize", "simulate", "refine", "render",
)


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    @property
    def cur(self):
        return self.tokens[self.pos]

    def _fail(self, expected):
        tok = self.cur
        raise ParseError(
            "expected %s, found %s" % (" or ".join(sorted(expected)), tok),
            tok.line,
            tok.col,
            expected=expected,
        )

    def advance(self):
        tok = self.cur
        self.pos += 1
        return tok

    def keyword(self, *words):
        tok = self.cur
        if tok.kind == "KEYWORD" and tok.text in words:
            return self.advance()
        self._fail(set("'%s'" % w for w in words))

    def punct(self, text):
        tok = self.cur
        if tok.kind == "PUNCT" and tok.text == text:
            return self.advance()
        self._fail({"'%s'" % text})

    def ident(self):
        tok = self.cur
        if tok.kind == "IDENT":
            return self.advance().value
        self._fail({"identifier"})

    def string(self):
        tok = self.cur
        if tok.kind == "STRING":
            return self.advance().value
        self._fail({"string"})

    def number(self):
        tok = self.cur
        if tok.kind == "NUMBER":
            return self.advance().value
        self._fail({"number"})

    def at_keyword(self, *words):
        tok = self.cur
        return tok.kind == "KEYWORD" and tok.text in words

    def vec3(self):
        self.punct("(")
        x = self.number()
        self.punct(",")
        y = self.number()
        self.punct(",")
        z = self.number()
        self.punct(")")
        return (x, y, z)

    def program(self):
        stmts = []
        bound = set()
        while self.cur.kind != "EOF":
            stmt = self.statement()
            for name in _bindings_of(stmt):
                if name in bound:
                    tok = self.tokens[self.pos - 1]
                    raise ParseError(
                        "identifier '%s' is bound more than once" % name,
                        tok.line,
                        tok.col,
                    )
                bound.add(name)
            stmts.append(stmt)
        return tuple(stmts)

    def statement(self):
        tok = self.cur
        if tok.kind != "KEYWORD" or tok.text not in _STATEMENT_STARTS:
            self._fail(set("'%s'" % w for w in _STATEMENT_STARTS))
        return getattr(self, "_stmt_" + tok.text)()

    def _stmt_locate(self):
        self.keyword("locate")
        phrase = self.string()
        relation = None
        anchor = None
        if self.at_keyword("nearest"):
            self.advance()
            self.keyword("to")
            anchor = self.string()
            relation = "nearest-to"
        elif self.at_keyword("left", "right", "above", "below"):
            word = self.advance().text
            self.keyword("of")
            anchor = self.string()
            relation = {"left": "left-of", "right": "right-of"}.get(word, word)
        self.keyword("as")
        binding = self.ident()
        return Locate(phrase=phrase, binding=binding, relation=relation, anchor=anchor)

    def _stmt_remove(self):
        self.keyword("remove")
        return Remove(target=self.ident())

    def _stmt_insert(self):
        self.keyword("insert")
        self.keyword("asset")
        self.punct("(")
        asset_type = self.string()
        attrs = []
        seen = set()
        while self.cur.kind == "PUNCT" and self.cur.text == ",":
            self.advance()
            name_tok = self.cur
            name = self.ident()
            if name in seen:
                raise ParseError(
                    "duplicate attribute '%s'" % name, name_tok.line, name_tok.col
                )
            seen.add(name)
            self.punct("=")
            attrs.append((name, self._value()))
        self.punct(")")
        self.keyword("at")
        position = self.vec3()
        scale = None
        if self.at_keyword("scale"):
            self.advance()
            scale = self.number()
        binding = None
        if self.at_keyword("as"):
            self.advance()
            binding = self.ident()
        return Insert(
            asset_type=asset_type,
            attributes=tuple(attrs),
            position=position,
            scale=scale,
            binding=binding,
        )

    def _value(self):
        tok = self.cur
        if tok.kind in ("STRING", "NUMBER"):
            return self.advance().value
        if tok.kind == "COLORHEX":
            return self.advance().text
        self._fail({"string", "number", "color"})

    def _stmt_recolor(self):
        self.keyword("recolor")
        target = self.ident()
        self.keyword("to")
        tok = self.cur
        if tok.kind != "COLORHEX":
            self._fail({"color (#rrggbb)"})
        self.advance()
        return Recolor(target=target, color_hex=tok.text)

    def _stmt_retexture(self):
        self.keyword("retexture")
        target = self.ident()
        self.keyword("with")
        return Retexture(target=target, reference=self.string())

    def _stmt_move(self):
        self.keyword("move")
        target = self.ident()
        self.keyword("to")
        return Move(target=target, position=self.vec3())

    def _stmt_resize(self):
        self.keyword("resize")
        target = self.ident()
        self.keyword("by")
        return Resize(target=target, factor=self.number())

    def _stmt_simulate(self):
        self.keyword("simulate")
        target = self.ident()
        self.keyword("material")
        self.punct("(")
        self.keyword("density")
        self.punct("=")
        density = self.number()
        self.punct(",")
        self.keyword("youngs")
        self.punct("=")
        youngs = self.number()
        self.punct(",")
        self.keyword("poisson")
        self.punct("=")
        poisson = self.number()
        self.punct(")")
        self.keyword("for")
        duration = self.number()
        self.keyword("s")
        return Simulate(
            target=target,
            density=density,
            youngs=youngs,
            poisson=poisson,
            duration=duration,
        )

    def _stmt_refine(self):
        self.keyword("refine")
        if self.at_keyword("iters"):
            self.advance()
            return Refine(iters=self.number())
        if self.at_keyword("off"):
            self.advance()
            return Refine(off=True)
        return Refine()

    def _stmt_render(self):
        self.keyword("render")
        frames = None
        camera = None
        out = None
        if self.at_keyword("frames"):
            self.advance()
            first = self.number()
            self.punct("..")
            last = self.number()
            frames = (first, last)
        if self.at_keyword("camera"):
            self.advance()
            camera = self.string()
        if self.at_keyword("out"):
            self.advance()
            out = self.string()
        return Render(frames=frames, camera=camera, out=out)


def _bindings_of(stmt):
    if isinstance(stmt, Locate):
        return (stmt.binding,)
    if isinstance(stmt, Insert) and stmt.binding is not None:
        return (stmt.binding,)
    return ()


def parse_program(src):
    """Parse a script into a tuple of Statement nodes.

    Raises LexError or ParseError with 1-based line/column positions.
    Binding the same identifier twice within one program is rejected.
    """
    return _Parser(tokenize(src)).program()


# ---------------------------------------------------------------------------
# Canonical printer


def _pstr(s):
    return '"%s"' % s.replace("\\", "\\\\").replace('"', '\\"')


def _pvalue(v):
    if isinstance(v, str):
        return _pstr(v) if not v.startswith("#") else v
    return repr(float(v))


def _pvec(v):
    return "(%s, %s, %s)" % tuple(repr(float(c)) for c in v)


def print_statement(stmt):
    """Render one statement in canonical form (parse of which equals stmt)."""
    if isinstance(stmt, Locate):
        rel = ""
        if stmt.relation == "nearest-to":
            rel = " nearest to %s" % _pstr(stmt.anchor)
        elif stmt.relation is not None:
            word = {"left-of": "left", "right-of": "right"}.get(
                stmt.relation, stmt.relation
            )
            rel = " %s of %s" % (word, _pstr(stmt.anchor))
        return "locate %s%s as %s" % (_pstr(stmt.phrase), rel, stmt.binding)
    if isinstance(stmt, Remove):
        return "remove %s" % stmt.target
    if isinstance(stmt, Insert):
        parts = [_pstr(stmt.asset_type)]
        parts += ["%s = %s" % (k, _pvalue(v)) for k, v in stmt.attributes]
        text = "insert asset(%s) at %s" % (", ".join(parts), _pvec(stmt.position))
        if stmt.scale is not None:
            text += " scale %s" % repr(float(stmt.scale))
        if stmt.binding is not None:
            text += " as %s" % stmt.binding
        return text
    if isinstance(stmt, Recolor):
        return "recolor %s to %s" % (stmt.target, stmt.color_hex)
    if isinstance(stmt, Retexture):
        return "retexture %s with %s" % (stmt.target, _pstr(stmt.reference))
    if isinstance(stmt, Move):
        return "move %s to %s" % (stmt.target, _pvec(stmt.position))
    if isinstance(stmt, Resize):
        return "resize %s by %s" % (stmt.target, repr(float(stmt.factor)))
    if isinstance(stmt, Simulate):
        return (
            "simulate %s material (density = %s, youngs = %s, poisson = %s) for %s s"
            % (
                stmt.target,
                repr(float(stmt.density)),
                repr(float(stmt.youngs)),
                repr(float(stmt.poisson)),
                repr(float(stmt.duration)),
            )
        )
    if isinstance(stmt, Refine):
        if stmt.off:
            return "refine off"
        if stmt.iters is not None:
            return "refine iters %s" % repr(float(stmt.iters))
        return "refine"
    if isinstance(stmt, Render):
        text = "render"
        if stmt.frames is not None:
            text += " frames %s .. %s" % tuple(repr(float(f)) for f in stmt.frames)
        if stmt.camera is not None:
            text += " camera %s" % _pstr(stmt.camera)
        if stmt.out is not None:
            text += " out %s" % _pstr(stmt.out)
        return text
    raise TypeError("not a statement: %r" % (stmt,))


def print_program(stmts):
    """Render a program in canonical form; parse(print(p)) == p."""
    return "\n".join(print_statement(s) for s in stmts) + "\n"
