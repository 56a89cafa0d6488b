"""Indentation-based mini language: lexer, recursive-descent parser, AST.

Grammar (four-space indentation):

    program  = funcdef+
    funcdef  = "def" IDENT "(" [IDENT {"," IDENT}] ")" ":" body
    stmt     = assign | if | while | return | exprstmt
    assign   = IDENT "=" expr
    if       = "if" expr ":" block ["else" ":" block]
    while    = "while" expr ":" block
    return   = "return" [expr]
    expr     = literal | IDENT | call | expr binop expr
    call     = IDENT "(" [expr {"," expr}] ")"
    binop    = + - * / < > <= >= == !=

Comparison binds loosest, then +/-, then */. Each statement occupies one
line; every AST node keeps the exact source slice it covers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class ParseError(Exception):
    """Syntax error carrying the 1-based source line it occurred on."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


KEYWORDS = {"def", "if", "else", "while", "return"}

_TOKEN_RE = re.compile(
    r"(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<number>\d+(?:\.\d+)?)"
    r"|(?P<op>==|!=|<=|>=|[-+*/<>=():,])"
)

COMPARE_OPS = {"<", ">", "<=", ">=", "==", "!="}
ADD_OPS = {"+", "-"}
MUL_OPS = {"*", "/"}


@dataclass
class Token:
    kind: str  # ident | number | op | keyword
    text: str
    line: int
    start: int  # offset within the line
    end: int


@dataclass
class Line:
    number: int
    indent: int  # indentation level in units of four spaces
    text: str
    tokens: list[Token]


@dataclass
class AstNode:
    """One mini-language AST node.

    `children` is the canonical ordered child list; the typed fields
    (cond, body, args, ...) are views into it for convenient traversal.
    """

    kind: str  # FuncDef Assign If While Call Return BinOp Name Number Param
    text: str
    line: int
    children: list["AstNode"] = field(default_factory=list)
    name: str = ""
    op: str = ""
    target: str = ""
    cond: "AstNode | None" = None
    value: "AstNode | None" = None
    params: list["AstNode"] = field(default_factory=list)
    body: list["AstNode"] = field(default_factory=list)
    then_body: list["AstNode"] = field(default_factory=list)
    else_body: list["AstNode"] = field(default_factory=list)
    args: list["AstNode"] = field(default_factory=list)


def _lex_line(text: str, number: int) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    while pos < len(text):
        ch = text[pos]
        if ch == " ":
            pos += 1
            continue
        if ch == "\t":
            raise ParseError(number, "tabs are not allowed")
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(number, f"unexpected character {ch!r}")
        kind = m.lastgroup
        value = m.group()
        if kind == "ident" and value in KEYWORDS:
            kind = "keyword"
        tokens.append(Token(kind, value, number, m.start(), m.end()))
        pos = m.end()
    return tokens


def _split_lines(source: str) -> list[Line]:
    lines: list[Line] = []
    for i, raw in enumerate(source.split("\n"), start=1):
        if not raw.strip():
            continue
        stripped = raw.lstrip(" ")
        if stripped.startswith("\t") or "\t" in raw[: len(raw) - len(stripped)]:
            raise ParseError(i, "tabs are not allowed in indentation")
        spaces = len(raw) - len(stripped)
        if spaces % 4 != 0:
            raise ParseError(i, f"indentation must be a multiple of four spaces, got {spaces}")
        tokens = _lex_line(raw, i)
        lines.append(Line(i, spaces // 4, raw, tokens))
    return lines


class _ExprParser:
    """Pratt-free precedence climbing over one line's token list."""

    def __init__(self, line: Line, pos: int = 0):
        self.line = line
        self.tokens = line.tokens
        self.pos = pos

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> Token:
        tok = self.peek()
        if tok is None:
            raise ParseError(self.line.number, "unexpected end of line")
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.next()
        if tok.text != text:
            raise ParseError(self.line.number, f"expected {text!r}, got {tok.text!r}")
        return tok

    def parse_expr(self) -> AstNode:
        return self._binary(0)

    _LEVELS = (COMPARE_OPS, ADD_OPS, MUL_OPS)

    def _binary(self, level: int) -> AstNode:
        if level >= len(self._LEVELS):
            return self._atom()
        node = self._binary(level + 1)
        while True:
            tok = self.peek()
            if tok is None or tok.kind != "op" or tok.text not in self._LEVELS[level]:
                return node
            self.next()
            right = self._binary(level + 1)
            start = self._tok_at(node)
            text = self.line.text[start:self._end_of(right)]
            node = AstNode(
                "BinOp", text, self.line.number, children=[node, right], op=tok.text
            )
            node._span = (start, self._end_of(right))  # type: ignore[attr-defined]

    def _atom(self) -> AstNode:
        tok = self.next()
        if tok.kind == "number":
            node = AstNode("Number", tok.text, tok.line, name=tok.text)
            node._span = (tok.start, tok.end)  # type: ignore[attr-defined]
            return node
        if tok.kind == "ident":
            nxt = self.peek()
            if nxt is not None and nxt.text == "(":
                return self._call(tok)
            node = AstNode("Name", tok.text, tok.line, name=tok.text)
            node._span = (tok.start, tok.end)  # type: ignore[attr-defined]
            return node
        raise ParseError(self.line.number, f"unexpected token {tok.text!r} in expression")

    def _call(self, name_tok: Token) -> AstNode:
        self.expect("(")
        args: list[AstNode] = []
        tok = self.peek()
        if tok is not None and tok.text == ")":
            end_tok = self.next()
        else:
            while True:
                args.append(self.parse_expr())
                tok = self.next()
                if tok.text == ")":
                    end_tok = tok
                    break
                if tok.text != ",":
                    raise ParseError(self.line.number, f"expected ',' or ')', got {tok.text!r}")
        text = self.line.text[name_tok.start:end_tok.end]
        node = AstNode(
            "Call", text, name_tok.line, children=list(args), name=name_tok.text, args=args
        )
        node._span = (name_tok.start, end_tok.end)  # type: ignore[attr-defined]
        return node

    @staticmethod
    def _tok_at(node: AstNode) -> int:
        return node._span[0]  # type: ignore[attr-defined]

    @staticmethod
    def _end_of(node: AstNode) -> int:
        return node._span[1]  # type: ignore[attr-defined]


class _Parser:
    def __init__(self, lines: list[Line]):
        self.lines = lines
        self.pos = 0

    def peek(self) -> Line | None:
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def _funcdef(self) -> AstNode:
        line = self.lines[self.pos]
        self.pos += 1
        p = _ExprParser(line)
        kw = p.next()
        if kw.text != "def":
            raise ParseError(line.number, f"expected 'def', got {kw.text!r}")
        name = p.next()
        if name.kind != "ident":
            raise ParseError(line.number, f"expected function name, got {name.text!r}")
        p.expect("(")
        params: list[AstNode] = []
        tok = p.next()
        if tok.text != ")":
            while True:
                if tok.kind != "ident":
                    raise ParseError(line.number, f"expected parameter name, got {tok.text!r}")
                params.append(AstNode("Param", tok.text, line.number, name=tok.text))
                tok = p.next()
                if tok.text == ")":
                    break
                if tok.text != ",":
                    raise ParseError(line.number, f"expected ',' or ')', got {tok.text!r}")
                tok = p.next()
        p.expect(":")
        if p.peek() is not None:
            raise ParseError(line.number, f"unexpected token {p.peek().text!r} after ':'")
        body = self._block(1)
        node = AstNode(
            "FuncDef",
            line.text.strip(),
            line.number,
            children=params + body,
            name=name.text,
            params=params,
            body=body,
        )
        return node

    def _block(self, indent: int) -> list[AstNode]:
        stmts: list[AstNode] = []
        while True:
            line = self.peek()
            if line is None or line.indent < indent:
                return stmts
            if line.indent > indent:
                raise ParseError(line.number, "unexpected indentation")
            stmts.append(self._stmt(indent))

    def _stmt(self, indent: int) -> AstNode:
        line = self.lines[self.pos]
        self.pos += 1
        toks = line.tokens
        first = toks[0]
        if first.text == "if":
            return self._if_stmt(line, indent)
        if first.text == "while":
            return self._while_stmt(line, indent)
        if first.text == "return":
            return self._return_stmt(line)
        if first.text in ("def", "else"):
            raise ParseError(line.number, f"unexpected {first.text!r}")
        if first.kind == "ident" and len(toks) > 1 and toks[1].text == "=":
            return self._assign_stmt(line)
        return self._expr_stmt(line)

    def _end_check(self, p: _ExprParser, line: Line) -> None:
        if p.peek() is not None:
            raise ParseError(line.number, f"unexpected token {p.peek().text!r}")

    def _assign_stmt(self, line: Line) -> AstNode:
        p = _ExprParser(line)
        name_tok = p.next()
        p.expect("=")
        value = p.parse_expr()
        self._end_check(p, line)
        target = AstNode("Name", name_tok.text, line.number, name=name_tok.text)
        return AstNode(
            "Assign",
            line.text.strip(),
            line.number,
            children=[target, value],
            target=name_tok.text,
            value=value,
        )

    def _expr_stmt(self, line: Line) -> AstNode:
        p = _ExprParser(line)
        expr = p.parse_expr()
        self._end_check(p, line)
        # The expression node itself is the statement; statement-hood is
        # recorded by the graph builder, not the AST.
        return expr

    def _return_stmt(self, line: Line) -> AstNode:
        p = _ExprParser(line)
        p.next()  # 'return'
        value = None
        if p.peek() is not None:
            value = p.parse_expr()
            self._end_check(p, line)
        children = [value] if value is not None else []
        return AstNode(
            "Return", line.text.strip(), line.number, children=children, value=value
        )

    def _cond_and_block(self, line: Line, indent: int, keyword: str):
        p = _ExprParser(line)
        p.next()  # keyword
        cond = p.parse_expr()
        p.expect(":")
        self._end_check(p, line)
        body = self._block(indent + 1)
        if not body:
            raise ParseError(line.number, f"{keyword} body must not be empty")
        return cond, body

    def _if_stmt(self, line: Line, indent: int) -> AstNode:
        cond, then_body = self._cond_and_block(line, indent, "if")
        else_body: list[AstNode] = []
        nxt = self.peek()
        if (
            nxt is not None
            and nxt.indent == indent
            and nxt.tokens
            and nxt.tokens[0].text == "else"
        ):
            self.pos += 1
            p = _ExprParser(nxt)
            p.next()
            p.expect(":")
            self._end_check(p, nxt)
            else_body = self._block(indent + 1)
            if not else_body:
                raise ParseError(nxt.number, "else body must not be empty")
        return AstNode(
            "If",
            line.text.strip(),
            line.number,
            children=[cond] + then_body + else_body,
            cond=cond,
            then_body=then_body,
            else_body=else_body,
        )

    def _while_stmt(self, line: Line, indent: int) -> AstNode:
        cond, body = self._cond_and_block(line, indent, "while")
        return AstNode(
            "While",
            line.text.strip(),
            line.number,
            children=[cond] + body,
            cond=cond,
            body=body,
        )


def parse(source: str) -> list[AstNode]:
    """Parse a program into its list of function definitions.

    Function bodies may be empty (the enclosing block simply ends), which
    keeps degenerate single-function sources representable.
    """
    lines = _split_lines(source)
    if not lines:
        raise ParseError(1, "empty program")
    parser = _Parser(lines)
    funcs: list[AstNode] = []
    while parser.peek() is not None:
        line = parser.peek()
        if line.indent != 0:
            raise ParseError(line.number, "top level must not be indented")
        funcs.append(parser._funcdef())
    return funcs


def parse_function(source: str, name: str | None = None) -> AstNode:
    """Parse and return one function: the named one, or the first."""
    funcs = parse(source)
    if name is None:
        return funcs[0]
    for f in funcs:
        if f.name == name:
            return f
    raise ParseError(1, f"no function named {name!r}")
