# processing/expr.py
"""
Expression language for system definitions

Grammar (standard precedence, '^' right-associative, unary minus binding
looser than '^' so that "-2^2" is -4):

    expr    := term (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := '-' factor | power
    power   := primary ('^' factor)?
    primary := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Expressions evaluate on numpy arrays, so a single call evaluates a whole time
grid or a whole batch of states. `compile_expr` turns an AST into a numpy
lambda for inner integration loops.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from core.errors import ParseError

FUNCTIONS: Dict[str, Callable] = {
    "exp": np.exp,
    "ln": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
}

BINARY_OPS: Dict[str, Callable] = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
    "^": np.power,
}


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

class Expr:
    """Base AST node"""

    def evaluate(self, env: Mapping[str, object]):
        raise NotImplementedError

    def to_source(self) -> str:
        raise NotImplementedError

    def variables(self) -> FrozenSet[str]:
        raise NotImplementedError

    def __str__(self) -> str:
        return self.to_source()


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def evaluate(self, env):
        return self.value

    def to_source(self) -> str:
        text = repr(float(self.value))
        return f"({text})" if math.copysign(1.0, self.value) < 0 else text

    def variables(self):
        return frozenset()


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def evaluate(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise KeyError(f"no value bound for variable '{self.name}'") from None

    def to_source(self) -> str:
        return self.name

    def variables(self):
        return frozenset([self.name])


@dataclass(frozen=True)
class Neg(Expr):
    operand: Expr

    def evaluate(self, env):
        return np.negative(self.operand.evaluate(env))

    def to_source(self) -> str:
        return f"(-{self.operand.to_source()})"

    def variables(self):
        return self.operand.variables()


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def evaluate(self, env):
        left = self.left.evaluate(env)
        right = self.right.evaluate(env)
        if self.op == "^":
            return np.power(np.asarray(left, dtype=float), right)
        return BINARY_OPS[self.op](left, right)

    def to_source(self) -> str:
        return f"({self.left.to_source()} {self.op} {self.right.to_source()})"

    def variables(self):
        return self.left.variables() | self.right.variables()


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr

    def evaluate(self, env):
        return FUNCTIONS[self.func](self.arg.evaluate(env))

    def to_source(self) -> str:
        return f"{self.func}({self.arg.to_source()})"

    def variables(self):
        return self.arg.variables()


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str       # NUMBER, NAME, OP, LPAREN, RPAREN, EOF
    text: str
    offset: int


def tokenize(source: str) -> List[Token]:
    """Split source into positioned tokens; offsets are byte offsets"""
    data = source.encode("utf-8")
    tokens: List[Token] = []
    pos = 0
    while pos < len(data):
        ch = chr(data[pos])
        if data[pos] >= 0x80:
            raise ParseError(f"unexpected non-ASCII byte 0x{data[pos]:02x}", pos, source=source)
        if ch.isspace():
            pos += 1
            continue
        if ch.isdigit() or (ch == "." and pos + 1 < len(data) and chr(data[pos + 1]).isdigit()):
            start = pos
            while pos < len(data) and (chr(data[pos]).isdigit() or chr(data[pos]) == "."):
                pos += 1
            if pos < len(data) and chr(data[pos]) in "eE":
                look = pos + 1
                if look < len(data) and chr(data[look]) in "+-":
                    look += 1
                if look < len(data) and chr(data[look]).isdigit():
                    pos = look
                    while pos < len(data) and chr(data[pos]).isdigit():
                        pos += 1
            text = data[start:pos].decode()
            try:
                value = float(text)
            except ValueError:
                raise ParseError(f"malformed number '{text}'", start, source=source) from None
            if not math.isfinite(value):
                raise ParseError(f"number '{text}' overflows a float", start, source=source)
            tokens.append(Token("NUMBER", text, start))
            continue
        if ch.isalpha() or ch == "_":
            start = pos
            while pos < len(data) and (chr(data[pos]).isalnum() or chr(data[pos]) == "_"):
                pos += 1
            tokens.append(Token("NAME", data[start:pos].decode(), start))
            continue
        if ch in "+-*/^":
            tokens.append(Token("OP", ch, pos))
        elif ch == "(":
            tokens.append(Token("LPAREN", ch, pos))
        elif ch == ")":
            tokens.append(Token("RPAREN", ch, pos))
        else:
            raise ParseError(f"unexpected character '{ch}'", pos, source=source)
        pos += 1
    tokens.append(Token("EOF", "", len(data)))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class Parser:
    """Recursive-descent parser over a token list"""

    def __init__(self, source: str, allowed: Optional[Iterable[str]] = None):
        self.source = source
        self.tokens = tokenize(source)
        self.current = 0
        self.allowed = frozenset(allowed) if allowed is not None else None

    def peek(self) -> Token:
        return self.tokens[self.current]

    def advance(self) -> Token:
        token = self.tokens[self.current]
        if token.kind != "EOF":
            self.current += 1
        return token

    def check(self, kind: str, text: Optional[str] = None) -> bool:
        token = self.peek()
        return token.kind == kind and (text is None or token.text == text)

    def match(self, kind: str, *texts: str) -> Optional[Token]:
        token = self.peek()
        if token.kind == kind and (not texts or token.text in texts):
            return self.advance()
        return None

    def error(self, message: str, expected: Optional[str] = None) -> ParseError:
        token = self.peek()
        found = "end of input" if token.kind == "EOF" else f"'{token.text}'"
        return ParseError(f"{message}, found {found}", token.offset, expected=expected,
                          source=self.source)

    def parse(self) -> Expr:
        node = self.expr()
        if not self.check("EOF"):
            raise self.error("unexpected trailing input", expected="operator or end of input")
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            token = self.match("OP", "+", "-")
            if token is None:
                return node
            node = BinOp(token.text, node, self.term())

    def term(self) -> Expr:
        node = self.factor()
        while True:
            token = self.match("OP", "*", "/")
            if token is None:
                return node
            node = BinOp(token.text, node, self.factor())

    def factor(self) -> Expr:
        if self.match("OP", "-"):
            return Neg(self.factor())
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.match("OP", "^"):
            return BinOp("^", base, self.factor())
        return base

    def primary(self) -> Expr:
        token = self.peek()
        if token.kind == "NUMBER":
            self.advance()
            return Const(float(token.text))
        if token.kind == "NAME":
            self.advance()
            if token.text in FUNCTIONS:
                if not self.match("LPAREN"):
                    raise self.error(f"function '{token.text}' needs an argument", expected="'('")
                arg = self.expr()
                if not self.match("RPAREN"):
                    raise self.error("unclosed function call", expected="')'")
                return Call(token.text, arg)
            if token.text in ("pi", "e") and (self.allowed is None or token.text not in self.allowed):
                return Const(math.pi if token.text == "pi" else math.e)
            if self.allowed is not None and token.text not in self.allowed:
                raise ParseError(f"unknown identifier '{token.text}'", token.offset,
                                 expected="one of " + ", ".join(sorted(self.allowed)),
                                 source=self.source)
            return Var(token.text)
        if self.match("LPAREN"):
            node = self.expr()
            if not self.match("RPAREN"):
                raise self.error("unbalanced parenthesis", expected="')'")
            return node
        raise self.error("expected an operand", expected="number, name or '('")


def parse_expr(source: str, variables: Optional[Iterable[str]] = None) -> Expr:
    """Parse source into an AST; unknown identifiers are rejected when `variables` is given"""
    if not isinstance(source, str):
        source = repr(source)
    return Parser(source, variables).parse()


def print_expr(node: Expr) -> str:
    """Fully parenthesized source; parse(print_expr(e)) evaluates like e"""
    return node.to_source()


def evaluate(node: Expr, env: Mapping[str, object], shape: Optional[Sequence[int]] = None):
    """Evaluate with errors suppressed to IEEE results; broadcast to `shape` if given"""
    with np.errstate(all="ignore"):
        value = np.asarray(node.evaluate(env), dtype=float)
    if shape is not None:
        value = np.broadcast_to(value, tuple(shape))
    return value


def substitute(node: Expr, values: Mapping[str, float]) -> Expr:
    """Replace named constants by their values"""
    if isinstance(node, Var):
        return Const(float(values[node.name])) if node.name in values else node
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, values))
    if isinstance(node, BinOp):
        return BinOp(node.op, substitute(node.left, values), substitute(node.right, values))
    if isinstance(node, Call):
        return Call(node.func, substitute(node.arg, values))
    return node


def _numpy_source(node: Expr) -> str:
    if isinstance(node, Const):
        if not math.isfinite(node.value):
            # substituted constants only; literals are finite
            return "_nan" if math.isnan(node.value) else ("_inf" if node.value > 0 else "(-_inf)")
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{_numpy_source(node.operand)})"
    if isinstance(node, BinOp):
        if node.op == "^":
            return f"_pow({_numpy_source(node.left)}, {_numpy_source(node.right)})"
        return f"({_numpy_source(node.left)} {node.op} {_numpy_source(node.right)})"
    if isinstance(node, Call):
        return f"_{node.func}({_numpy_source(node.arg)})"
    raise TypeError(f"unsupported node {type(node).__name__}")


_SAFE_NAMESPACE = {f"_{name}": func for name, func in FUNCTIONS.items()}
_SAFE_NAMESPACE["_pow"] = lambda a, b: np.power(np.asarray(a, dtype=float), b)
_SAFE_NAMESPACE["_inf"] = math.inf
_SAFE_NAMESPACE["_nan"] = math.nan


def compile_expr(node: Expr, arguments: Sequence[str]) -> Callable:
    """Compile to a positional numpy lambda, e.g. compile_expr(e, ["t", "x1"])(t, x1)"""
    missing = node.variables() - set(arguments)
    if missing:
        raise KeyError(f"unbound variables {sorted(missing)}")
    body = _numpy_source(node)
    code = f"lambda {', '.join(arguments)}: {body}" if arguments else f"lambda: {body}"
    return eval(code, {"__builtins__": None, **_SAFE_NAMESPACE})
