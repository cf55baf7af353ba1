"""
Filter expressions, aggregation and report formatting over flow records.

Grammar (keywords are case-insensitive)::

    expr    := or
    or      := and ("or" and)*
    and     := unary ("and" unary)*
    unary   := "not" unary | "(" expr ")" | predicate
    predicate :=
          "proto" (NAME | NUMBER)
        | [dir] "host" ADDRESS
        | [dir] "net" CIDR
        | [dir] "port" NUMBER
        | ("bytes" | "packets" | "duration") OP NUMBER
    dir     := "src" | "dst"
    OP      := "<" | "<=" | ">" | ">=" | "="

``&&``, ``||`` and ``!`` are accepted as spellings of and/or/not. An empty
expression matches every flow.
"""
from __future__ import annotations

import csv
import io
import ipaddress
import operator
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

from flowkit.flow import FlowRecord

PROTO_NAMES = {"tcp": 6, "udp": 17, "icmp": 1, "icmp6": 58}
_PROTO_BY_NUMBER = {v: k for k, v in PROTO_NAMES.items()}


class FilterError(ValueError):
    pass


class FilterSyntaxError(FilterError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class InvalidCidr(FilterError):
    pass


class InvalidPortRange(FilterError):
    pass


# --- AST --------------------------------------------------------------------

@dataclass(frozen=True)
class MatchAll:
    def matches(self, f: FlowRecord) -> bool:
        return True


@dataclass(frozen=True)
class And:
    left: "Expr"
    right: "Expr"

    def matches(self, f: FlowRecord) -> bool:
        return self.left.matches(f) and self.right.matches(f)


@dataclass(frozen=True)
class Or:
    left: "Expr"
    right: "Expr"

    def matches(self, f: FlowRecord) -> bool:
        return self.left.matches(f) or self.right.matches(f)


@dataclass(frozen=True)
class Not:
    operand: "Expr"

    def matches(self, f: FlowRecord) -> bool:
        return not self.operand.matches(f)


@dataclass(frozen=True)
class Proto:
    number: int

    def matches(self, f: FlowRecord) -> bool:
        return f.key.protocol == self.number


@dataclass(frozen=True)
class Host:
    direction: Optional[str]  # "src", "dst" or None for either
    address: Union[ipaddress.IPv4Address, ipaddress.IPv6Address]

    def matches(self, f: FlowRecord) -> bool:
        a = self.address
        if self.direction == "src":
            return f.key.src_ip == a
        if self.direction == "dst":
            return f.key.dst_ip == a
        return f.key.src_ip == a or f.key.dst_ip == a


@dataclass(frozen=True)
class Net:
    direction: Optional[str]
    network: Union[ipaddress.IPv4Network, ipaddress.IPv6Network]

    def matches(self, f: FlowRecord) -> bool:
        net = self.network
        if f.key.ip_version != net.version:
            return False
        if self.direction == "src":
            return f.key.src_ip in net
        if self.direction == "dst":
            return f.key.dst_ip in net
        return f.key.src_ip in net or f.key.dst_ip in net


@dataclass(frozen=True)
class Port:
    direction: Optional[str]
    port: int

    def matches(self, f: FlowRecord) -> bool:
        p = self.port
        if self.direction == "src":
            return f.key.src_port == p
        if self.direction == "dst":
            return f.key.dst_port == p
        return f.key.src_port == p or f.key.dst_port == p


_OPS: dict[str, Callable[[int, int], bool]] = {
    "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge, "=": operator.eq,
}


@dataclass(frozen=True)
class Compare:
    field: str  # bytes | packets | duration
    op: str
    value: int

    def matches(self, f: FlowRecord) -> bool:
        if self.field == "bytes":
            v = f.bytes
        elif self.field == "packets":
            v = f.packets
        else:
            v = f.last_seen - f.first_seen
        return _OPS[self.op](v, self.value)


Expr = Union[MatchAll, And, Or, Not, Proto, Host, Net, Port, Compare]


def evaluate(expr: Expr, flow: FlowRecord) -> bool:
    return expr.matches(flow)


# --- tokenizer and parser ---------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<op><=|>=|==|&&|\|\||[<>=()!])
  | (?P<word>[^\s()<>=!&|]+)
""", re.VERBOSE)


@dataclass(frozen=True)
class _Token:
    kind: str  # "op", "word", "end"
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FilterSyntaxError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos))
        if m.lastgroup != "ws":
            tokens.append(_Token(m.lastgroup, m.group(), _byte_offset(text, pos)))
        pos = m.end()
    tokens.append(_Token("end", "", _byte_offset(text, len(text))))
    return tokens


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        if tok.kind != "end":
            self.i += 1
        return tok

    def at_keyword(self, *words: str) -> bool:
        tok = self.peek()
        return tok.kind == "word" and tok.text.lower() in words

    def at_op(self, *ops: str) -> bool:
        tok = self.peek()
        return tok.kind == "op" and tok.text in ops

    def parse(self) -> Expr:
        if self.peek().kind == "end":
            return MatchAll()
        expr = self.parse_or()
        tok = self.peek()
        if tok.kind != "end":
            raise FilterSyntaxError(f"unexpected {tok.text!r}", tok.offset)
        return expr

    def parse_or(self) -> Expr:
        left = self.parse_and()
        while self.at_keyword("or") or self.at_op("||"):
            self.next()
            left = Or(left, self.parse_and())
        return left

    def parse_and(self) -> Expr:
        left = self.parse_unary()
        while self.at_keyword("and") or self.at_op("&&"):
            self.next()
            left = And(left, self.parse_unary())
        return left

    def parse_unary(self) -> Expr:
        if self.at_keyword("not") or self.at_op("!"):
            self.next()
            return Not(self.parse_unary())
        if self.at_op("("):
            self.next()
            expr = self.parse_or()
            tok = self.next()
            if tok.kind != "op" or tok.text != ")":
                raise FilterSyntaxError("expected ')'", tok.offset)
            return expr
        return self.parse_predicate()

    def expect_word(self, what: str) -> _Token:
        tok = self.next()
        if tok.kind != "word":
            raise FilterSyntaxError(f"expected {what}", tok.offset)
        return tok

    def parse_predicate(self) -> Expr:
        tok = self.peek()
        if tok.kind != "word":
            raise FilterSyntaxError(
                "expected a predicate" if tok.kind != "end" else "unexpected end of filter",
                tok.offset)
        word = tok.text.lower()
        if word == "proto":
            self.next()
            return Proto(_parse_proto(self.expect_word("protocol")))
        if word in ("bytes", "packets", "duration"):
            self.next()
            op_tok = self.next()
            if op_tok.kind != "op" or op_tok.text not in ("<", "<=", ">", ">=", "=", "=="):
                raise FilterSyntaxError("expected comparison operator", op_tok.offset)
            num = self.expect_word("number")
            return Compare(word, "=" if op_tok.text == "==" else op_tok.text,
                           _parse_uint(num))
        direction = None
        if word in ("src", "dst"):
            direction = word
            self.next()
            tok = self.peek()
            word = tok.text.lower() if tok.kind == "word" else ""
        if word == "host":
            self.next()
            arg = self.expect_word("address")
            try:
                return Host(direction, ipaddress.ip_address(arg.text))
            except ValueError:
                raise FilterSyntaxError(f"bad address {arg.text!r}", arg.offset) from None
        if word == "net":
            self.next()
            arg = self.expect_word("network")
            try:
                return Net(direction, ipaddress.ip_network(arg.text, strict=True))
            except ValueError as exc:
                raise InvalidCidr(f"{arg.text!r} at offset {arg.offset}: {exc}") from None
        if word == "port":
            self.next()
            arg = self.expect_word("port number")
            port = _parse_uint(arg)
            if port > 65535:
                raise InvalidPortRange(f"port {port} at offset {arg.offset}")
            return Port(direction, port)
        raise FilterSyntaxError(f"unknown predicate {tok.text!r}", tok.offset)


def _parse_uint(tok: _Token) -> int:
    if not tok.text.isdigit():
        raise FilterSyntaxError(f"expected a number, got {tok.text!r}", tok.offset)
    return int(tok.text)


def _parse_proto(tok: _Token) -> int:
    name = tok.text.lower()
    if name in PROTO_NAMES:
        return PROTO_NAMES[name]
    n = _parse_uint(tok)
    if n > 255:
        raise FilterSyntaxError(f"protocol {n} out of range", tok.offset)
    return n


def parse_filter(text: str) -> Expr:
    return _Parser(text).parse()


def format_filter(expr: Expr) -> str:
    """Render an expression as filter text that parses back to the same AST."""
    if isinstance(expr, MatchAll):
        return ""
    if isinstance(expr, And):
        return f"({format_filter(expr.left)} and {format_filter(expr.right)})"
    if isinstance(expr, Or):
        return f"({format_filter(expr.left)} or {format_filter(expr.right)})"
    if isinstance(expr, Not):
        return f"not {format_filter(expr.operand)}"
    if isinstance(expr, Proto):
        return f"proto {_PROTO_BY_NUMBER.get(expr.number, expr.number)}"
    prefix = f"{expr.direction} " if getattr(expr, "direction", None) else ""
    if isinstance(expr, Host):
        return f"{prefix}host {expr.address}"
    if isinstance(expr, Net):
        return f"{prefix}net {expr.network}"
    if isinstance(expr, Port):
        return f"{prefix}port {expr.port}"
    if isinstance(expr, Compare):
        return f"{expr.field} {expr.op} {expr.value}"
    raise TypeError(f"not a filter expression: {expr!r}")


def filter_flows(flows: Iterable[FlowRecord], expr: Expr) -> Iterable[FlowRecord]:
    if isinstance(expr, MatchAll):
        return flows
    return (f for f in flows if expr.matches(f))


# --- aggregation ------------------------------------------------------------

AGG_FIELDS = ("srcip", "dstip", "srcport", "dstport", "proto")
METRICS = ("flows", "packets", "bytes")

_FIELD_GETTERS = {
    "srcip": lambda f: f.key.src_ip,
    "dstip": lambda f: f.key.dst_ip,
    "srcport": lambda f: f.key.src_port,
    "dstport": lambda f: f.key.dst_port,
    "proto": lambda f: f.key.protocol,
}


@dataclass(frozen=True)
class AggregationSpec:
    key_fields: tuple[str, ...]
    sort_by: str = "bytes"
    top_n: Optional[int] = None

    def __post_init__(self):
        if not self.key_fields:
            raise ValueError("aggregation needs at least one key field")
        bad = [k for k in self.key_fields if k not in AGG_FIELDS]
        if bad:
            raise ValueError(f"unknown aggregation field(s): {', '.join(bad)}")
        if self.sort_by not in METRICS:
            raise ValueError(f"unknown sort metric {self.sort_by!r}")
        if self.top_n is not None and self.top_n < 0:
            raise ValueError("top_n must be >= 0")


@dataclass(frozen=True)
class AggregateRow:
    key_values: tuple
    flows: int
    packets: int
    bytes: int


def _sortable(value) -> tuple:
    if isinstance(value, (ipaddress.IPv4Address, ipaddress.IPv6Address)):
        return (value.version, int(value))
    return (0, value)


def aggregate(flows: Iterable[FlowRecord], spec: AggregationSpec) -> list[AggregateRow]:
    getters = [_FIELD_GETTERS[k] for k in spec.key_fields]
    groups: dict[tuple, list[int]] = {}
    for f in flows:
        key = tuple(g(f) for g in getters)
        acc = groups.get(key)
        if acc is None:
            groups[key] = [1, f.packets, f.bytes]
        else:
            acc[0] += 1
            acc[1] += f.packets
            acc[2] += f.bytes
    metric = METRICS.index(spec.sort_by)
    ordered = sorted(groups.items(),
                     key=lambda kv: (-kv[1][metric], tuple(_sortable(v) for v in kv[0])))
    if spec.top_n is not None:
        ordered = ordered[:spec.top_n]
    return [AggregateRow(k, *v) for k, v in ordered]


def sort_flows(flows: Iterable[FlowRecord], sort_by: Optional[str] = None,
               top_n: Optional[int] = None) -> list[FlowRecord]:
    """Order raw flows by a metric (descending) with a deterministic tie-break."""
    def tiebreak(f: FlowRecord) -> tuple:
        k = f.key
        return (f.first_seen, f.last_seen, _sortable(k.src_ip), _sortable(k.dst_ip),
                k.protocol, k.src_port, k.dst_port, f.packets, f.bytes, f.tcp_flags)

    if sort_by in (None, "flows"):
        out = sorted(flows, key=tiebreak)
    else:
        out = sorted(flows, key=lambda f: (-getattr(f, sort_by), tiebreak(f)))
    return out[:top_n] if top_n is not None else out


# --- output -----------------------------------------------------------------

FLOW_COLUMNS = ("first_ms", "last_ms", "proto", "src_ip", "src_port", "dst_ip", "dst_port",
                "tcp_flags", "packets", "bytes")


def _proto_text(n: int) -> str:
    return _PROTO_BY_NUMBER.get(n, str(n))


def flow_row(f: FlowRecord) -> list[str]:
    k = f.key
    return [str(f.first_seen), str(f.last_seen), _proto_text(k.protocol), str(k.src_ip),
            str(k.src_port), str(k.dst_ip), str(k.dst_port), f"0x{f.tcp_flags:02x}",
            str(f.packets), str(f.bytes)]


def aggregate_row(spec: AggregationSpec, row: AggregateRow) -> list[str]:
    cells = []
    for name, v in zip(spec.key_fields, row.key_values):
        cells.append(_proto_text(v) if name == "proto" else str(v))
    return cells + [str(row.flows), str(row.packets), str(row.bytes)]


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Aligned text table; numeric-looking columns are right-aligned."""
    widths = [len(h) for h in header]
    for r in rows:
        for i, c in enumerate(r):
            widths[i] = max(widths[i], len(c))
    numeric = [all(r[i].isdigit() for r in rows) and bool(rows) for i in range(len(header))]

    def fmt(cells):
        parts = [c.rjust(w) if num else c.ljust(w) for c, w, num in zip(cells, widths, numeric)]
        return "  ".join(parts).rstrip()

    lines = [fmt(header)] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def render_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()
