"""Query DAGs for the 14 BetaE-style patterns, a small DSL, and the JSONL format.

A query is stored as nodes (anchors, variables, one target) wired by
operator edges.  Ops are kept in a topological order; anchors and relations
are read off in depth-first, left-to-right order, which is the canonical
order used by the wire format.

DSL grammar (EBNF)::

    query   = expr ;
    expr    = proj | and | or | not | anchor ;
    proj    = "P" "(" relation "," expr ")" ;
    and     = "AND" "(" expr { "," expr } ")" ;      (* at least two *)
    or      = "OR" "(" expr { "," expr } ")" ;       (* at least two *)
    not     = "NOT" "(" expr ")" ;
    anchor  = "e" digits ;
    relation = "r" digits ;
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass
from enum import Enum

QUERY_TYPES = ("1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up",
               "2in", "3in", "inp", "pin", "pni")
EPFO_TYPES = QUERY_TYPES[:9]
NEGATION_TYPES = QUERY_TYPES[9:]
TRAIN_TYPES = ("1p", "2p", "3p", "2i", "3i", "2in", "3in", "inp", "pin", "pni")


class QueryStructureError(ValueError):
    pass


class QueryParseError(ValueError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class NodeKind(str, Enum):
    ANCHOR = "anchor"
    VARIABLE = "variable"
    TARGET = "target"


class OpKind(str, Enum):
    PROJECTION = "projection"
    INTERSECTION = "intersection"
    UNION = "union"
    NEGATION = "negation"


@dataclass(frozen=True)
class QueryNode:
    kind: NodeKind
    entity: int | None = None


@dataclass(frozen=True)
class QueryOp:
    kind: OpKind
    inputs: tuple
    output: int
    relation: int | None = None


# Expression trees are plain tuples: ("e", id) ("p", rel, x) ("and", xs) ("or", xs) ("not", x)

def _a(i):
    return ("e", i)


def _p(r, x):
    return ("p", r, x)


_TEMPLATES = {
    "1p": (1, 1, lambda a, r: _p(r[0], _a(a[0]))),
    "2p": (1, 2, lambda a, r: _p(r[1], _p(r[0], _a(a[0])))),
    "3p": (1, 3, lambda a, r: _p(r[2], _p(r[1], _p(r[0], _a(a[0]))))),
    "2i": (2, 2, lambda a, r: ("and", (_p(r[0], _a(a[0])), _p(r[1], _a(a[1]))))),
    "3i": (3, 3, lambda a, r: ("and", (_p(r[0], _a(a[0])), _p(r[1], _a(a[1])), _p(r[2], _a(a[2]))))),
    "ip": (2, 3, lambda a, r: _p(r[2], ("and", (_p(r[0], _a(a[0])), _p(r[1], _a(a[1])))))),
    "pi": (2, 3, lambda a, r: ("and", (_p(r[1], _p(r[0], _a(a[0]))), _p(r[2], _a(a[1]))))),
    "2u": (2, 2, lambda a, r: ("or", (_p(r[0], _a(a[0])), _p(r[1], _a(a[1]))))),
    "up": (2, 3, lambda a, r: _p(r[2], ("or", (_p(r[0], _a(a[0])), _p(r[1], _a(a[1])))))),
    "2in": (2, 2, lambda a, r: ("and", (_p(r[0], _a(a[0])), ("not", _p(r[1], _a(a[1])))))),
    "3in": (3, 3, lambda a, r: ("and", (_p(r[0], _a(a[0])), _p(r[1], _a(a[1])),
                                        ("not", _p(r[2], _a(a[2])))))),
    "inp": (2, 3, lambda a, r: _p(r[2], ("and", (_p(r[0], _a(a[0])), ("not", _p(r[1], _a(a[1]))))))),
    "pin": (2, 3, lambda a, r: ("and", (_p(r[1], _p(r[0], _a(a[0]))), ("not", _p(r[2], _a(a[1])))))),
    "pni": (2, 3, lambda a, r: ("and", (("not", _p(r[1], _p(r[0], _a(a[0])))), _p(r[2], _a(a[1]))))),
}


def pattern_arity(query_type):
    """(number of anchors, number of relations) for a pattern."""
    if query_type not in _TEMPLATES:
        raise QueryStructureError(f"unknown query type {query_type!r}")
    n_a, n_r, _ = _TEMPLATES[query_type]
    return n_a, n_r


def _shape(expr):
    tag = expr[0]
    if tag == "e":
        return "e"
    if tag == "p":
        return f"p({_shape(expr[2])})"
    if tag == "not":
        return f"n({_shape(expr[1])})"
    letter = "i" if tag == "and" else "u"
    return f"{letter}({','.join(_shape(c) for c in expr[1])})"


_SHAPES = {_shape(f(list(range(n_a)), list(range(n_r)))): t for t, (n_a, n_r, f) in _TEMPLATES.items()}


def _variants(expr):
    """All reorderings of AND/OR children, original order first."""
    tag = expr[0]
    if tag == "e":
        yield expr
    elif tag == "p":
        for c in _variants(expr[2]):
            yield ("p", expr[1], c)
    elif tag == "not":
        for c in _variants(expr[1]):
            yield ("not", c)
    else:
        for perm in itertools.permutations(expr[1]):
            for kids in itertools.product(*(list(_variants(c)) for c in perm)):
                yield (tag, tuple(kids))


def _match(expr):
    for v in _variants(expr):
        t = _SHAPES.get(_shape(v))
        if t is not None:
            return t, v
    raise QueryStructureError(f"structure {_shape(expr)} matches none of the 14 query patterns")


@dataclass(frozen=True)
class QueryDag:
    nodes: tuple
    ops: tuple
    query_type: str

    @property
    def target(self):
        return next(i for i, n in enumerate(self.nodes) if n.kind is NodeKind.TARGET)

    @property
    def anchors(self):
        return [n.entity for n in self.nodes if n.kind is NodeKind.ANCHOR]

    @property
    def relations(self):
        return [op.relation for op in self.ops if op.kind is OpKind.PROJECTION]

    @property
    def relation_set(self):
        return frozenset(self.relations)

    @property
    def has_negation(self):
        return any(op.kind is OpKind.NEGATION for op in self.ops)

    def producer(self, node):
        for op in self.ops:
            if op.output == node:
                return op
        return None

    def to_expr(self):
        def walk(i):
            node = self.nodes[i]
            if node.kind is NodeKind.ANCHOR:
                return ("e", node.entity)
            op = self.producer(i)
            if op.kind is OpKind.PROJECTION:
                return ("p", op.relation, walk(op.inputs[0]))
            if op.kind is OpKind.NEGATION:
                return ("not", walk(op.inputs[0]))
            tag = "and" if op.kind is OpKind.INTERSECTION else "or"
            return (tag, tuple(walk(j) for j in op.inputs))

        return walk(self.target)

    def render(self):
        return render_expr(self.to_expr())

    def __str__(self):
        return f"{self.query_type}: {self.render()}"


def _from_expr(expr, query_type):
    nodes, ops = [], []

    def emit(e):
        tag = e[0]
        if tag == "e":
            nodes.append(QueryNode(NodeKind.ANCHOR, int(e[1])))
            return len(nodes) - 1
        if tag == "p":
            src = emit(e[2])
            nodes.append(QueryNode(NodeKind.VARIABLE))
            ops.append(QueryOp(OpKind.PROJECTION, (src,), len(nodes) - 1, int(e[1])))
        elif tag == "not":
            src = emit(e[1])
            nodes.append(QueryNode(NodeKind.VARIABLE))
            ops.append(QueryOp(OpKind.NEGATION, (src,), len(nodes) - 1))
        else:
            srcs = tuple(emit(c) for c in e[1])
            nodes.append(QueryNode(NodeKind.VARIABLE))
            kind = OpKind.INTERSECTION if tag == "and" else OpKind.UNION
            ops.append(QueryOp(kind, srcs, len(nodes) - 1))
        return len(nodes) - 1

    root = emit(expr)
    nodes[root] = QueryNode(NodeKind.TARGET)
    return QueryDag(tuple(nodes), tuple(ops), query_type)


def from_pattern(query_type, anchors, relations) -> QueryDag:
    n_a, n_r = pattern_arity(query_type)
    anchors, relations = list(anchors), list(relations)
    if len(anchors) != n_a or len(relations) != n_r:
        raise QueryStructureError(
            f"{query_type} needs {n_a} anchor(s) and {n_r} relation(s), "
            f"got {len(anchors)} and {len(relations)}")
    if any(int(x) < 0 for x in anchors + relations):
        raise QueryStructureError("ids must be non-negative")
    return _from_expr(_TEMPLATES[query_type][2](anchors, relations), query_type)


def from_expr(expr) -> QueryDag:
    query_type, canonical = _match(expr)
    return _from_expr(canonical, query_type)


def validate(nodes, ops) -> QueryDag:
    """Check an arbitrary node/op wiring and return it as a canonical DAG.

    Rejects cycles, multiple or missing targets, nodes without exactly one
    producer, unconsumed (orphan) nodes, shared sub-expressions, and any
    structure that is not one of the 14 patterns.
    """
    nodes, ops = tuple(nodes), tuple(ops)
    n = len(nodes)
    targets = [i for i, nd in enumerate(nodes) if nd.kind is NodeKind.TARGET]
    if len(targets) != 1:
        raise QueryStructureError(f"expected exactly one target, found {len(targets)}")
    producers = [[] for _ in range(n)]
    consumers = [0] * n
    for k, op in enumerate(ops):
        if not 0 <= op.output < n or any(not 0 <= j < n for j in op.inputs):
            raise QueryStructureError(f"op {k} references a missing node")
        arity = len(op.inputs)
        if op.kind in (OpKind.PROJECTION, OpKind.NEGATION) and arity != 1:
            raise QueryStructureError(f"{op.kind.value} op {k} must have exactly one input")
        if op.kind in (OpKind.INTERSECTION, OpKind.UNION) and arity < 2:
            raise QueryStructureError(f"{op.kind.value} op {k} needs at least two inputs")
        if op.kind is OpKind.PROJECTION and (op.relation is None or op.relation < 0):
            raise QueryStructureError(f"projection op {k} lacks a relation")
        producers[op.output].append(k)
        for j in op.inputs:
            consumers[j] += 1
    for i, nd in enumerate(nodes):
        if nd.kind is NodeKind.ANCHOR:
            if producers[i]:
                raise QueryStructureError(f"anchor node {i} has an incoming op")
            if nd.entity is None or nd.entity < 0:
                raise QueryStructureError(f"anchor node {i} lacks an entity")
        elif len(producers[i]) != 1:
            raise QueryStructureError(f"node {i} has {len(producers[i])} producing ops, expected 1")
        if nd.kind is NodeKind.TARGET:
            if consumers[i]:
                raise QueryStructureError("target node feeds another op")
        elif consumers[i] == 0:
            raise QueryStructureError(f"node {i} is an orphan (never consumed)")
        elif consumers[i] > 1:
            raise QueryStructureError(f"node {i} is shared by {consumers[i]} ops")
    # cycle check by DFS from the target
    state = [0] * n

    def visit(i):
        if state[i] == 1:
            raise QueryStructureError("query graph contains a cycle")
        if state[i] == 2:
            return
        state[i] = 1
        for k in producers[i]:
            for j in ops[k].inputs:
                visit(j)
        state[i] = 2

    visit(targets[0])
    if not all(state):
        raise QueryStructureError("some nodes do not reach the target")
    dag = QueryDag(nodes, ops, "?")
    return from_expr(dag.to_expr())


# ---------------------------------------------------------------- DSL

_TOKEN = re.compile(r"\s*(?:(?P<kw>AND|OR|NOT|P)\b|(?P<ent>e\d+)|(?P<rel>r\d+)|(?P<sym>[(),]))")


def _tokenize(text):
    pos, out = 0, []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise QueryParseError(f"unexpected character {text[start]!r}", start)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind, value=None):
        tok = self.toks[self.i]
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            got = tok[1] or "end of input"
            raise QueryParseError(f"expected {want!r}, got {got!r}", tok[2])
        self.i += 1
        return tok

    def expr(self):
        kind, value, pos = self.peek()
        if kind == "ent":
            self.i += 1
            return ("e", int(value[1:]))
        if kind != "kw":
            raise QueryParseError(f"expected an expression, got {value or 'end of input'!r}", pos)
        self.i += 1
        self.take("sym", "(")
        if value == "P":
            rel = int(self.take("rel")[1][1:])
            self.take("sym", ",")
            inner = self.expr()
            self.take("sym", ")")
            return ("p", rel, inner)
        if value == "NOT":
            inner = self.expr()
            self.take("sym", ")")
            return ("not", inner)
        items = [self.expr()]
        while self.peek()[1] == ",":
            self.i += 1
            items.append(self.expr())
        close = self.take("sym", ")")
        if len(items) < 2:
            raise QueryParseError(f"{value} needs at least two operands", close[2])
        return ("and" if value == "AND" else "or", tuple(items))

    def parse(self):
        e = self.expr()
        self.take("end")
        return e


def parse_expr(text):
    return _Parser(text).parse()


def parse_query(text) -> QueryDag:
    return from_expr(parse_expr(text))


def render_expr(expr):
    tag = expr[0]
    if tag == "e":
        return f"e{expr[1]}"
    if tag == "p":
        return f"P(r{expr[1]}, {render_expr(expr[2])})"
    if tag == "not":
        return f"NOT({render_expr(expr[1])})"
    name = "AND" if tag == "and" else "OR"
    return f"{name}({', '.join(render_expr(c) for c in expr[1])})"


# ---------------------------------------------------------- instances

class QuerySchemaError(ValueError):
    pass


@dataclass(frozen=True)
class QueryInstance:
    dag: QueryDag
    easy: frozenset
    hard: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "easy", frozenset(int(x) for x in self.easy))
        object.__setattr__(self, "hard", frozenset(int(x) for x in self.hard))
        if self.easy & self.hard:
            raise QueryStructureError("easy and hard answer sets overlap")

    @property
    def query_type(self):
        return self.dag.query_type

    @property
    def answers(self):
        return self.easy | self.hard

    def to_dict(self):
        return {
            "type": self.dag.query_type,
            "anchors": [int(a) for a in self.dag.anchors],
            "relations": [int(r) for r in self.dag.relations],
            "easy": sorted(self.easy),
            "hard": sorted(self.hard),
        }


def serialize(instance: QueryInstance) -> str:
    return json.dumps(instance.to_dict())


_FIELDS = ("type", "anchors", "relations", "easy", "hard")


def deserialize(line: str) -> QueryInstance:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise QuerySchemaError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise QuerySchemaError("query record must be a JSON object")
    for key in _FIELDS:
        if key not in obj:
            raise QuerySchemaError(f"missing field {key!r}")
    extra = set(obj) - set(_FIELDS)
    if extra:
        raise QuerySchemaError(f"unknown field(s) {sorted(extra)}")
    if not isinstance(obj["type"], str) or obj["type"] not in _TEMPLATES:
        raise QuerySchemaError(f"field 'type': unknown query type {obj['type']!r}")
    for key in _FIELDS[1:]:
        v = obj[key]
        if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in v):
            raise QuerySchemaError(f"field {key!r}: expected a list of non-negative integers")
    try:
        dag = from_pattern(obj["type"], obj["anchors"], obj["relations"])
        return QueryInstance(dag, frozenset(obj["easy"]), frozenset(obj["hard"]))
    except QueryStructureError as exc:
        raise QuerySchemaError(str(exc)) from None


def write_queries(instances, path):
    with open(path, "w", encoding="utf-8") as f:
        for q in instances:
            f.write(serialize(q) + "\n")


def read_queries(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(deserialize(line))
                except QuerySchemaError as exc:
                    raise QuerySchemaError(f"{path}:{lineno}: {exc}") from None
    return out
