"""Code property graph construction for the mini language.

One graph per function: statement-level nodes (a single node per
assignment, predicate, call, return or parameter, labeled with its source
text) joined by four edge families:

  AST       parent statement -> directly contained statement
  CFG       structured control flow, ENTRY to EXIT
  CDG_*     predicate -> statements controlled by its true/false outcome
  DDG       reaching definition -> use, labeled with the variable

Control dependence is computed structurally from the nesting; with a
goto-free grammar this coincides with the post-dominance construction.
Data dependence is a reaching-definitions fixpoint over the CFG, so
loop-carried dependencies are included.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .minilang import AstNode, ParseError, parse

NODE_KINDS = ("ENTRY", "EXIT", "DECL", "PRED", "CALL", "RETURN", "PARAM")
EDGE_KINDS = ("AST", "CFG", "CDG_TRUE", "CDG_FALSE", "DDG")

_EDGE_ORDER = {k: i for i, k in enumerate(EDGE_KINDS)}

DEFAULT_MAX_NODES = 50


class GraphTooLarge(Exception):
    pass


class SchemaError(Exception):
    """Invalid graph JSON; message includes the offending JSON path."""


@dataclass(frozen=True)
class CpgNode:
    id: int
    kind: str
    label: str


@dataclass(frozen=True)
class CpgEdge:
    src: int
    dst: int
    kind: str
    var: str | None = None


@dataclass
class Cpg:
    function_name: str
    nodes: list[CpgNode]
    edges: list[CpgEdge]

    def edges_of_kind(self, kind: str) -> list[CpgEdge]:
        return [e for e in self.edges if e.kind == kind]

    def node_by_label(self, label: str) -> CpgNode:
        matches = [n for n in self.nodes if n.label == label]
        if len(matches) != 1:
            raise KeyError(f"{len(matches)} nodes labeled {label!r}")
        return matches[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cpg):
            return NotImplemented
        return (
            self.function_name == other.function_name
            and self.nodes == other.nodes
            and set(self.edges) == set(other.edges)
        )


def _expr_uses(expr: AstNode) -> list[str]:
    """Variable names read by an expression; callee names do not count."""
    uses: list[str] = []

    def walk(node: AstNode) -> None:
        if node.kind == "Name":
            uses.append(node.name)
        elif node.kind == "Call":
            for a in node.args:
                walk(a)
        else:
            for c in node.children:
                walk(c)

    walk(expr)
    return uses


@dataclass
class FuncGraph:
    """Nodes plus the per-pass edge sets and dataflow facts for one function."""

    function_name: str
    nodes: list[CpgNode] = field(default_factory=list)
    cfg_edges: list[tuple[int, int]] = field(default_factory=list)
    ast_edges: list[tuple[int, int]] = field(default_factory=list)
    # (predicate id, controlled ids on true branch, controlled ids on false branch)
    branches: list[tuple[int, list[int], list[int]]] = field(default_factory=list)
    defs: dict[int, str] = field(default_factory=dict)
    uses: dict[int, list[str]] = field(default_factory=dict)
    entry: int = 0
    exit: int = 0


def _stmt_node_kind(stmt: AstNode) -> tuple[str, str]:
    if stmt.kind == "Assign":
        return "DECL", stmt.text
    if stmt.kind in ("If", "While"):
        return "PRED", stmt.cond.text
    if stmt.kind == "Return":
        return "RETURN", stmt.text
    if stmt.kind == "Call":
        return "CALL", stmt.text
    # A bare non-call expression statement computes a value it discards;
    # closest statement family is a declaration without a target.
    return "DECL", stmt.text


def build_cfg(func: AstNode) -> FuncGraph:
    """Number the statement nodes of a function and wire its control flow."""
    if func.kind != "FuncDef":
        raise ValueError("build_cfg expects a FuncDef")
    fg = FuncGraph(function_name=func.name)
    stmt_id: dict[int, int] = {}  # id(AstNode) -> node id

    def new_node(kind: str, label: str) -> int:
        nid = len(fg.nodes)
        fg.nodes.append(CpgNode(nid, kind, label))
        return nid

    fg.entry = new_node("ENTRY", "ENTRY")
    for p in func.params:
        nid = new_node("PARAM", p.name)
        stmt_id[id(p)] = nid
        fg.defs[nid] = p.name

    def number_block(stmts: list[AstNode]) -> None:
        for s in stmts:
            kind, label = _stmt_node_kind(s)
            nid = new_node(kind, label)
            stmt_id[id(s)] = nid
            if s.kind == "Assign":
                fg.defs[nid] = s.target
                fg.uses[nid] = _expr_uses(s.value)
            elif s.kind == "If":
                fg.uses[nid] = _expr_uses(s.cond)
                number_block(s.then_body)
                number_block(s.else_body)
            elif s.kind == "While":
                fg.uses[nid] = _expr_uses(s.cond)
                number_block(s.body)
            elif s.kind == "Return":
                fg.uses[nid] = _expr_uses(s.value) if s.value is not None else []
            else:
                fg.uses[nid] = _expr_uses(s)

    number_block(func.body)
    fg.exit = new_node("EXIT", "EXIT")

    def connect(srcs: list[int], dst: int) -> None:
        for s in srcs:
            edge = (s, dst)
            if edge not in fg.cfg_edges:
                fg.cfg_edges.append(edge)

    def wire_block(stmts: list[AstNode], frontier: list[int]) -> list[int]:
        for s in stmts:
            nid = stmt_id[id(s)]
            connect(frontier, nid)
            if s.kind == "If":
                then_exit = wire_block(s.then_body, [nid])
                if s.else_body:
                    else_exit = wire_block(s.else_body, [nid])
                else:
                    else_exit = [nid]
                frontier = then_exit + else_exit
                fg.branches.append(
                    (
                        nid,
                        [stmt_id[id(c)] for c in s.then_body],
                        [stmt_id[id(c)] for c in s.else_body],
                    )
                )
            elif s.kind == "While":
                body_exit = wire_block(s.body, [nid])
                connect(body_exit, nid)
                frontier = [nid]
                fg.branches.append((nid, [stmt_id[id(c)] for c in s.body], []))
            elif s.kind == "Return":
                connect([nid], fg.exit)
                frontier = []
            else:
                frontier = [nid]
        return frontier

    chain = [fg.entry]
    for p in func.params:
        nid = stmt_id[id(p)]
        connect(chain, nid)
        chain = [nid]
    tail = wire_block(func.body, chain)
    connect(tail, fg.exit)

    # AST containment: ENTRY owns the parameters and top-level statements,
    # each predicate owns the statements of its branches.
    for p in func.params:
        fg.ast_edges.append((fg.entry, stmt_id[id(p)]))
    for s in func.body:
        fg.ast_edges.append((fg.entry, stmt_id[id(s)]))
    for pred, true_ids, false_ids in fg.branches:
        for c in true_ids + false_ids:
            fg.ast_edges.append((pred, c))
    return fg


def control_dependence(fg: FuncGraph) -> list[CpgEdge]:
    """Edges from each predicate to the statements it directly controls."""
    edges = []
    for pred, true_ids, false_ids in fg.branches:
        for c in true_ids:
            edges.append(CpgEdge(pred, c, "CDG_TRUE"))
        for c in false_ids:
            edges.append(CpgEdge(pred, c, "CDG_FALSE"))
    return edges


def data_dependence(fg: FuncGraph) -> list[CpgEdge]:
    """Reaching-definitions fixpoint; one edge per (definition, use, var)."""
    succs: dict[int, list[int]] = {n.id: [] for n in fg.nodes}
    preds: dict[int, list[int]] = {n.id: [] for n in fg.nodes}
    for s, d in fg.cfg_edges:
        succs[s].append(d)
        preds[d].append(s)

    defs_of_var: dict[str, set[int]] = {}
    for nid, var in fg.defs.items():
        defs_of_var.setdefault(var, set()).add(nid)

    out_sets: dict[int, frozenset[tuple[str, int]]] = {
        n.id: frozenset() for n in fg.nodes
    }
    in_sets: dict[int, frozenset[tuple[str, int]]] = dict(out_sets)
    worklist = [n.id for n in fg.nodes]
    while worklist:
        nid = worklist.pop(0)
        incoming: set[tuple[str, int]] = set()
        for p in preds[nid]:
            incoming |= out_sets[p]
        in_sets[nid] = frozenset(incoming)
        if nid in fg.defs:
            var = fg.defs[nid]
            survivors = {d for d in incoming if d[0] != var}
            survivors.add((var, nid))
            new_out = frozenset(survivors)
        else:
            new_out = frozenset(incoming)
        if new_out != out_sets[nid]:
            out_sets[nid] = new_out
            worklist.extend(succs[nid])

    edges = []
    for nid in sorted(fg.uses):
        for var in dict.fromkeys(fg.uses[nid]):  # de-duplicated, stable order
            for dvar, dnode in sorted(in_sets[nid]):
                if dvar == var:
                    edges.append(CpgEdge(dnode, nid, "DDG", var))
    return edges


def build_cpg(source: str, max_nodes: int = DEFAULT_MAX_NODES, function: str | None = None) -> Cpg:
    """Parse source and assemble the full graph for one function.

    Raises ParseError on bad input and GraphTooLarge if the node count
    (including ENTRY/EXIT) exceeds max_nodes.
    """
    funcs = parse(source)
    func = funcs[0]
    if function is not None:
        named = [f for f in funcs if f.name == function]
        if not named:
            raise ParseError(1, f"no function named {function!r}")
        func = named[0]
    fg = build_cfg(func)
    if len(fg.nodes) > max_nodes:
        raise GraphTooLarge(
            f"{len(fg.nodes)} nodes exceeds the {max_nodes}-node cap"
        )
    edges: list[CpgEdge] = []
    for s, d in fg.ast_edges:
        edges.append(CpgEdge(s, d, "AST"))
    for s, d in fg.cfg_edges:
        edges.append(CpgEdge(s, d, "CFG"))
    edges.extend(control_dependence(fg))
    edges.extend(data_dependence(fg))
    unique = list(dict.fromkeys(edges))
    unique.sort(key=lambda e: (_EDGE_ORDER[e.kind], e.src, e.dst, e.var or ""))
    return Cpg(fg.function_name, fg.nodes, unique)


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------


def cpg_to_json(cpg: Cpg) -> str:
    doc = {
        "function": cpg.function_name,
        "nodes": [{"id": n.id, "kind": n.kind, "label": n.label} for n in cpg.nodes],
        "edges": [
            {"src": e.src, "dst": e.dst, "kind": e.kind, "var": e.var}
            for e in cpg.edges
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise SchemaError(f"{path}: {message}")


def cpg_from_json(text: str) -> Cpg:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"$: invalid JSON ({exc})") from exc
    _require(isinstance(doc, dict), "$", "document must be an object")
    for key in ("function", "nodes", "edges"):
        _require(key in doc, f"$.{key}", "missing required key")
    _require(isinstance(doc["function"], str), "$.function", "must be a string")
    _require(isinstance(doc["nodes"], list) and doc["nodes"], "$.nodes", "must be a non-empty array")
    _require(isinstance(doc["edges"], list), "$.edges", "must be an array")

    nodes = []
    for i, raw in enumerate(doc["nodes"]):
        path = f"$.nodes[{i}]"
        _require(isinstance(raw, dict), path, "must be an object")
        for key, typ in (("id", int), ("kind", str), ("label", str)):
            _require(key in raw, f"{path}.{key}", "missing required key")
            _require(isinstance(raw[key], typ) and not isinstance(raw[key], bool),
                     f"{path}.{key}", f"must be {typ.__name__}")
        _require(raw["id"] == i, f"{path}.id", f"ids must be dense 0..n-1, expected {i}")
        _require(raw["kind"] in NODE_KINDS, f"{path}.kind", f"unknown kind {raw['kind']!r}")
        nodes.append(CpgNode(raw["id"], raw["kind"], raw["label"]))
    for kind in ("ENTRY", "EXIT"):
        count = sum(1 for n in nodes if n.kind == kind)
        _require(count == 1, "$.nodes", f"exactly one {kind} node required, found {count}")

    edges = []
    seen = set()
    for i, raw in enumerate(doc["edges"]):
        path = f"$.edges[{i}]"
        _require(isinstance(raw, dict), path, "must be an object")
        for key in ("src", "dst", "kind"):
            _require(key in raw, f"{path}.{key}", "missing required key")
        for key in ("src", "dst"):
            _require(isinstance(raw[key], int) and not isinstance(raw[key], bool),
                     f"{path}.{key}", "must be an integer")
            _require(0 <= raw[key] < len(nodes), f"{path}.{key}",
                     f"unknown node id {raw[key]}")
        _require(raw["kind"] in EDGE_KINDS, f"{path}.kind", f"unknown kind {raw['kind']!r}")
        var = raw.get("var")
        if raw["kind"] == "DDG":
            _require(isinstance(var, str) and var, f"{path}.var", "DDG edges need a variable name")
        else:
            _require(var is None, f"{path}.var", "only DDG edges carry a variable")
        edge = CpgEdge(raw["src"], raw["dst"], raw["kind"], var)
        _require(edge not in seen, path, "duplicate edge")
        seen.add(edge)
        edges.append(edge)
    return Cpg(doc["function"], nodes, edges)
