"""Fuzzy-set query execution.

Fuzzy sets are dense membership vectors over all entities.  The same
``execute`` drives the exact traversal executor, the edge-type heuristic,
and GNN-QE (where memberships are autodiff tensors).
"""
from __future__ import annotations

from enum import Enum
from typing import Callable

import numpy as np

from ikqe import autodiff as ad
from ikqe import kernels
from ikqe.graph import KnowledgeGraph, RelationEntityIndex
from ikqe.query import NodeKind, OpKind, QueryDag

_RANGE_TOL = 1e-9


class Logic(str, Enum):
    PRODUCT = "product"
    GOEDEL = "goedel"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        name = str(name).lower()
        if name in ("prod", "product"):
            return cls.PRODUCT
        if name in ("min", "godel", "goedel", "gödel"):
            return cls.GOEDEL
        raise ValueError(f"unknown logic {name!r}")


def _check_pair(x, y):
    sx = x.shape if hasattr(x, "shape") else np.shape(x)
    sy = y.shape if hasattr(y, "shape") else np.shape(y)
    if sx != sy:
        raise ValueError(f"fuzzy set length mismatch: {sx} vs {sy}")


def _is_tensor(*xs):
    return any(isinstance(x, ad.Tensor) for x in xs)


def t_norm(logic, x, y):
    _check_pair(x, y)
    if Logic(logic) is Logic.PRODUCT:
        return x * y if _is_tensor(x, y) else np.asarray(x) * np.asarray(y)
    return ad.minimum(x, y) if _is_tensor(x, y) else np.minimum(x, y)


def t_conorm(logic, x, y):
    _check_pair(x, y)
    if Logic(logic) is Logic.PRODUCT:
        if _is_tensor(x, y):
            return x + y - x * y
        x, y = np.asarray(x), np.asarray(y)
        return x + y - x * y
    return ad.maximum(x, y) if _is_tensor(x, y) else np.maximum(x, y)


def negate(x):
    return 1.0 - x if isinstance(x, ad.Tensor) else 1.0 - np.asarray(x)


def check_range(x, what="fuzzy set"):
    data = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    if data.size and (data.min() < -_RANGE_TOL or data.max() > 1.0 + _RANGE_TOL):
        raise ValueError(f"{what} leaves [0, 1]: range [{data.min()}, {data.max()}]")
    return x


def one_hot(num_entities, entity):
    if not 0 <= entity < num_entities:
        raise IndexError(f"anchor {entity} out of range [0, {num_entities})")
    v = np.zeros(num_entities)
    v[entity] = 1.0
    return v


Projector = Callable[[KnowledgeGraph, np.ndarray, int], np.ndarray]


def traversal_project(graph: KnowledgeGraph, x, relation):
    """``out[t] = max_h x[h]`` over edges (h, relation, t); 0 without such edges."""
    x = np.asarray(x, dtype=np.float64)
    lo = relation * graph.num_entities
    start, stop = graph.out_ptr[lo], graph.out_ptr[lo + graph.num_entities]
    if stop == start:
        return np.zeros(graph.num_entities)
    tails = graph.out_idx[start:stop]
    counts = np.diff(graph.out_ptr[lo:lo + graph.num_entities + 1])
    heads = np.repeat(np.arange(graph.num_entities), counts)
    return kernels.scatter_max_1d(x[heads], tails, graph.num_entities)


def execute(dag: QueryDag, graph: KnowledgeGraph, projector: Projector = traversal_project,
            logic=Logic.PRODUCT, *, check=True):
    """Evaluate ``dag`` bottom-up and return the target's fuzzy set.

    ``projector(graph, x, relation)`` is called for each projection; inputs
    may be numpy arrays or autodiff tensors.
    """
    logic = Logic(logic)
    values = {}
    for i, node in enumerate(dag.nodes):
        if node.kind is NodeKind.ANCHOR:
            values[i] = one_hot(graph.num_entities, node.entity)
    for op in dag.ops:
        args = [values[j] for j in op.inputs]
        if op.kind is OpKind.PROJECTION:
            out = projector(graph, args[0], op.relation)
        elif op.kind is OpKind.NEGATION:
            out = negate(args[0])
        else:
            combine = t_norm if op.kind is OpKind.INTERSECTION else t_conorm
            out = args[0]
            for nxt in args[1:]:
                out = combine(logic, out, nxt)
        if check:
            check_range(out, f"{op.kind.value} output")
        values[op.output] = out
    return values[dag.target]


def answer_set(dag: QueryDag, graph: KnowledgeGraph):
    """Exact answers by traversal: the support of the binary executor output."""
    return frozenset(np.flatnonzero(execute(dag, graph, traversal_project) > 0.5).tolist())


# ---------------------------------------------------------------- heuristic

def heuristic_projector(index: RelationEntityIndex):
    """Projection that ignores its input and returns the relation's tail mask."""
    def project(graph, x, relation):
        return index.reachable[relation].astype(np.float64)

    return project


def heuristic_scores(dag: QueryDag, index: RelationEntityIndex, seed=0, graph=None):
    """Two-class edge-type heuristic.

    Returns ``(scores, ranking)``: binary class scores and a ranking that
    lists class 1 before class 0, shuffled within each class.
    """
    num_entities = index.reachable.shape[1]
    if graph is None:
        graph = _ShapeOnly(num_entities)
    scores = execute(dag, graph, heuristic_projector(index), Logic.PRODUCT)
    scores = (scores > 0.5).astype(np.float64)
    rng = np.random.default_rng(seed)
    noise = rng.permutation(num_entities)
    ranking = np.lexsort((noise, -scores))
    return scores, ranking


def ranking_to_scores(ranking):
    """Strictly decreasing scores that reproduce ``ranking`` exactly."""
    n = len(ranking)
    out = np.empty(n)
    out[np.asarray(ranking)] = np.arange(n, 0, -1, dtype=np.float64)
    return out


class _ShapeOnly:
    """Stand-in graph exposing only ``num_entities`` (heuristic never traverses)."""

    def __init__(self, num_entities):
        self.num_entities = num_entities
