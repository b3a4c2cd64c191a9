"""Grounding the 14 patterns into query instances with easy/hard answers.

Sampling runs backwards: choose an answer entity in the full graph
(observed + missing edges), then walk the pattern in reverse along existing
in-edges.  Negated branches are grounded from an unrelated entity and the
final answer check rejects groundings whose negation removes the chosen
answer.  Answers are always recomputed by exact traversal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ikqe.fuzzy import answer_set
from ikqe.graph import KnowledgeGraph
from ikqe.query import QUERY_TYPES, QueryInstance, _TEMPLATES, from_expr

log = logging.getLogger(__name__)

ATTEMPTS_PER_INSTANCE = 100


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    per_type_counts: dict
    max_answers: int = 1000
    seed: int = 0
    require_pred_edge: bool = False
    strict: bool = False
    stats: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for t, c in self.per_type_counts.items():
            if t not in QUERY_TYPES:
                raise ValueError(f"unknown query type {t!r}")
            if int(c) <= 0:
                raise ValueError(f"count for {t} must be positive, got {c}")


class _InEdges:
    """All incoming (head, relation) pairs per entity, over every relation."""

    def __init__(self, graph: KnowledgeGraph):
        t = graph.triples
        order = np.lexsort((t[:, 0], t[:, 1], t[:, 2]))
        self.heads = t[order, 0]
        self.rels = t[order, 1]
        self.ptr = np.searchsorted(t[order, 2], np.arange(graph.num_entities + 1))
        self.targets = np.flatnonzero(np.diff(self.ptr) > 0)

    def pick(self, rng, x):
        lo, hi = self.ptr[x], self.ptr[x + 1]
        if lo == hi:
            return None
        k = rng.integers(lo, hi)
        return int(self.heads[k]), int(self.rels[k])


def _placeholder(query_type):
    n_a, n_r, build = _TEMPLATES[query_type]
    return build([None] * n_a, [None] * n_r)


def _ground(expr, x, edges, rng):
    tag = expr[0]
    if tag == "e":
        return ("e", x)
    if tag == "p":
        hit = edges.pick(rng, x)
        if hit is None:
            return None
        h, r = hit
        child = _ground(expr[2], h, edges, rng)
        return None if child is None else ("p", r, child)
    if tag == "not":
        y = int(rng.choice(edges.targets))
        child = _ground(expr[1], y, edges, rng)
        return None if child is None else ("not", child)
    kids = []
    for c in expr[1]:
        g = _ground(c, x, edges, rng)
        if g is None:
            return None
        kids.append(g)
    return (tag, tuple(kids))


def union_graph(observed: KnowledgeGraph, pred) -> KnowledgeGraph:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1, 3)
    if len(pred) == 0:
        return observed
    t = np.unique(np.concatenate([observed.triples, pred]), axis=0)
    return KnowledgeGraph.from_triples(t, observed.num_entities, observed.num_relations,
                                       num_base_relations=observed.num_base_relations,
                                       has_inverses=observed.has_inverses)


def _sample_one(query_type, rng, observed, full, edges, config):
    template = _placeholder(query_type)
    for attempt in range(1, ATTEMPTS_PER_INSTANCE + 1):
        x = int(rng.choice(edges.targets))
        expr = _ground(template, x, edges, rng)
        if expr is None:
            continue
        dag = from_expr(expr)
        if dag.query_type != query_type:
            continue
        full_ans = answer_set(dag, full)
        if x not in full_ans or len(full_ans) >= config.max_answers:
            continue
        easy = answer_set(dag, observed) if full is not observed else full_ans
        hard = full_ans - easy
        if config.require_pred_edge and not hard:
            continue
        if not config.require_pred_edge and not easy:
            continue
        return QueryInstance(dag, easy, hard), attempt
    return None, ATTEMPTS_PER_INSTANCE


def sample_queries(observed: KnowledgeGraph, pred, config: SamplerConfig):
    """Sample ``config.per_type_counts`` instances per pattern.

    Instances whose rejection budget runs out are skipped and counted in
    ``config.stats``; with ``config.strict`` a :class:`SamplingError` is raised.
    """
    full = union_graph(observed, pred if pred is not None else [])
    edges = _InEdges(full)
    if len(edges.targets) == 0:
        raise SamplingError("graph has no edges to sample from")
    out = []
    config.stats.clear()
    for query_type in QUERY_TYPES:
        count = int(config.per_type_counts.get(query_type, 0))
        if not count:
            continue
        type_idx = QUERY_TYPES.index(query_type)
        produced, attempts, failed = [], 0, 0
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), type_idx, i]))
            inst, used = _sample_one(query_type, rng, observed, full, edges, config)
            attempts += used
            if inst is None:
                failed += 1
            else:
                produced.append(inst)
        config.stats[query_type] = {"requested": count, "produced": len(produced),
                                    "attempts": attempts, "failed": failed}
        if failed:
            msg = (f"{query_type}: rejection budget exhausted for {failed}/{count} instances "
                   f"after {attempts} attempts")
            if config.strict:
                raise SamplingError(msg)
            log.warning(msg)
        out.extend(produced)
    return out


def recompute_answers(instances, graph: KnowledgeGraph, entity_mask=None):
    """Re-execute queries on ``graph`` by traversal.

    Returns ``(instances, changed)`` where every new instance has its easy set
    replaced by the traversal answers and an empty hard set, and ``changed``
    counts instances whose answer set differs from before.
    """
    out, changed = [], 0
    for q in instances:
        for a in q.dag.anchors:
            if not 0 <= a < graph.num_entities or (entity_mask is not None and not entity_mask[a]):
                raise KeyError(f"anchor {a} is missing from the graph")
        easy = answer_set(q.dag, graph)
        changed += easy != q.answers
        out.append(QueryInstance(q.dag, easy, frozenset()))
    return out, changed


def changed_by_type(old, new):
    """Per-pattern (total, changed) counts for two aligned instance lists."""
    stats = {}
    for a, b in zip(old, new):
        total, changed = stats.get(a.query_type, (0, 0))
        stats[a.query_type] = (total + 1, changed + (a.answers != b.answers))
    return stats


def summarize(instances, requested=None):
    """pattern -> (requested, produced, avg easy, avg hard)."""
    rows = {}
    for t in QUERY_TYPES:
        qs = [q for q in instances if q.query_type == t]
        req = (requested or {}).get(t, len(qs))
        if not qs and not req:
            continue
        rows[t] = (int(req), len(qs),
                   float(np.mean([len(q.easy) for q in qs])) if qs else 0.0,
                   float(np.mean([len(q.hard) for q in qs])) if qs else 0.0)
    return rows


def write_summary(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("type\trequested\tproduced\tavg_easy\tavg_hard\n")
        for t, (req, prod, e, h) in rows.items():
            f.write(f"{t}\t{req}\t{prod}\t{e:.4f}\t{h:.4f}\n")
