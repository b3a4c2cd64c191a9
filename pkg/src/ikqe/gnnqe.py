"""GNN-QE: NBFNet relation projection chained with product fuzzy logic.

A projection of fuzzy set ``x`` through relation ``q`` initialises node
states ``h0[e] = x[e] * r_q`` and runs L layers of relational message
passing.  Layer ``l`` derives its relation table from the query relation,
``R_l = reshape(r_q @ W_l + b_l, (|R|, d))``; a message along ``(u, rho, v)``
is ``h[u] * R_l[rho]`` (DistMult), and every node also receives ``h0`` as a
boundary message.  Messages are aggregated with PNA (mean, max, min, std,
each scaled by 1, log(deg+1)/delta and delta/log(deg+1)), then
``h <- relu(Linear([agg; h])) + h``.  The head is ``sigmoid(MLP(h))``.

Queries of one pattern are batched as a disjoint union of graph copies.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ikqe import autodiff as ad
from ikqe.checkpoint import load_tensors, save_tensors
from ikqe.fuzzy import traversal_project
from ikqe.graph import KnowledgeGraph, induce_subgraph
from ikqe.query import NodeKind, OpKind, QUERY_TYPES, TRAIN_TYPES, QueryDag, QueryInstance, from_pattern

log = logging.getLogger(__name__)

_STD_EPS = 1e-6
_LOG_EPS = 1e-12


class PatternError(ValueError):
    pass


def mean_log_degree(graph: KnowledgeGraph):
    """delta: mean of log(deg + 1) over the graph's incident entities, where
    deg counts in-edges plus the boundary message."""
    mask = graph.entity_mask()
    if not mask.any():
        return 1.0
    deg = graph.in_degree()[mask] + 1.0
    return float(np.mean(np.log(deg + 1.0)))


class NBFNetParams:
    def __init__(self, num_relations, dim=32, num_layers=4, mlp_hidden=64, delta=1.0, seed=0):
        self.num_relations, self.dim = int(num_relations), int(dim)
        self.num_layers, self.mlp_hidden = int(num_layers), int(mlp_hidden)
        self.delta = float(delta)
        rng = np.random.default_rng(seed)
        d, R = self.dim, self.num_relations

        def glorot(fan_in, fan_out):
            return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))

        s = ad.ParameterStore()
        s.add("relation_base", rng.normal(0.0, 1.0, (R, d)))
        for l in range(self.num_layers):
            s.add(f"layer{l}_rel_w", glorot(d, R * d))
            s.add(f"layer{l}_rel_b", np.ones(R * d))
            s.add(f"layer{l}_lin_w", glorot(13 * d, d))
            s.add(f"layer{l}_lin_b", np.zeros(d))
        s.add("mlp_w1", glorot(d, self.mlp_hidden))
        s.add("mlp_b1", np.zeros(self.mlp_hidden))
        s.add("mlp_w2", glorot(self.mlp_hidden, 1))
        s.add("mlp_b2", np.zeros(1))
        self.store = s
        self.history = []
        self.train_types = ()

    def __getitem__(self, name):
        return self.store[name]

    def save(self, path):
        t = self.store.state_dict()
        t["meta_shape"] = np.array([self.num_relations, self.dim, self.num_layers, self.mlp_hidden], dtype=np.float64)
        t["meta_delta"] = np.array(self.delta)
        t["meta_train_types"] = np.array([QUERY_TYPES.index(q) for q in self.train_types], dtype=np.float64)
        save_tensors(path, t)

    @classmethod
    def load(cls, path):
        t = load_tensors(path)
        try:
            R, d, L, hidden = (int(v) for v in t.pop("meta_shape"))
            delta = float(t.pop("meta_delta"))
            types = tuple(QUERY_TYPES[int(i)] for i in t.pop("meta_train_types"))
        except KeyError as exc:
            raise ValueError(f"{path}: not a GNN-QE checkpoint (missing {exc})") from None
        p = cls(R, d, L, hidden, delta)
        p.store.load_state_dict(t)
        p.train_types = types
        return p


@dataclass
class _BatchGraph:
    """Edges of B stacked copies of one graph (node id = b * E + e)."""
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray  # b * R + relation, indexes the per-query relation tables
    amp: np.ndarray  # (B*E, 1) log(deg+1)/delta
    att: np.ndarray


def _batch_graph(graph: KnowledgeGraph, batch, delta, drop=None):
    E, R = graph.num_entities, graph.num_relations
    t = graph.triples
    m = len(t)
    offs = np.repeat(np.arange(batch, dtype=np.int64), m)
    src = np.tile(t[:, 0], batch) + offs * E
    dst = np.tile(t[:, 2], batch) + offs * E
    rel = np.tile(t[:, 1], batch) + offs * R
    if drop is not None and len(drop):
        keep = np.ones(batch * m, dtype=bool)
        keep[drop] = False
        src, dst, rel = src[keep], dst[keep], rel[keep]
    deg = np.bincount(dst, minlength=batch * E).astype(np.float64) + 1.0
    ld = np.log(deg + 1.0)[:, None]
    return _BatchGraph(src, dst, rel, ld / delta, delta / ld)


def _pna(msgs, segments, n):
    mean = ad.segment_reduce(msgs, segments, n, "mean")
    sq = ad.segment_reduce(ad.mul(msgs, msgs), segments, n, "mean")
    var = ad.relu(ad.sub(sq, ad.mul(mean, mean)))
    std = ad.sqrt(ad.add(var, _STD_EPS))
    return ad.concat([mean, ad.segment_reduce(msgs, segments, n, "max"),
                      ad.segment_reduce(msgs, segments, n, "min"), std], axis=1)


def _update(agg, h, bg, w, b):
    """``Linear([agg, amp*agg, att*agg, h])`` evaluated block-wise: the
    degree scalers are per-row, so they commute with the weight blocks."""
    k = agg.shape[1]
    y = ad.matmul(agg, ad.concat([w[:k], w[k:2 * k], w[2 * k:3 * k]], axis=1))
    d = y.shape[1] // 3
    out = ad.add(ad.add(y[:, :d], ad.mul(y[:, d:2 * d], bg.amp)), ad.mul(y[:, 2 * d:], bg.att))
    return ad.add(ad.add(out, ad.matmul(h, w[3 * k:])), b)


def _project_logits(bg: _BatchGraph, x, relations, params: NBFNetParams, num_entities):
    """x: (B, E) tensor or array, relations: (B,) ids -> (B, E) logits."""
    x = ad.as_tensor(x)
    B, E = x.shape
    d, R = params.dim, params.num_relations
    relations = np.asarray(relations, dtype=np.int64)
    if np.any(relations < 0) or np.any(relations >= R):
        raise IndexError(f"relation id out of range for {R} relations")
    if E != num_entities:
        raise ValueError(f"input has {E} entries but the graph has {num_entities} entities")
    rq = ad.gather_rows(params["relation_base"], relations)  # (B, d)
    h0 = ad.reshape(ad.mul(ad.reshape(x, (B, E, 1)), ad.reshape(rq, (B, 1, d))), (B * E, d))
    n = B * E
    segments = np.concatenate([bg.dst, np.arange(n)])
    h = h0
    for l in range(params.num_layers):
        rel_table = ad.reshape(ad.add(ad.matmul(rq, params[f"layer{l}_rel_w"]), params[f"layer{l}_rel_b"]),
                               (B * R, d))
        msgs = ad.mul(ad.gather_rows(h, bg.src), ad.gather_rows(rel_table, bg.rel))
        agg = _pna(ad.concat([msgs, h0], axis=0), segments, n)
        upd = _update(agg, h, bg, params[f"layer{l}_lin_w"], params[f"layer{l}_lin_b"])
        h = ad.add(ad.relu(upd), h)
    z = ad.relu(ad.add(ad.matmul(h, params["mlp_w1"]), params["mlp_b1"]))
    z = ad.add(ad.matmul(z, params["mlp_w2"]), params["mlp_b2"])
    return ad.reshape(z, (B, E))


def _check_params(graph, params):
    if graph.num_relations != params.num_relations:
        raise ValueError(f"graph has {graph.num_relations} relations, parameters expect {params.num_relations}")


def nbfnet_project(graph: KnowledgeGraph, x, relation, params: NBFNetParams):
    """Single fuzzy-set projection.  Returns a (E,) tensor when ``x`` is a
    tensor or a tape is recording (so it can sit inside ``execute``), else
    an array."""
    _check_params(graph, params)
    is_tensor = isinstance(x, ad.Tensor) or ad.recording()
    xt = ad.reshape(ad.as_tensor(x), (1, -1))
    bg = _batch_graph(graph, 1, params.delta)
    p = ad.sigmoid(_project_logits(bg, xt, [relation], params, graph.num_entities))
    out = ad.reshape(p, (graph.num_entities,))
    return out if is_tensor else out.data


def projector(params: NBFNetParams):
    """Projector callable for :func:`ikqe.fuzzy.execute`."""
    def project(graph, x, relation):
        return nbfnet_project(graph, x, relation, params)

    return project


def _execute_batch(dags, graph, params, bg):
    """Run B queries of one pattern together; returns (B, E) tensor."""
    B, E = len(dags), graph.num_entities
    first = dags[0]
    values = {}
    for i, node in enumerate(first.nodes):
        if node.kind is NodeKind.ANCHOR:
            v = np.zeros((B, E))
            for b, dag in enumerate(dags):
                a = dag.nodes[i].entity
                if not 0 <= a < E:
                    raise IndexError(f"anchor {a} out of range for {E} entities")
                v[b, a] = 1.0
            values[i] = ad.constant(v)
    for j, op in enumerate(first.ops):
        args = [values[k] for k in op.inputs]
        if op.kind is OpKind.PROJECTION:
            rels = [dag.ops[j].relation for dag in dags]
            out = ad.sigmoid(_project_logits(bg, args[0], rels, params, E))
        elif op.kind is OpKind.NEGATION:
            out = ad.sub(1.0, args[0])
        elif op.kind is OpKind.INTERSECTION:
            out = args[0]
            for a in args[1:]:
                out = ad.mul(out, a)
        else:
            out = args[0]
            for a in args[1:]:
                out = ad.sub(ad.add(out, a), ad.mul(out, a))
        values[op.output] = out
    return values[first.target]


def answer_batch(dags, graph: KnowledgeGraph, params: NBFNetParams):
    """Scores for a list of queries (grouped by pattern internally)."""
    _check_params(graph, params)
    out = [None] * len(dags)
    groups = {}
    for i, dag in enumerate(dags):
        groups.setdefault(dag.query_type, []).append(i)
    for idx in groups.values():
        bg = _batch_graph(graph, len(idx), params.delta)
        res = _execute_batch([dags[i] for i in idx], graph, params, bg).data
        for row, i in enumerate(idx):
            out[i] = res[row]
    return out


def gnnqe_answer(dag: QueryDag, graph: KnowledgeGraph, params: NBFNetParams):
    if dag.query_type not in QUERY_TYPES:
        raise PatternError(f"unknown pattern {dag.query_type!r}")
    return answer_batch([dag], graph, params)[0]


# ----------------------------------------------------------------- training

@dataclass
class GnnTrainConfig:
    batch_size: int = 64
    num_negatives: int = 32
    adv_temperature: float = 0.1
    lr: float = 5e-3
    iterations: int = 10000
    traversal_dropout: float = 0.5
    dim: int = 32
    num_layers: int = 4
    mlp_hidden: int = 64
    patterns: tuple = TRAIN_TYPES

    def __post_init__(self):
        self.patterns = tuple(self.patterns)
        bad = [p for p in self.patterns if p not in TRAIN_TYPES]
        if bad:
            raise PatternError(f"patterns {bad} are not training patterns (allowed: {', '.join(TRAIN_TYPES)})")
        if not 0.0 <= self.traversal_dropout <= 1.0:
            raise ValueError("traversal_dropout must lie in [0, 1]")
        if self.adv_temperature <= 0:
            raise ValueError("adv_temperature must be positive")
        if min(self.batch_size, self.num_negatives, self.iterations, self.dim, self.num_layers) < 1:
            raise ValueError("batch_size, num_negatives, iterations, dim and num_layers must be positive")


class _EdgeIndex:
    def __init__(self, graph):
        self.E, self.R = graph.num_entities, graph.num_relations
        t = graph.triples
        self.keys = (t[:, 0] * self.R + t[:, 1]) * self.E + t[:, 2]  # triples are sorted
        self.base = graph.num_base_relations
        self.inverses = graph.has_inverses

    def find(self, h, r, t):
        key = (h * self.R + r) * self.E + t
        i = np.searchsorted(self.keys, key)
        return int(i) if i < len(self.keys) and self.keys[i] == key else -1

    def with_inverse(self, h, r, t):
        out = [self.find(h, r, t)]
        if self.inverses:
            r2 = r + self.base if r < self.base else r - self.base
            out.append(self.find(t, r2, h))
        return [i for i in out if i >= 0]


def _dropout_edges(dag, graph, edges, answer, p, rng):
    """Edge ids masked for one query: per projection hop, with probability p,
    one traversal edge (u, r, v) into the hop's output set (v = answer when
    the answer is reachable there) together with its inverse."""
    values = {}
    for i, node in enumerate(dag.nodes):
        if node.kind is NodeKind.ANCHOR:
            v = np.zeros(graph.num_entities)
            v[node.entity] = 1.0
            values[i] = v
    dropped = []
    for op in dag.ops:
        args = [values[k] for k in op.inputs]
        if op.kind is OpKind.PROJECTION:
            out = traversal_project(graph, args[0], op.relation)
            if rng.random() < p:
                support = np.flatnonzero(out > 0.5)
                if len(support):
                    v = answer if out[answer] > 0.5 else int(rng.choice(support))
                    heads = graph.adjacency(v, op.relation, "in")
                    heads = heads[args[0][heads] > 0.5]
                    if len(heads):
                        u = int(rng.choice(heads))
                        dropped.extend(edges.with_inverse(u, op.relation, v))
        elif op.kind is OpKind.NEGATION:
            out = 1.0 - args[0]
        elif op.kind is OpKind.INTERSECTION:
            out = np.prod(args, axis=0)
        else:
            out = np.max(args, axis=0)
        values[op.output] = out
    return dropped


def query_loss(probs, positives, negatives, temperature):
    """BCE per query: mean -log p over positives, self-adversarially weighted
    -log(1-p) over negatives; averaged over the batch."""
    B, E = probs.shape
    flat = ad.reshape(ad.clamp(probs, _LOG_EPS, 1.0 - _LOG_EPS), (B * E,))
    pos_idx = np.concatenate([b * E + np.asarray(p, dtype=np.int64) for b, p in enumerate(positives)])
    pos_w = np.concatenate([np.full(len(p), 1.0 / len(p)) for p in positives])
    neg_idx = (np.arange(B)[:, None] * E + negatives).ravel()
    p_neg = flat.data[neg_idx].reshape(negatives.shape)
    logits = np.log(p_neg) - np.log1p(-p_neg)
    z = logits / temperature
    z -= z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    pos_term = ad.reduce_sum(ad.mul(ad.log(ad.take(flat, pos_idx)), pos_w))
    neg_term = ad.reduce_sum(ad.mul(ad.log(ad.sub(1.0, ad.take(flat, neg_idx))), w.ravel()))
    return ad.scale(ad.add(pos_term, neg_term), -1.0 / B)


def _relabel(q, old_to_new):
    dag = from_pattern(q.query_type, [int(old_to_new[a]) for a in q.dag.anchors], q.dag.relations)
    return QueryInstance(dag, old_to_new[sorted(q.easy)], old_to_new[sorted(q.hard)] if q.hard else ())


def train_gnnqe(train_graph: KnowledgeGraph, queries, config: GnnTrainConfig, seed=0,
                candidates=None, callback=None):
    """Train on ``queries`` whose easy answers hold on ``train_graph``.

    Each iteration takes the next pattern in round-robin order and samples a
    batch of its queries uniformly.
    """
    if len(train_graph) == 0:
        raise ValueError("cannot train on an empty graph")
    by_type = {}
    for q in queries:
        if q.query_type not in config.patterns:
            raise PatternError(f"query pattern {q.query_type} is outside the training patterns "
                               f"({', '.join(config.patterns)})")
        if not q.easy:
            raise ValueError(f"training query {q.dag.render()} has no easy answers")
        by_type.setdefault(q.query_type, []).append(q)
    if not by_type:
        raise ValueError("no training queries")
    types = [t for t in QUERY_TYPES if t in by_type]
    rng = np.random.default_rng(seed)
    params = NBFNetParams(train_graph.num_relations, config.dim, config.num_layers, config.mlp_hidden,
                          mean_log_degree(train_graph), seed=seed)
    params.train_types = tuple(types)
    cand = train_graph.entity_mask() if candidates is None else np.asarray(candidates, dtype=bool)
    # Entities outside the graph, the candidates and the queries never
    # influence the loss; the model is equivariant, so drop them.
    keep = train_graph.entity_mask() | cand
    for q in queries:
        keep[q.dag.anchors] = True
        keep[list(q.easy)] = True
    graph, old_to_new, _ = induce_subgraph(train_graph, np.flatnonzero(keep))
    by_type = {t: [_relabel(q, old_to_new) for q in qs] for t, qs in by_type.items()}
    pool = old_to_new[np.flatnonzero(cand)]
    edges = _EdgeIndex(graph)
    E, m = graph.num_entities, len(graph)
    for it in range(config.iterations):
        qtype = types[it % len(types)]
        group = by_type[qtype]
        pick = rng.integers(0, len(group), min(config.batch_size, len(group)))
        batch = [group[i] for i in pick]
        positives, negatives, drop = [], [], []
        for b, q in enumerate(batch):
            pos = np.array(sorted(q.easy), dtype=np.int64)
            positives.append(pos)
            allowed = pool[~np.isin(pool, pos)]
            if len(allowed) == 0:
                allowed = np.setdiff1d(np.arange(E), pos)
            negatives.append(allowed[rng.integers(0, len(allowed), config.num_negatives)])
            if config.traversal_dropout > 0:
                answer = int(rng.choice(pos))
                ids = _dropout_edges(q.dag, graph, edges, answer, config.traversal_dropout, rng)
                drop.extend(b * m + i for i in ids)
        bg = _batch_graph(graph, len(batch), params.delta, np.array(drop, dtype=np.int64))
        with ad.Tape() as tape:
            probs = _execute_batch([q.dag for q in batch], graph, params, bg)
            loss = query_loss(probs, positives, np.stack(negatives), config.adv_temperature)
        tape.backward(loss)
        ad.adam_step(params.store, config.lr)
        params.history.append(float(loss.data))
        if callback is not None:
            callback(it, params.history[-1])
        if it % 100 == 0:
            log.debug("iteration %d (%s) loss %.5f", it, qtype, params.history[-1])
    return params
