"""Relation-typed multigraph with per-relation CSR indexes in both directions."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """Raised for malformed triple files or inconsistent graph input."""


def _csr(keys_a, keys_b, num_relations, num_entities, relations):
    """Sort by (relation, a, b) and build row pointers over relation*E + a."""
    order = np.lexsort((keys_b, keys_a, relations))
    flat = relations[order] * num_entities + keys_a[order]
    ptr = np.searchsorted(flat, np.arange(num_relations * num_entities + 1), side="left")
    return ptr.astype(np.int64), keys_b[order].astype(np.int64)


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Immutable knowledge graph over dense integer ids.

    ``triples`` is an (N, 3) int64 array of (head, relation, tail), sorted
    lexicographically and free of duplicates.  When inverse relations are
    materialized, relation ``r`` has inverse ``r + num_base_relations``.
    """

    num_entities: int
    num_relations: int
    triples: np.ndarray
    num_base_relations: int
    has_inverses: bool = False
    out_ptr: np.ndarray = field(repr=False, default=None)
    out_idx: np.ndarray = field(repr=False, default=None)
    in_ptr: np.ndarray = field(repr=False, default=None)
    in_idx: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_triples(cls, triples, num_entities=None, num_relations=None, *,
                     num_base_relations=None, has_inverses=False):
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(t) and t.min() < 0:
            raise GraphFormatError("negative id in triples")
        if num_entities is None:
            num_entities = int(max(t[:, 0].max(), t[:, 2].max()) + 1) if len(t) else 0
        if num_relations is None:
            num_relations = int(t[:, 1].max() + 1) if len(t) else 0
        if len(t):
            if max(t[:, 0].max(), t[:, 2].max()) >= num_entities:
                raise GraphFormatError(f"entity id exceeds entity count {num_entities}")
            if t[:, 1].max() >= num_relations:
                raise GraphFormatError(f"relation id exceeds relation count {num_relations}")
        order = np.lexsort((t[:, 2], t[:, 1], t[:, 0]))
        t = t[order]
        if len(t) > 1:
            dup = np.all(t[1:] == t[:-1], axis=1)
            if dup.any():
                raise GraphFormatError(f"{int(dup.sum())} duplicate triple(s)")
        t.setflags(write=False)
        h, r, tl = t[:, 0], t[:, 1], t[:, 2]
        out_ptr, out_idx = _csr(h, tl, num_relations, num_entities, r)
        in_ptr, in_idx = _csr(tl, h, num_relations, num_entities, r)
        for a in (out_ptr, out_idx, in_ptr, in_idx):
            a.setflags(write=False)
        return cls(
            num_entities=int(num_entities),
            num_relations=int(num_relations),
            triples=t,
            num_base_relations=int(num_relations if num_base_relations is None else num_base_relations),
            has_inverses=has_inverses,
            out_ptr=out_ptr,
            out_idx=out_idx,
            in_ptr=in_ptr,
            in_idx=in_idx,
        )

    def __len__(self):
        return len(self.triples)

    @property
    def heads(self):
        return self.triples[:, 0]

    @property
    def relations(self):
        return self.triples[:, 1]

    @property
    def tails(self):
        return self.triples[:, 2]

    def _check(self, entity, relation):
        if not 0 <= entity < self.num_entities:
            raise IndexError(f"entity {entity} out of range [0, {self.num_entities})")
        if not 0 <= relation < self.num_relations:
            raise IndexError(f"relation {relation} out of range [0, {self.num_relations})")

    def neighbors(self, source, relation, direction="out"):
        """Sorted, duplicate-free adjacency of ``source`` under ``relation``."""
        return self.adjacency(source, relation, direction).tolist()

    def adjacency(self, source, relation, direction="out"):
        """Like :meth:`neighbors` but returns a read-only int64 view."""
        self._check(source, relation)
        if direction == "out":
            ptr, idx = self.out_ptr, self.out_idx
        elif direction == "in":
            ptr, idx = self.in_ptr, self.in_idx
        else:
            raise ValueError(f"direction must be 'out' or 'in', not {direction!r}")
        k = relation * self.num_entities + source
        return idx[ptr[k]:ptr[k + 1]]

    def triple_set(self):
        return set(map(tuple, self.triples.tolist()))

    def contains(self, head, relation, tail):
        nb = self.adjacency(head, relation, "out")
        i = np.searchsorted(nb, tail)
        return bool(i < len(nb) and nb[i] == tail)

    def entity_mask(self):
        """Boolean mask of entities incident to at least one triple."""
        mask = np.zeros(self.num_entities, dtype=bool)
        mask[self.heads] = True
        mask[self.tails] = True
        return mask

    def relation_set(self):
        return set(np.unique(self.relations).tolist())

    def in_degree(self):
        return np.bincount(self.tails, minlength=self.num_entities)


@dataclass(frozen=True)
class RelationEntityIndex:
    """``reachable[r, t]`` is true iff some edge (h, r, t) exists."""

    reachable: np.ndarray

    @classmethod
    def build(cls, graph: KnowledgeGraph):
        m = np.zeros((graph.num_relations, graph.num_entities), dtype=bool)
        m[graph.relations, graph.tails] = True
        m.setflags(write=False)
        return cls(m)


def load_graph(path, entity_count=None, relation_count=None) -> KnowledgeGraph:
    """Read a ``head<TAB>relation<TAB>tail`` integer triple file."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 3:
                raise GraphFormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer id in {s!r}") from None
            if min(rows[-1]) < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative id")
    return KnowledgeGraph.from_triples(np.array(rows, dtype=np.int64).reshape(-1, 3),
                                       entity_count, relation_count)


def save_graph(graph_or_triples, path):
    triples = graph_or_triples.triples if isinstance(graph_or_triples, KnowledgeGraph) else graph_or_triples
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in triples.tolist():
            f.write(f"{h}\t{r}\t{t}\n")


def load_dict(path):
    """Read an ``id<TAB>label`` sidecar vocabulary file."""
    vocab = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            i, label = line.split("\t", 1)
            vocab[int(i)] = label
    return vocab


def inverse_triples(triples, num_base_relations):
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return np.stack([t[:, 2], t[:, 1] + num_base_relations, t[:, 0]], axis=1)


def add_inverse_relations(graph: KnowledgeGraph) -> KnowledgeGraph:
    if graph.has_inverses:
        raise ValueError("graph already has inverse relations")
    base = graph.num_relations
    t = np.concatenate([graph.triples, inverse_triples(graph.triples, base)])
    return KnowledgeGraph.from_triples(t, graph.num_entities, 2 * base,
                                       num_base_relations=base, has_inverses=True)


def induce_subgraph(graph: KnowledgeGraph, keep):
    """Subgraph on ``keep`` with dense re-indexing.

    Returns ``(subgraph, old_to_new, new_to_old)``; ``old_to_new`` is -1 for
    dropped entities.
    """
    keep = np.unique(np.asarray(list(keep) if isinstance(keep, (set, frozenset)) else keep, dtype=np.int64))
    if len(keep) == 0:
        raise ValueError("keep set is empty")
    if keep[0] < 0 or keep[-1] >= graph.num_entities:
        raise IndexError("keep set contains an out-of-range entity")
    old_to_new = np.full(graph.num_entities, -1, dtype=np.int64)
    old_to_new[keep] = np.arange(len(keep))
    t = graph.triples
    sel = (old_to_new[t[:, 0]] >= 0) & (old_to_new[t[:, 2]] >= 0)
    sub = t[sel]
    sub = np.stack([old_to_new[sub[:, 0]], sub[:, 1], old_to_new[sub[:, 2]]], axis=1)
    g = KnowledgeGraph.from_triples(sub, len(keep), graph.num_relations,
                                    num_base_relations=graph.num_base_relations,
                                    has_inverses=graph.has_inverses)
    return g, old_to_new, keep


def restrict_triples(graph: KnowledgeGraph, keep_mask):
    """Same id space, keeping only triples with both endpoints in ``keep_mask``."""
    t = graph.triples
    sel = keep_mask[t[:, 0]] & keep_mask[t[:, 2]]
    return KnowledgeGraph.from_triples(t[sel], graph.num_entities, graph.num_relations,
                                       num_base_relations=graph.num_base_relations,
                                       has_inverses=graph.has_inverses)
