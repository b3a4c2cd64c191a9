"""Synthetic knowledge graphs for tests and desk-scale runs."""
import numpy as np

from ikqe.graph import KnowledgeGraph


def random_graph(num_entities, num_relations, num_edges, seed=0):
    """Uniform random multigraph with exactly ``num_edges`` distinct triples
    (fewer only when the graph is saturated)."""
    rng = np.random.default_rng(seed)
    cap = num_entities * num_entities * num_relations
    target = min(num_edges, cap)
    seen = set()
    rows = []
    while len(rows) < target:
        batch = rng.integers(0, [num_entities, num_relations, num_entities], size=(2 * (target - len(rows)) + 8, 3))
        for h, r, t in batch.tolist():
            if (h, r, t) not in seen:
                seen.add((h, r, t))
                rows.append((h, r, t))
                if len(rows) == target:
                    break
    return KnowledgeGraph.from_triples(np.array(rows, dtype=np.int64).reshape(-1, 3),
                                       num_entities, num_relations)


def typed_cluster_graph(num_entities=300, num_types=3, num_clusters=4, edges_per_entity=6,
                        marker_edges=3, in_cluster=0.9, seed=0):
    """Graph whose link structure follows latent entity types and clusters.

    Relation ``tau * num_types + tau2`` links type ``tau`` to type ``tau2``;
    endpoints share a cluster with probability ``in_cluster``.  Relations
    ``num_types**2 + c`` are cluster markers linking members of cluster ``c``.
    Returns ``(graph, types, clusters)``.
    """
    rng = np.random.default_rng(seed)
    types = rng.integers(0, num_types, num_entities)
    clusters = rng.integers(0, num_clusters, num_entities)
    groups = {(t, c): np.flatnonzero((types == t) & (clusters == c))
              for t in range(num_types) for c in range(num_clusters)}
    by_type = {t: np.flatnonzero(types == t) for t in range(num_types)}
    by_cluster = {c: np.flatnonzero(clusters == c) for c in range(num_clusters)}
    num_rel = num_types * num_types + num_clusters
    seen = set()
    for h in range(num_entities):
        for _ in range(edges_per_entity):
            t2 = int(rng.integers(num_types))
            if rng.random() < in_cluster:
                pool = groups[(t2, int(clusters[h]))]
            else:
                pool = by_type[t2]
            pool = pool[pool != h]
            if len(pool) == 0:
                continue
            tail = int(rng.choice(pool))
            seen.add((h, int(types[h]) * num_types + t2, tail))
        c = int(clusters[h])
        pool = by_cluster[c][by_cluster[c] != h]
        for _ in range(marker_edges if len(pool) else 0):
            seen.add((h, num_types * num_types + c, int(rng.choice(pool))))
    t = np.array(sorted(seen), dtype=np.int64).reshape(-1, 3)
    return KnowledgeGraph.from_triples(t, num_entities, num_rel), types, clusters
