"""CQD-Beam decoding of EPFO queries over pre-trained ComplEx embeddings.

Every DAG node holds a dense score vector over entities.  A node's vector is
pruned to its top-k entities (ties by ascending id) only when a projection
expands it; each kept entity ``b`` is scored against every tail ``t`` and the
projection output is ``max_b T(acc[b], norm(score(b, r, t)))``.
Intersections and unions combine dense vectors with the t-norm / t-conorm,
so an entity missing from a branch contributes that branch's floor score 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ikqe.fuzzy import Logic, t_conorm, t_norm
from ikqe.nodepiece import score_all_tails
from ikqe.query import EPFO_TYPES, NodeKind, OpKind, QueryDag

NORMALIZATIONS = ("sigmoid", "minmax")


class UnsupportedQueryError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    beam_size: int = 32
    logic: Logic = Logic.PRODUCT
    normalization: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "logic", Logic.parse(self.logic))
        if self.beam_size < 1:
            raise ValueError(f"beam size must be >= 1, got {self.beam_size}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")

    def to_line(self, query_type):
        name = "prod" if self.logic is Logic.PRODUCT else "min"
        return f"{query_type}={name},{self.normalization},{self.beam_size}"


def default_type_configs(beam_size=32):
    return {t: DecoderConfig(beam_size) for t in EPFO_TYPES}


def parse_type_configs(text, base=None):
    """Parse ``type=logic,normalization,beam`` lines (``#`` starts a comment)."""
    configs = dict(base or default_type_configs())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            qtype, rest = (s.strip() for s in line.split("=", 1))
            logic, norm, beam = (s.strip() for s in rest.split(","))
            if qtype not in EPFO_TYPES:
                raise ValueError(f"no decoder config for query type {qtype!r}")
            configs[qtype] = DecoderConfig(int(beam), Logic.parse(logic), norm)
        except ValueError as exc:
            raise ValueError(f"decoder config line {lineno}: {exc}") from None
    return configs


def load_type_configs(path):
    return parse_type_configs(Path(path).read_text(encoding="utf-8"))


def write_type_configs(configs, path):
    with open(path, "w", encoding="utf-8") as f:
        for t in EPFO_TYPES:
            if t in configs:
                f.write(configs[t].to_line(t) + "\n")


def normalize(scores, method, candidates=None):
    """Map raw scores to [0, 1] row-wise; non-candidates get 0."""
    s = np.asarray(scores, dtype=np.float64)
    if method == "sigmoid":
        out = np.empty_like(s)
        pos = s >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
        e = np.exp(s[~pos])
        out[~pos] = e / (1.0 + e)
    elif method == "minmax":
        view = s if candidates is None else np.where(candidates, s, np.nan)
        lo = np.nanmin(view, axis=-1, keepdims=True)
        hi = np.nanmax(view, axis=-1, keepdims=True)
        span = hi - lo
        flat = span == 0
        out = np.where(flat, 0.5, (s - lo) / np.where(flat, 1.0, span))
        out = np.clip(out, 0.0, 1.0)
    else:
        raise ValueError(f"unknown normalization {method!r}")
    if candidates is not None:
        out = np.where(candidates, out, 0.0)
    return out


def score_projection(embeddings, relation, source, config: DecoderConfig, candidates=None):
    """Normalized ComplEx scores of (source, relation, every entity)."""
    raw = score_all_tails(embeddings.entity, embeddings.relation, [source], [relation])[0]
    return normalize(raw, config.normalization, candidates)


def top_k(x, k):
    """Indices of the k largest positive entries, ties by ascending id."""
    support = np.flatnonzero(x > 0)
    return support[np.lexsort((support, -x[support]))[:k]]


def _project(x, relation, hop_scores, config):
    beam = top_k(x, config.beam_size)
    if len(beam) == 0:
        return np.zeros(len(x))
    hop = hop_scores(beam, relation)
    acc = x[beam][:, None]
    combined = acc * hop if config.logic is Logic.PRODUCT else np.minimum(acc, hop)
    return combined.max(axis=0)


def embedding_hop_scores(embeddings, config: DecoderConfig, candidates=None):
    """``(beam, relation) -> (len(beam), E)`` normalized ComplEx scores."""
    def hop(beam, relation):
        raw = score_all_tails(embeddings.entity, embeddings.relation, beam, np.full(len(beam), relation))
        return normalize(raw, config.normalization, candidates)

    return hop


def decode(dag: QueryDag, num_entities, hop_scores, config: DecoderConfig):
    """Beam decoding with an arbitrary normalized hop-score function."""
    if dag.has_negation:
        raise UnsupportedQueryError(
            f"CQD-Beam does not support queries with negation ({dag.query_type}); "
            "its t-norm decoding covers projection, conjunction and disjunction only")
    values = {}
    for i, node in enumerate(dag.nodes):
        if node.kind is NodeKind.ANCHOR:
            if not 0 <= node.entity < num_entities:
                raise IndexError(f"anchor {node.entity} out of range for {num_entities} entities")
            v = np.zeros(num_entities)
            v[node.entity] = 1.0
            values[i] = v
    for op in dag.ops:
        args = [values[j] for j in op.inputs]
        if op.kind is OpKind.PROJECTION:
            out = _project(args[0], op.relation, hop_scores, config)
        elif op.kind is OpKind.INTERSECTION:
            out = args[0]
            for a in args[1:]:
                out = t_norm(config.logic, out, a)
        else:
            out = args[0]
            for a in args[1:]:
                out = t_conorm(config.logic, out, a)
        values[op.output] = out
    return values[dag.target]


def answer_query(dag: QueryDag, embeddings, config: DecoderConfig | dict, candidates=None):
    """Final fuzzy scores for every entity.

    ``config`` may be a single :class:`DecoderConfig` or a per-type mapping.
    ``candidates`` (boolean mask) restricts every hop to those entities.
    """
    if isinstance(config, dict):
        config = config.get(dag.query_type, DecoderConfig())
    hop = embedding_hop_scores(embeddings, config, candidates)
    return decode(dag, len(embeddings.entity), hop, config)
