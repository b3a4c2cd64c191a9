"""Relation-set tokenization, RandomProj + MLP entity encoder, ComplEx scoring
and 1p link-prediction pre-training.

Complex vectors use the interleaved layout ``(re0, im0, re1, im1, ...)``.
The token vocabulary is every relation id of the (inverse-augmented) graph
plus one PAD token with id ``num_relations``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ikqe import autodiff as ad
from ikqe.checkpoint import load_tensors, save_tensors
from ikqe.graph import KnowledgeGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EntityHashes:
    incoming: np.ndarray  # (E, k) relation ids, PAD-filled suffix
    outgoing: np.ndarray
    pad: int

    @property
    def k(self):
        return self.incoming.shape[1]

    def __len__(self):
        return len(self.incoming)

    def select(self, entities):
        entities = np.asarray(entities, dtype=np.int64)
        return EntityHashes(self.incoming[entities], self.outgoing[entities], self.pad)


def _top_k_tokens(entity, relation, num_entities, num_relations, k):
    out = np.full((num_entities, k), num_relations, dtype=np.int64)
    if len(entity) == 0:
        return out
    keys, counts = np.unique(entity * num_relations + relation, return_counts=True)
    ent, rel = keys // num_relations, keys % num_relations
    # rank by frequency (desc), then relation id (asc), within each entity
    order = np.lexsort((rel, -counts, ent))
    ent, rel = ent[order], rel[order]
    start = np.searchsorted(ent, np.arange(num_entities))
    rank = np.arange(len(ent)) - start[ent]
    keep = rank < k
    ent, rel = ent[keep], rel[keep]
    # canonical order of the kept tokens: ascending relation id
    order = np.lexsort((rel, ent))
    ent, rel = ent[order], rel[order]
    start = np.searchsorted(ent, np.arange(num_entities))
    out[ent, np.arange(len(ent)) - start[ent]] = rel
    return out


def tokenize_entities(graph: KnowledgeGraph, k: int) -> EntityHashes:
    """Hash every entity into its k incoming and k outgoing relation types."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    E, R = graph.num_entities, graph.num_relations
    return EntityHashes(
        incoming=_top_k_tokens(graph.tails, graph.relations, E, R, k),
        outgoing=_top_k_tokens(graph.heads, graph.relations, E, R, k),
        pad=R,
    )


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 256
    lr: float = 1e-4
    num_negatives: int = 128
    adv_temperature: float = 0.5
    dim: int = 400
    k: int = 20

    def __post_init__(self):
        if self.dim % 2:
            raise ValueError(f"embedding dim must be even, got {self.dim}")
        if self.k < 1:
            raise ValueError("tokens per node must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.num_negatives < 1:
            raise ValueError("epochs, batch_size and num_negatives must be positive")


class EncoderParams:
    """Token embeddings, frozen random projection, 2-layer MLP and relation
    embeddings.  No tensor depends on the number of entities."""

    def __init__(self, num_relations, dim, k, seed=0):
        if dim % 2:
            raise ValueError(f"embedding dim must be even, got {dim}")
        self.num_relations, self.dim, self.k = int(num_relations), int(dim), int(k)
        rng = np.random.default_rng(seed)
        tokens = rng.normal(0.0, 1.0 / np.sqrt(dim), (num_relations + 1, dim))
        tokens[num_relations] = 0.0
        s = np.sqrt(2.0 / (dim + dim))
        self.store = ad.ParameterStore()
        self.store.add("token_embeddings", tokens)
        self.store.add("random_proj", rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)), trainable=False)
        self.store.add("mlp_w1", rng.normal(0.0, s, (dim, dim)))
        self.store.add("mlp_b1", np.zeros(dim))
        self.store.add("mlp_w2", rng.normal(0.0, s, (dim, dim)))
        self.store.add("mlp_b2", np.zeros(dim))
        self.store.add("relation_embeddings", rng.normal(0.0, 1.0 / np.sqrt(dim), (num_relations, dim)))
        self.history = []

    @property
    def pad(self):
        return self.num_relations

    def __getitem__(self, name):
        return self.store[name]

    def relation_table(self):
        return self.store["relation_embeddings"].data

    def save(self, path):
        tensors = self.store.state_dict()
        tensors["meta_num_relations"] = np.array(self.num_relations, dtype=np.float64)
        tensors["meta_dim"] = np.array(self.dim, dtype=np.float64)
        tensors["meta_k"] = np.array(self.k, dtype=np.float64)
        save_tensors(path, tensors)

    @classmethod
    def load(cls, path):
        t = load_tensors(path)
        try:
            p = cls(int(t.pop("meta_num_relations")), int(t.pop("meta_dim")), int(t.pop("meta_k")))
        except KeyError as exc:
            raise ValueError(f"{path}: not an encoder checkpoint (missing {exc})") from None
        p.store.load_state_dict(t)
        return p


def _direction_sum(tokens, ids, pad):
    """Sum of token rows per entity, skipping PAD (so PAD never gets gradient)."""
    n, k = ids.shape
    flat = ids.ravel()
    real = flat != pad
    rows = np.repeat(np.arange(n), k)[real]
    return ad.scatter_add_rows(ad.gather_rows(tokens, flat[real]), rows, n)


def encode_entities(hashes: EntityHashes, params: EncoderParams):
    """``MLP(P(sum incoming) + P(sum outgoing))`` for every hashed entity.

    Returns an autodiff tensor of shape (len(hashes), d); record on a tape to
    train through it.
    """
    if hashes.pad != params.pad:
        raise ValueError(f"hashes use PAD={hashes.pad} but the encoder expects {params.pad} "
                         "(relation vocabulary mismatch)")
    tok = params["token_embeddings"]
    if tok.shape[1] != params.dim:
        raise ValueError("token embedding width does not match encoder dim")
    proj = params["random_proj"]
    z = ad.add(ad.matmul(_direction_sum(tok, hashes.incoming, hashes.pad), proj),
               ad.matmul(_direction_sum(tok, hashes.outgoing, hashes.pad), proj))
    h = ad.relu(ad.add(ad.matmul(z, params["mlp_w1"]), params["mlp_b1"]))
    return ad.add(ad.matmul(h, params["mlp_w2"]), params["mlp_b2"])


# ----------------------------------------------------------------- ComplEx

def complex_score(h, r, t):
    """Re(<h, r, conj(t)>) for interleaved complex vectors (last axis)."""
    h, r, t = (np.asarray(x, dtype=np.float64) for x in (h, r, t))
    if h.shape[-1] % 2:
        raise ValueError(f"complex vectors need an even dimension, got {h.shape[-1]}")
    if not h.shape[-1] == r.shape[-1] == t.shape[-1]:
        raise ValueError("dimension mismatch")
    q_re = h[..., 0::2] * r[..., 0::2] - h[..., 1::2] * r[..., 1::2]
    q_im = h[..., 0::2] * r[..., 1::2] + h[..., 1::2] * r[..., 0::2]
    return np.sum(q_re * t[..., 0::2] + q_im * t[..., 1::2], axis=-1)


def score_all_tails(entity_emb, relation_emb, heads, relations):
    """(B, E) ComplEx scores of (heads[b], relations[b], every entity)."""
    h = entity_emb[np.asarray(heads)]
    r = relation_emb[np.asarray(relations)]
    q_re = h[:, 0::2] * r[:, 0::2] - h[:, 1::2] * r[:, 1::2]
    q_im = h[:, 0::2] * r[:, 1::2] + h[:, 1::2] * r[:, 0::2]
    return q_re @ entity_emb[:, 0::2].T + q_im @ entity_emb[:, 1::2].T


def _complex_query(h, r):
    """Tensor version: returns (q_re, q_im) of h * r, each (B, d/2)."""
    h_re, h_im = h[:, 0::2], h[:, 1::2]
    r_re, r_im = r[:, 0::2], r[:, 1::2]
    return ad.sub(ad.mul(h_re, r_re), ad.mul(h_im, r_im)), ad.add(ad.mul(h_re, r_im), ad.mul(h_im, r_re))


def adversarial_weights(neg_scores, alpha):
    """softmax(alpha * s) over the negatives of each positive (constants)."""
    z = alpha * np.asarray(neg_scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def batch_loss(params: EncoderParams, hashes: EntityHashes, triples, negatives, alpha):
    """Mean self-adversarial loss over a batch.

    ``triples`` is (B, 3), ``negatives`` (B, N) corrupted tail ids.
    """
    triples = np.asarray(triples, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    B, N = negatives.shape
    needed, inverse = np.unique(np.concatenate([triples[:, 0], triples[:, 2], negatives.ravel()]),
                                return_inverse=True)
    emb = encode_entities(hashes.select(needed), params)
    h_idx, t_idx, n_idx = inverse[:B], inverse[B:2 * B], inverse[2 * B:]
    h = ad.gather_rows(emb, h_idx)
    r = ad.gather_rows(params["relation_embeddings"], triples[:, 1])
    q_re, q_im = _complex_query(h, r)
    t = ad.gather_rows(emb, t_idx)
    pos = ad.reduce_sum(ad.add(ad.mul(q_re, t[:, 0::2]), ad.mul(q_im, t[:, 1::2])), axis=1)
    neg = ad.reshape(ad.gather_rows(emb, n_idx), (B, N, params.dim))
    half = params.dim // 2
    neg_s = ad.reduce_sum(ad.add(ad.mul(ad.reshape(q_re, (B, 1, half)), neg[:, :, 0::2]),
                                 ad.mul(ad.reshape(q_im, (B, 1, half)), neg[:, :, 1::2])), axis=2)
    w = adversarial_weights(neg_s.data, alpha)
    per = ad.add(ad.scale(ad.logsigmoid(pos), -1.0),
                 ad.scale(ad.reduce_sum(ad.mul(ad.logsigmoid(ad.scale(neg_s, -1.0)), w), axis=1), -1.0))
    return ad.reduce_mean(per)


def train_1p(graph: KnowledgeGraph, config: TrainConfig, seed=0, candidates=None, callback=None):
    """Pre-train the encoder and relation embeddings on the triples of ``graph``.

    Negative tails are drawn uniformly from ``candidates`` (default: entities
    incident to the graph).  Returns :class:`EncoderParams` with the mean
    loss per epoch in ``.history``.
    """
    if len(graph) == 0:
        raise ValueError("cannot train on an empty graph")
    if not graph.has_inverses:
        raise ValueError("train_1p expects inverse relations to be materialized")
    rng = np.random.default_rng(seed)
    params = EncoderParams(graph.num_relations, config.dim, config.k, seed=seed)
    hashes = tokenize_entities(graph, config.k)
    pool = np.flatnonzero(graph.entity_mask() if candidates is None else candidates)
    triples = graph.triples
    for epoch in range(config.epochs):
        order = rng.permutation(len(triples))
        total, seen = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = triples[order[lo:lo + config.batch_size]]
            negs = pool[rng.integers(0, len(pool), (len(batch), config.num_negatives))]
            with ad.Tape() as tape:
                loss = batch_loss(params, hashes, batch, negs, config.adv_temperature)
            tape.backward(loss)
            ad.adam_step(params.store, config.lr)
            total += float(loss.data) * len(batch)
            seen += len(batch)
        params.history.append(total / seen)
        if callback is not None:
            callback(epoch, params.history[-1])
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.5f", epoch, params.history[-1])
    return params


def materialize_inference_embeddings(inference_graph: KnowledgeGraph, params: EncoderParams, k=None):
    """Entity table for ``inference_graph`` using frozen encoder parameters."""
    if inference_graph.num_relations > params.num_relations or (
            len(inference_graph) and inference_graph.relations.max() >= params.num_relations):
        raise ValueError(f"inference graph uses relation ids beyond the {params.num_relations} "
                         "the encoder was trained with")
    hashes = tokenize_entities(inference_graph, params.k if k is None else k)
    if hashes.pad != params.pad:
        hashes = EntityHashes(np.where(hashes.incoming == hashes.pad, params.pad, hashes.incoming),
                              np.where(hashes.outgoing == hashes.pad, params.pad, hashes.outgoing),
                              params.pad)
    return encode_entities(hashes, params).data


@dataclass
class Embeddings:
    entity: np.ndarray
    relation: np.ndarray

    def save(self, path):
        save_tensors(path, {"entity_embeddings": self.entity, "relation_embeddings": self.relation})

    @classmethod
    def load(cls, path):
        t = load_tensors(path)
        return cls(t["entity_embeddings"], t["relation_embeddings"])
