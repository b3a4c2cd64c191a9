"""Entity-inductive train/validation/test splits.

All graphs of a bundle share the source graph's entity id space; which
entities belong to which graph is recorded in ``entity_partition``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ikqe.graph import KnowledgeGraph, inverse_triples, load_graph, save_graph

log = logging.getLogger(__name__)

TAGS = ("train", "val_new", "test_new", "dropped")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    ratio_r: float
    pred_fraction: float = 0.15
    seed: int = 0
    # "new": |pred| / |inference edges not in the train graph| = pred_fraction
    # "inference": |pred| / (|retained| + |pred|) = pred_fraction; infeasible
    # for large ratio_r, where too few edges touch new entities
    pred_base: str = "new"

    def __post_init__(self):
        if not 0.0 < self.ratio_r < 1.0:
            raise ValueError(f"ratio_r must lie in (0, 1), got {self.ratio_r}")
        if not 0.0 < self.pred_fraction < 1.0:
            raise ValueError(f"pred_fraction must lie in (0, 1), got {self.pred_fraction}")
        if self.pred_base not in ("inference", "new"):
            raise ValueError(f"pred_base must be 'inference' or 'new', got {self.pred_base!r}")

    @staticmethod
    def ratio_for(inference_to_train):
        """ratio_r giving |E_inf| / |E_train| == ``inference_to_train``."""
        return 1.0 / (2.0 * inference_to_train - 1.0)


@dataclass
class SplitBundle:
    train_graph: KnowledgeGraph
    val_inference_graph: KnowledgeGraph
    test_inference_graph: KnowledgeGraph
    val_pred: np.ndarray
    test_pred: np.ndarray
    entity_partition: np.ndarray  # object array of tags, one per source entity
    config: SplitConfig | None = None
    meta: dict = field(default_factory=dict)

    def entities(self, tag):
        return np.flatnonzero(self.entity_partition == tag)

    def mask(self, *tags):
        return np.isin(self.entity_partition, tags)

    def inference_mask(self, split):
        return self.mask("train", f"{split}_new")

    def achieved_ratio(self, split="test"):
        n_train = int((self.entity_partition == "train").sum())
        return int(self.inference_mask(split).sum()) / max(n_train, 1)


def _sample_pred(rng, triples, train_set, fraction, base, name):
    is_new = np.array([tuple(t) not in train_set for t in triples.tolist()], dtype=bool)
    new_idx = np.flatnonzero(is_new)
    if len(new_idx) == 0:
        raise SplitError(f"{name} inference graph has no removable (non-training) edges")
    total = len(triples) if base == "inference" else len(new_idx)
    n_pred = int(round(fraction * total))
    if n_pred > len(new_idx):
        raise SplitError(f"{name}: need {n_pred} pred edges but only {len(new_idx)} are removable")
    chosen = np.sort(rng.choice(new_idx, size=n_pred, replace=False))
    keep = np.ones(len(triples), dtype=bool)
    keep[chosen] = False
    return triples[keep], triples[chosen]


def make_inductive_split(source: KnowledgeGraph, config: SplitConfig) -> SplitBundle:
    rng = np.random.default_rng(config.seed)
    n = source.num_entities
    n_train = int(round(config.ratio_r * n))
    perm = rng.permutation(n)
    train_ids = perm[:n_train]
    rest = perm[n_train:]
    half = len(rest) // 2
    partition = np.full(n, "dropped", dtype=object)
    partition[train_ids] = "train"
    partition[rest[:half]] = "val_new"
    partition[rest[half:2 * half]] = "test_new"

    # Pred sampling works on base triples; inverses (if any) follow their base edge.
    base_rel = source.num_base_relations
    triples = source.triples
    if source.has_inverses:
        triples = triples[triples[:, 1] < base_rel]

    def restrict(mask, rel_ok=None):
        sel = mask[triples[:, 0]] & mask[triples[:, 2]]
        if rel_ok is not None:
            sel &= rel_ok[triples[:, 1]]
        return triples[sel]

    train_mask = partition == "train"
    train_t = restrict(train_mask)
    if len(train_t) == 0:
        raise SplitError("induced training graph has no edges")
    rel_ok = np.zeros(max(base_rel, 1), dtype=bool)
    rel_ok[np.unique(train_t[:, 1])] = True
    isolated = int(train_mask.sum()) - int(np.unique(train_t[:, [0, 2]]).size)
    if isolated:
        log.warning("%d training entities are isolated in the training graph", isolated)

    train_set = set(map(tuple, train_t.tolist()))
    out = {}
    dropped_rel = {}
    for name in ("val", "test"):
        mask = train_mask | (partition == f"{name}_new")
        all_t = restrict(mask)
        inf_t = restrict(mask, rel_ok)
        dropped_rel[name] = len(all_t) - len(inf_t)
        out[name] = _sample_pred(rng, inf_t, train_set, config.pred_fraction, config.pred_base, name)

    def build(t):
        if source.has_inverses:
            t = np.concatenate([t, inverse_triples(t, base_rel)])
        return KnowledgeGraph.from_triples(t, n, source.num_relations,
                                           num_base_relations=base_rel,
                                           has_inverses=source.has_inverses)

    def pred(t):
        if source.has_inverses:
            t = np.concatenate([t, inverse_triples(t, base_rel)])
        order = np.lexsort((t[:, 2], t[:, 1], t[:, 0]))
        return t[order]

    bundle = SplitBundle(
        train_graph=build(train_t),
        val_inference_graph=build(out["val"][0]),
        test_inference_graph=build(out["test"][0]),
        val_pred=pred(out["val"][1]),
        test_pred=pred(out["test"][1]),
        entity_partition=partition,
        config=config,
    )
    bundle.meta = {
        "ratio_r": config.ratio_r,
        "seed": config.seed,
        "pred_fraction": config.pred_fraction,
        "pred_base": config.pred_base,
        "achieved_ratio": round(bundle.achieved_ratio("test"), 6),
        "achieved_ratio_val": round(bundle.achieved_ratio("val"), 6),
        "isolated_train_entities": isolated,
        "dropped_unseen_relation_edges_val": dropped_rel["val"],
        "dropped_unseen_relation_edges_test": dropped_rel["test"],
    }
    return bundle


@dataclass
class SplitReport:
    checks: dict
    violations: list
    stats: dict

    @property
    def ok(self):
        return not self.violations

    def __str__(self):
        lines = [f"{'ok ' if v else 'FAIL'} {k}" for k, v in self.checks.items()]
        lines += [f"     {k} = {v}" for k, v in self.stats.items()]
        return "\n".join(lines)


def verify_split(bundle: SplitBundle) -> SplitReport:
    part = bundle.entity_partition
    checks, violations, stats = {}, [], {}

    def check(name, ok, detail=""):
        checks[name] = bool(ok)
        if not ok:
            violations.append(f"{name}: {detail}" if detail else name)

    train_set = bundle.train_graph.triple_set()
    train_rels = bundle.train_graph.relation_set()
    train_mask = part == "train"
    check("train graph only uses train entities",
          train_mask[bundle.train_graph.heads].all() and train_mask[bundle.train_graph.tails].all())
    new_sets = {}
    for name in ("val", "test"):
        g = getattr(bundle, f"{name}_inference_graph")
        pred = np.asarray(getattr(bundle, f"{name}_pred")).reshape(-1, 3)
        allowed = train_mask | (part == f"{name}_new")
        other = "test" if name == "val" else "val"
        used = np.zeros(len(part), dtype=bool)
        used[g.heads] = True
        used[g.tails] = True
        if len(pred):
            used[pred[:, 0]] = True
            used[pred[:, 2]] = True
        leaked = np.flatnonzero(used & ~allowed)
        check(f"{name}: entities within train + {name}_new", len(leaked) == 0,
              f"{len(leaked)} foreign entities, e.g. {leaked[:5].tolist()}"
              + (f" ({other}_new present)" if (part[leaked] == f"{other}_new").any() else ""))
        new_sets[name] = set(np.flatnonzero(used & (part != "train")).tolist())
        inf_set = g.triple_set()
        check(f"{name}: train triples contained in inference graph", train_set <= inf_set,
              f"{len(train_set - inf_set)} missing")
        check(f"{name}: relations within train relations", g.relation_set() <= train_rels,
              f"extra {sorted(g.relation_set() - train_rels)}")
        pred_set = set(map(tuple, pred.tolist()))
        check(f"{name}: pred relations within train relations",
              {r for _, r, _ in pred_set} <= train_rels)
        check(f"{name}: pred disjoint from retained triples", not (pred_set & inf_set),
              f"{len(pred_set & inf_set)} overlapping")
        check(f"{name}: pred disjoint from train triples", not (pred_set & train_set))
        n_inf = len(inf_set)
        stats[f"{name}_entities"] = int(allowed.sum())
        stats[f"{name}_triples"] = n_inf
        stats[f"{name}_pred"] = len(pred_set)
        stats[f"{name}_pred_fraction"] = len(pred_set) / max(n_inf + len(pred_set), 1)
        stats[f"{name}_pred_fraction_of_new"] = len(pred_set) / max(n_inf + len(pred_set) - len(train_set), 1)
    check("val_new and test_new disjoint", not (new_sets["val"] & new_sets["test"]),
          f"{len(new_sets['val'] & new_sets['test'])} shared")
    n_train = int(train_mask.sum())
    stats["train_entities"] = n_train
    stats["train_triples"] = len(train_set)
    stats["achieved_ratio"] = stats["test_entities"] / max(n_train, 1)
    stats["achieved_ratio_val"] = stats["val_entities"] / max(n_train, 1)
    return SplitReport(checks, violations, stats)


# ------------------------------------------------------------------- files

def save_bundle(bundle: SplitBundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(bundle.train_graph, out / "train.tsv")
    save_graph(bundle.val_inference_graph, out / "val_inference.tsv")
    save_graph(bundle.test_inference_graph, out / "test_inference.tsv")
    save_graph(bundle.val_pred, out / "val_pred.tsv")
    save_graph(bundle.test_pred, out / "test_pred.tsv")
    with open(out / "partition.tsv", "w", encoding="utf-8") as f:
        for e, tag in enumerate(bundle.entity_partition):
            f.write(f"{e}\t{tag}\n")
    meta = dict(bundle.meta)
    meta.setdefault("num_entities", bundle.train_graph.num_entities)
    meta.setdefault("num_relations", bundle.train_graph.num_relations)
    meta.setdefault("num_base_relations", bundle.train_graph.num_base_relations)
    meta.setdefault("has_inverses", bundle.train_graph.has_inverses)
    with open(out / "split.meta", "w", encoding="utf-8") as f:
        for k in sorted(meta):
            f.write(f"{k}={meta[k]}\n")


def read_meta(path):
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def load_bundle(in_dir) -> SplitBundle:
    d = Path(in_dir)
    meta = read_meta(d / "split.meta")
    n = int(meta["num_entities"])
    n_rel = int(meta["num_relations"])
    base = int(meta.get("num_base_relations", n_rel))
    inv = meta.get("has_inverses", "False") == "True"

    def graph(name):
        g = load_graph(d / name, n, n_rel)
        return KnowledgeGraph.from_triples(g.triples, n, n_rel, num_base_relations=base, has_inverses=inv)

    partition = np.full(n, "dropped", dtype=object)
    for line in (d / "partition.tsv").read_text(encoding="utf-8").splitlines():
        if line.strip():
            e, tag = line.split("\t")
            if tag not in TAGS:
                raise SplitError(f"unknown partition tag {tag!r}")
            partition[int(e)] = tag
    return SplitBundle(
        train_graph=graph("train.tsv"),
        val_inference_graph=graph("val_inference.tsv"),
        test_inference_graph=graph("test_inference.tsv"),
        val_pred=load_graph(d / "val_pred.tsv", n, n_rel).triples,
        test_pred=load_graph(d / "test_pred.tsv", n, n_rel).triples,
        entity_partition=partition,
        meta=meta,
    )
