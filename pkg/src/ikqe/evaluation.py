"""Filtered ranking, Hits@k / MRR, macro ROC AUC and report files.

Ties are mid-ranked: ``rank = 1 + #greater + floor(#equal / 2)`` among the
unfiltered competitors, so a constant scorer cannot rank first everywhere.
Metrics are averaged per answer within a query type; ``avg_p`` and ``avg_n``
are unweighted means over the EPFO and negation types present.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from ikqe.checkpoint import load_tensors, save_tensors
from ikqe.query import EPFO_TYPES, NEGATION_TYPES, QUERY_TYPES

HITS_AT = (1, 3, 10)
METRICS = ("hits@1", "hits@3", "hits@10", "mrr", "roc_auc")


class EvaluationError(ValueError):
    pass


def filtered_rank(scores, answer, filter_out=()):
    scores = np.asarray(scores, dtype=np.float64)
    answer = int(answer)
    filt = set(int(e) for e in filter_out)
    if answer in filt:
        raise EvaluationError(f"answer {answer} is in its own filter set")
    mask = np.ones(len(scores), dtype=bool)
    if filt:
        mask[list(filt)] = False
    mask[answer] = False
    others = scores[mask]
    s = scores[answer]
    greater = int(np.count_nonzero(others > s))
    ties = int(np.count_nonzero(others == s))
    return 1 + greater + ties // 2


def _ranks_excluding(scores, answers, always_filtered):
    """Mid-ranks of every answer against entities outside ``always_filtered``
    and outside the other answers (the answer itself is excluded too)."""
    scores = np.asarray(scores, dtype=np.float64)
    answers = np.asarray(sorted(answers), dtype=np.int64)
    keep = np.ones(len(scores), dtype=bool)
    if always_filtered:
        keep[np.fromiter(always_filtered, dtype=np.int64)] = False
    keep[answers] = False
    pool = np.sort(scores[keep])
    a = scores[answers]
    n_gt = len(pool) - np.searchsorted(pool, a, side="right")
    n_eq = np.searchsorted(pool, a, side="right") - np.searchsorted(pool, a, side="left")
    return 1 + n_gt + n_eq // 2


def roc_auc(scores, easy, hard):
    """P(score[easy] > score[hard]) over all pairs, ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    e = np.sort(scores[np.asarray(sorted(easy), dtype=np.int64)])
    h = scores[np.asarray(sorted(hard), dtype=np.int64)]
    if len(e) == 0 or len(h) == 0:
        raise EvaluationError("ROC AUC needs nonempty easy and hard sets")
    # for each hard score: easy above it, easy equal to it
    above = len(e) - np.searchsorted(e, h, side="right")
    equal = np.searchsorted(e, h, side="right") - np.searchsorted(e, h, side="left")
    return float((above.sum() + 0.5 * equal.sum()) / (len(e) * len(h)))


def macro_roc_auc(predictions, instances):
    """Per-type mean of per-query AUC; returns (by_type, skipped_count)."""
    per_type, skipped = {}, 0
    for scores, q in zip(predictions, instances):
        if not q.easy or not q.hard:
            skipped += 1
            continue
        per_type.setdefault(q.query_type, []).append(roc_auc(scores, q.easy, q.hard))
    return {t: float(np.mean(v)) for t, v in per_type.items()}, skipped


@dataclass
class EvalReport:
    per_type: dict  # type -> {metric: value}
    counts: dict  # type -> (queries, answers)
    skipped_auc: int = 0
    mode: str = "hard"
    extra: dict = field(default_factory=dict)

    def aggregate(self, types, metric):
        vals = [self.per_type[t][metric] for t in types if t in self.per_type and metric in self.per_type[t]]
        return float(np.mean(vals)) if vals else float("nan")

    def avg_p(self, metric="hits@10"):
        return self.aggregate(EPFO_TYPES, metric)

    def avg_n(self, metric="hits@10"):
        return self.aggregate(NEGATION_TYPES, metric)

    def metrics(self):
        present = {m for row in self.per_type.values() for m in row}
        return [m for m in METRICS if m in present]

    def to_rows(self):
        types = [t for t in QUERY_TYPES if t in self.per_type]
        header = ["metric", "avg_p", "avg_n"] + types
        rows = [header]
        for m in self.metrics():
            row = [m, self.avg_p(m), self.avg_n(m)]
            row += [self.per_type[t].get(m, float("nan")) for t in types]
            rows.append(row)
        rows.append(["queries", "", ""] + [self.counts[t][0] for t in types])
        rows.append(["answers", "", ""] + [self.counts[t][1] for t in types])
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            for row in self.to_rows():
                w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])

    def to_dict(self):
        def clean(x):
            return None if isinstance(x, float) and np.isnan(x) else x

        return {
            "mode": self.mode,
            "per_type": {t: dict(self.per_type[t]) for t in QUERY_TYPES if t in self.per_type},
            "counts": {t: {"queries": q, "answers": a} for t, (q, a) in self.counts.items()},
            "avg_p": {m: clean(self.avg_p(m)) for m in self.metrics()},
            "avg_n": {m: clean(self.avg_n(m)) for m in self.metrics()},
            "skipped_auc": self.skipped_auc,
            **self.extra,
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _collect(rank_lists):
    ranks = np.concatenate(rank_lists).astype(np.float64)
    row = {f"hits@{k}": float(np.mean(ranks <= k)) for k in HITS_AT}
    row["mrr"] = float(np.mean(1.0 / ranks))
    return row


def _evaluate(predictions, instances, answers_of, filter_of, mode, with_auc):
    predictions = list(predictions)
    if len(predictions) != len(instances):
        raise EvaluationError(f"{len(predictions)} predictions for {len(instances)} queries")
    by_type, counts = {}, {}
    for scores, q in zip(predictions, instances):
        answers = answers_of(q)
        if not answers:
            raise EvaluationError(f"{q.query_type} query {q.dag.render()} has no answers to rank ({mode} mode)")
        r = _ranks_excluding(scores, answers, filter_of(q))
        by_type.setdefault(q.query_type, []).append(r)
        nq, na = counts.get(q.query_type, (0, 0))
        counts[q.query_type] = (nq + 1, na + len(answers))
    per_type = {t: _collect(v) for t, v in by_type.items()}
    skipped = 0
    if with_auc:
        auc, skipped = macro_roc_auc(predictions, instances)
        for t, v in auc.items():
            per_type[t]["roc_auc"] = v
    return EvalReport(per_type, counts, skipped, mode)


def evaluate_hard(predictions, instances, with_auc=True):
    """Rank each hard answer with easy answers and the other hard answers filtered."""
    return _evaluate(predictions, instances, lambda q: q.hard, lambda q: q.easy, "hard", with_auc)


def evaluate_faithfulness(predictions, instances):
    """Rank each easy answer against all entities except the other easy answers."""
    return _evaluate(predictions, instances, lambda q: q.easy, lambda q: (), "faithfulness", False)


# ------------------------------------------------------------- predictions

def save_predictions(path, score_rows, query_index=None, top_n=None):
    """Store per-query top-N ids and scores (ids sorted by score, then id)."""
    score_rows = [np.asarray(s, dtype=np.float64) for s in score_rows]
    if not score_rows:
        save_tensors(path, {"topn_ids": np.zeros((0, 0)), "topn_scores": np.zeros((0, 0)),
                            "query_index": np.zeros(0), "num_entities": np.array(0.0)})
        return
    n = len(score_rows[0])
    top = n if top_n is None else min(int(top_n), n)
    ids = np.empty((len(score_rows), top))
    vals = np.empty((len(score_rows), top))
    for i, s in enumerate(score_rows):
        order = np.lexsort((np.arange(n), -s))[:top]
        ids[i], vals[i] = order, s[order]
    idx = np.arange(len(score_rows)) if query_index is None else np.asarray(query_index)
    save_tensors(path, {"topn_ids": ids, "topn_scores": vals,
                        "query_index": idx.astype(np.float64), "num_entities": np.array(float(n))})


def load_predictions(path):
    """Returns (dense score rows with -inf outside the top-N, query indices)."""
    t = load_tensors(path)
    try:
        ids, vals, qidx, n = t["topn_ids"], t["topn_scores"], t["query_index"], int(t["num_entities"])
    except KeyError as exc:
        raise ValueError(f"{path}: not a predictions file (missing {exc})") from None
    rows = []
    for i in range(len(ids)):
        s = np.full(n, -np.inf)
        s[ids[i].astype(np.int64)] = vals[i]
        rows.append(s)
    return rows, qidx.astype(np.int64)
