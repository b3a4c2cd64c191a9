"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL/SKIP line that is printed in the terminal
summary.  The FB15k-237 half of criterion 10 runs only when IKQE_FB15K237
points at a triple TSV with integer ids (the dataset is not bundled).
"""
import functools
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from ikqe import autodiff as ad
from ikqe.cqd import DecoderConfig, answer_query, embedding_hop_scores
from ikqe.evaluation import evaluate_faithfulness, evaluate_hard, filtered_rank, roc_auc
from ikqe.fuzzy import Logic, answer_set, execute, heuristic_scores, negate, ranking_to_scores, t_conorm, t_norm
from ikqe.gnnqe import GnnTrainConfig, answer_batch, train_gnnqe
from ikqe.graph import RelationEntityIndex, add_inverse_relations, load_graph
from ikqe.nodepiece import (Embeddings, EncoderParams, TrainConfig, materialize_inference_embeddings,
                            score_all_tails, train_1p)
from ikqe.query import EPFO_TYPES, QUERY_TYPES, TRAIN_TYPES, from_pattern, pattern_arity
from ikqe.sampler import SamplerConfig, changed_by_type, recompute_answers, sample_queries
from ikqe.split import SplitConfig, make_inductive_split, verify_split
from ikqe.synthetic import random_graph, typed_cluster_graph
from oracles import chain_dp, dense_adjacency, enumerate_answers, roc_auc_pairs


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.time()
            try:
                note = fn(*args, **kwargs)
            except pytest.skip.Exception as exc:
                ACCEPTANCE.append(f"SKIP {number:>3}  {title}: {exc}")
                raise
            except BaseException:
                ACCEPTANCE.append(f"FAIL {number:>3}  {title}")
                raise
            extra = f"  [{note}]" if note else ""
            ACCEPTANCE.append(f"PASS {number:>3}  {title} ({time.time() - t0:.1f}s){extra}")
        return run
    return wrap


@pytest.fixture(scope="module")
def desk_split():
    g = add_inverse_relations(typed_cluster_graph(300)[0])
    return make_inductive_split(g, SplitConfig(0.5, seed=0))


# ------------------------------------------------------------------ 1

@criterion(1, "traversal executor equals brute-force enumeration")
def test_c1_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(1)
    checked = 0
    for gi in range(50):
        n = int(rng.integers(10, 201))
        R = int(rng.integers(1, 11))
        m = int(rng.integers(n, min(2000, n * n * R // 4) + 1))
        g = random_graph(n, R, m, seed=gi)
        A = dense_adjacency(g.triples, n, R)
        grounded = sample_queries(g, None, SamplerConfig({t: 10 for t in QUERY_TYPES}, max_answers=n, seed=gi))
        for t in QUERY_TYPES:
            dags = [q.dag for q in grounded if q.query_type == t]
            n_a, n_r = pattern_arity(t)
            while len(dags) < 20:
                dags.append(from_pattern(t, rng.integers(0, n, n_a).tolist(), rng.integers(0, R, n_r).tolist()))
            for dag in dags:
                out = execute(dag, g)
                assert set(np.unique(out)) <= {0.0, 1.0}
                assert answer_set(dag, g) == enumerate_answers(t, dag.anchors, dag.relations, A), (gi, t)
                checked += 1
    assert checked == 50 * 14 * 20
    assert time.time() - t0 < 120
    return f"{checked} queries, 0 mismatches"


# ------------------------------------------------------------------ 2

@criterion(2, "fuzzy algebra laws on 1000 random vectors")
def test_c2_fuzzy_algebra():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        x, y, z = rng.random(n), rng.random(n), rng.random(n)
        # exact endpoints exercise the boundary cases
        x[rng.random(n) < 0.1] = 0.0
        y[rng.random(n) < 0.1] = 1.0
        for logic in (Logic.PRODUCT, Logic.GOEDEL):
            for op in (t_norm, t_conorm):
                worst = max(worst,
                            np.abs(op(logic, x, y) - op(logic, y, x)).max(),
                            np.abs(op(logic, op(logic, x, y), z) - op(logic, x, op(logic, y, z))).max())
                out = op(logic, x, y)
                assert (out >= 0).all() and (out <= 1).all()
            worst = max(worst, np.abs(t_norm(logic, x, np.ones(n)) - x).max(),
                        np.abs(t_conorm(logic, x, np.zeros(n)) - x).max())
        worst = max(worst, np.abs(negate(t_norm(Logic.PRODUCT, x, y))
                                  - t_conorm(Logic.PRODUCT, negate(x), negate(y))).max())
    assert worst <= 1e-12
    return f"max abs error {worst:.1e}"


# ------------------------------------------------------------------ 3

@criterion(3, "gradients match central finite differences")
def test_c3_gradients():
    from oracles import central_difference, max_rel_error
    from test_autodiff import PRIMITIVES, grad_check
    from test_gnnqe import _bce, _check_all_grads, _params, _small

    import ikqe.nodepiece as npc
    from ikqe.fuzzy import execute as fexec
    from ikqe.gnnqe import projector
    from ikqe.query import parse_query

    for name, (build, shapes) in sorted(PRIMITIVES.items()):
        for seed in range(3):
            grad_check(build, *shapes, seed=seed, tol=1e-6)
    for build in (ad.log, ad.sqrt, lambda a: ad.clamp(a, 0.7, 1.6)):
        grad_check(build, (4, 3), positive=True, tol=1e-6)

    # NodePiece encoder + ComplEx self-adversarial loss (weights held constant)
    g = add_inverse_relations(random_graph(9, 2, 15, seed=5))
    hashes = npc.tokenize_entities(g, 3)
    params = EncoderParams(g.num_relations, 4, 3, seed=7)
    rng = np.random.default_rng(1)
    triples = g.triples[rng.choice(len(g), 5, replace=False)]
    negs = rng.integers(0, 9, (5, 4))
    frozen = npc.adversarial_weights(
        score_all_tails(npc.encode_entities(hashes, params).data, params.relation_table(),
                        triples[:, 0], triples[:, 1])[np.arange(5)[:, None], negs], 0.5)
    original = npc.adversarial_weights
    npc.adversarial_weights = lambda scores, alpha: frozen
    try:
        def loss():
            return npc.batch_loss(params, hashes, triples, negs, 0.5)

        with ad.Tape() as tape:
            out = loss()
        tape.backward(out)
        worst_np = 0.0
        for name in ("token_embeddings", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "relation_embeddings"):
            p = params[name]
            numeric = central_difference(lambda: float(loss().data), p.data)
            worst_np = max(worst_np, max_rel_error(p.grad, numeric))
    finally:
        npc.adversarial_weights = original
    assert worst_np <= 1e-6

    # 2-hop NBFNet chain joined with a t-norm
    g = _small(seed=2, n=7, m=10)
    params = _params(g, seed=3)
    dag = parse_query("AND(P(r1, P(r0, e0)), P(r2, e1))")
    labels = (rng.random(7) < 0.4).astype(float)
    _check_all_grads(params, lambda: _bce(fexec(dag, g, projector(params), Logic.PRODUCT), labels), 1e-4)
    return f"{len(PRIMITIVES) + 3} primitives, NodePiece rel err {worst_np:.1e}"


# ------------------------------------------------------------------ 4

@criterion(4, "CQD-Beam with full beam equals the exhaustive dynamic program")
def test_c4_cqd_exactness():
    n = 120
    g = add_inverse_relations(random_graph(n, 4, 600, seed=4))
    params = EncoderParams(g.num_relations, 16, 8, seed=4)
    emb = Embeddings(materialize_inference_embeddings(g, params), params.relation_table())
    rng = np.random.default_rng(4)
    worst = 0.0
    for logic, tnorm in (("prod", lambda a, b: a * b), ("min", min)):
        cfg = DecoderConfig(n, logic)
        hop = embedding_hop_scores(emb, cfg)
        fields = {r: hop(np.arange(n), r) for r in range(g.num_relations)}
        for qtype in ("2p", "3p"):
            for _ in range(4):
                rels = rng.integers(0, g.num_relations, pattern_arity(qtype)[1]).tolist()
                anchor = int(rng.integers(n))
                s = answer_query(from_pattern(qtype, [anchor], rels), emb, cfg)
                ref = chain_dp(anchor, [fields[r] for r in rels], tnorm)
                worst = max(worst, float(np.abs(s - ref).max()))
                assert np.lexsort((np.arange(n), -s))[:10].tolist() == np.lexsort((np.arange(n), -ref))[:10].tolist()
    assert worst <= 1e-12
    return f"max abs error {worst:.1e}"


# ------------------------------------------------------------------ 5

@pytest.mark.slow
@criterion(5, "NodePiece+ComplEx memorizes a 100-entity / 500-triple graph")
def test_c5_memorization():
    t0 = time.time()
    base = random_graph(100, 25, 500, seed=0)
    g = add_inverse_relations(base)
    cfg = TrainConfig(epochs=200, batch_size=256, lr=0.01, num_negatives=32, adv_temperature=1.0, dim=64, k=64)
    params = train_1p(g, cfg, seed=0)
    emb = materialize_inference_embeddings(g, params)
    S = score_all_tails(emb, params.relation_table(), base.heads, base.relations)
    answers = {}
    for h, r, t in g.triples.tolist():
        answers.setdefault((h, r), set()).add(t)
    hits = [filtered_rank(S[i], t, answers[(h, r)] - {t}) == 1 for i, (h, r, t) in enumerate(base.triples.tolist())]
    h1 = float(np.mean(hits))
    assert h1 >= 0.9
    assert time.time() - t0 < 300
    return f"filtered Hits@1 {h1:.3f} after {cfg.epochs} epochs"


# ------------------------------------------------------------------ 6

@criterion(6, "NodePiece-QE + CQD-Beam beats the edge-type heuristic on unseen anchors")
def test_c6_desk_pipeline(desk_split):
    b = desk_split
    new = b.mask("test_new")
    qs = sample_queries(b.test_inference_graph, b.test_pred,
                        SamplerConfig({t: 30 for t in EPFO_TYPES}, max_answers=100, seed=1, require_pred_edge=True))
    qs = [q for q in qs if any(new[a] for a in q.dag.anchors)]
    assert len(qs) >= 100
    cfg = TrainConfig(epochs=100, batch_size=256, lr=0.01, num_negatives=32, adv_temperature=1.0, dim=64, k=16)
    params = train_1p(b.train_graph, cfg, seed=0, candidates=b.mask("train"))
    emb = Embeddings(materialize_inference_embeddings(b.test_inference_graph, params), params.relation_table())
    cand = b.inference_mask("test")
    preds = [np.where(cand, answer_query(q.dag, emb, DecoderConfig(), cand), -np.inf) for q in qs]
    ours = evaluate_hard(preds, qs, with_auc=False).avg_p()
    index = RelationEntityIndex.build(b.test_inference_graph)
    heur = [np.where(cand, ranking_to_scores(heuristic_scores(q.dag, index, seed=0)[1]), -np.inf) for q in qs]
    baseline = evaluate_hard(heur, qs, with_auc=False).avg_p()
    assert ours > baseline
    return f"avg_p Hits@10 {ours:.3f} vs heuristic {baseline:.3f} on {len(qs)} queries"


# ------------------------------------------------------------------ 7

@pytest.mark.slow
@criterion(7, "GNN-QE faithfulness on training queries; zero-shot patterns run")
def test_c7_gnnqe_faithfulness(desk_split):
    t0 = time.time()
    tg = desk_split.train_graph
    qs = sample_queries(tg, None, SamplerConfig({t: 50 for t in TRAIN_TYPES}, max_answers=50, seed=0))
    iterations = int(os.environ.get("IKQE_ACCEPT_GNN_ITERS", "300"))
    params = train_gnnqe(tg, qs, GnnTrainConfig(batch_size=16, iterations=iterations), seed=0,
                         candidates=desk_split.mask("train"))
    cand = desk_split.mask("train")
    preds = [np.where(cand, s, -np.inf) for s in answer_batch([q.dag for q in qs], tg, params)]
    rep = evaluate_faithfulness(preds, qs)
    worst = min(row["hits@10"] for row in rep.per_type.values())
    assert rep.avg_p() >= 0.9 and rep.avg_n() >= 0.9
    zero_shot = sample_queries(tg, None, SamplerConfig({t: 10 for t in ("ip", "pi", "2u", "up")}, seed=3))
    out = answer_batch([q.dag for q in zero_shot], tg, params)
    assert all(np.isfinite(s).all() and ((s >= 0) & (s <= 1)).all() for s in out)
    assert time.time() - t0 < 1800
    return (f"{iterations} iterations, train Hits@10 avg_p {rep.avg_p():.3f} avg_n {rep.avg_n():.3f} "
            f"(worst type {worst:.3f})")


# ------------------------------------------------------------------ 8

@criterion(8, "metrics: AUC equals pair counting, rank invariance, exact predictor")
def test_c8_metrics():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), 1)
        perm = rng.permutation(n)
        n_easy = int(rng.integers(1, n))
        n_hard = int(rng.integers(1, n - n_easy + 1))
        easy, hard = set(perm[:n_easy].tolist()), set(perm[n_easy:n_easy + n_hard].tolist())
        assert roc_auc(scores, easy, hard) == roc_auc_pairs(scores, easy, hard)
    for transform in (np.exp, lambda x: 3 * x - 7, lambda x: x ** 3, np.arctan):
        for _ in range(100):
            scores = np.round(rng.normal(size=40), 1)
            answer = int(rng.integers(40))
            filt = set(rng.choice(40, 5).tolist()) - {answer}
            assert filtered_rank(transform(scores), answer, filt) == filtered_rank(scores, answer, filt)
    g = random_graph(80, 5, 500, seed=8)
    qs = sample_queries(g, None, SamplerConfig({t: 10 for t in QUERY_TYPES}, max_answers=20, seed=8))
    rep = evaluate_faithfulness([execute(q.dag, g) for q in qs], qs)
    assert all(row["hits@10"] == 1.0 for row in rep.per_type.values())


# ------------------------------------------------------------------ 9

@criterion(9, "split integrity at 10^4 entities for r in {0.9, 0.5, 0.2}")
def test_c9_split_integrity():
    g = add_inverse_relations(random_graph(10_000, 20, 60_000, seed=0))
    notes = []
    for r in (0.9, 0.5, 0.2):
        b = make_inductive_split(g, SplitConfig(r, seed=0))
        rep = verify_split(b)
        assert rep.ok, rep.violations
        for name in ("val", "test"):
            assert 0.149 <= rep.stats[f"{name}_pred_fraction_of_new"] <= 0.151
        assert abs(len(b.entities("train")) / g.num_entities - r) <= 0.05 * r
        requested = (1 + r) / (2 * r)
        for name in ("val", "test"):
            assert abs(b.achieved_ratio(name) - requested) <= 0.05 * requested
        notes.append(f"r={r}: ratio {b.achieved_ratio():.3f}")
    return ", ".join(notes)


# ------------------------------------------------------------------ 10

@criterion(10, "training 2p queries gain new answers on the test inference graph")
def test_c10_recompute_desk(desk_split):
    b = desk_split
    qs = sample_queries(b.train_graph, None, SamplerConfig({"2p": 200}, seed=10))
    new, changed = recompute_answers(qs, b.test_inference_graph, b.inference_mask("test"))
    total, n_changed = changed_by_type(qs, new)["2p"]
    assert n_changed == changed and changed > 0
    return f"{changed}/{total} = {changed / total:.1%} of 2p queries changed"


@criterion("10b", "FB15k-237 at the 175% configuration: new-answer share near 79.2%")
def test_c10b_recompute_fb15k237():
    path = os.environ.get("IKQE_FB15K237")
    if not path or not os.path.exists(path):
        pytest.skip("set IKQE_FB15K237 to an integer-id FB15k-237 triple file to run")
    g = add_inverse_relations(load_graph(path))
    b = make_inductive_split(g, SplitConfig(SplitConfig.ratio_for(1.75), seed=0))
    qs = sample_queries(b.train_graph, None, SamplerConfig({"2p": 2000}, seed=10))
    _, changed = recompute_answers(qs, b.test_inference_graph, b.inference_mask("test"))
    share = changed / len(qs)
    assert abs(share - 0.792) <= 0.15
    return f"{share:.1%} of 2p queries changed"
