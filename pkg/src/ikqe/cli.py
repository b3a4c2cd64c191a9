"""Command-line pipeline: split, sample-queries, train-lp, train-gnnqe,
answer, evaluate, verify.

Settings resolve as: built-in defaults < ``--config`` file < environment
(``IKQE_SEED``, ``IKQE_WORKERS``) < command-line flags.  Every command
writes the resolved configuration and a manifest of input/output content
hashes next to its outputs.

Exit codes: 0 success, 1 verification failures, 2 usage / configuration /
missing input, 3 engine cannot handle the query pattern.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ikqe.cqd import UnsupportedQueryError

log = logging.getLogger("ikqe")

EXIT_OK, EXIT_VIOLATIONS, EXIT_USAGE, EXIT_UNSUPPORTED = 0, 1, 2, 3

ENGINES = ("traversal", "heuristic", "nodepiece", "gnnqe")

DEFAULTS = {
    "run": {"seed": 0, "workers": 1},
    "split": {"ratio": 0.5, "pred_fraction": 0.15, "pred_base": "new", "inverse": True},
    "sampler": {"counts": "", "count": 100, "max_answers": 1000, "strict": False},
    "model": {
        "engine": "nodepiece",
        "epochs": 2000, "batch_size": 256, "lr": 1e-4, "num_negatives": 128,
        "adv_temperature": 0.5, "dim": 400, "k": 20,
        "gnn_iterations": 10000, "gnn_batch_size": 64, "gnn_lr": 5e-3, "gnn_negatives": 32,
        "gnn_adv_temperature": 0.1, "gnn_dim": 32, "gnn_layers": 4, "gnn_mlp_hidden": 64,
        "traversal_dropout": 0.5,
    },
    "decoder": {"beam_size": 32, "logic": "prod", "normalization": "sigmoid", "type_config": ""},
    "eval": {"mode": "hard", "top_n": 0, "roc_auc": True},
}


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


class ConfigError(CliError):
    pass


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return str(raw).strip()


class RunConfig:
    """Sectioned key=value settings with typed defaults."""

    def __init__(self):
        self.values = {s: dict(v) for s, v in DEFAULTS.items()}

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        self.values[section][key] = _coerce(section, key, value)

    def load(self, path):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                self.set(section, key, value)
        return self

    def apply_env(self, environ=None):
        env = os.environ if environ is None else environ
        for var, key in (("IKQE_SEED", "seed"), ("IKQE_WORKERS", "workers")):
            if env.get(var, "").strip():
                self.set("run", key, env[var])
        return self

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for section, values in self.values.items():
                f.write(f"[{section}]\n")
                for k, v in values.items():
                    f.write(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n")
                f.write("\n")


# ------------------------------------------------------------------ helpers

def _require(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {path}")
    return p


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths):
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file() and f.name not in ("manifest.json", "resolved_config.ini"):
                    out[str(f)] = _sha256(f)
        elif p.is_file():
            out[str(p)] = _sha256(p)
    return out


def _finish(command, config, inputs, outputs, out_dir, prefix=""):
    """Write the resolved config and manifest; outputs must exist."""
    out_dir = Path(out_dir)
    missing = [str(o) for o in outputs if not Path(o).exists()]
    if missing:
        raise CliError(f"outputs were not written: {missing}", EXIT_USAGE)
    cfg_path = out_dir / f"{prefix}resolved_config.ini"
    config.write(cfg_path)
    manifest = {
        "command": command,
        "inputs": _hash_inputs(inputs),
        "outputs": {Path(o).name: _sha256(o) for o in outputs},
        "config": cfg_path.name,
    }
    with open(out_dir / f"{prefix}manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _file_outputs(path):
    """(directory, prefix) for sidecar files of a single output file."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p.parent, p.name + "."


def _parse_counts(text, default_types, default_count):
    from ikqe.query import QUERY_TYPES

    if not text:
        return {t: default_count for t in default_types}
    counts = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part and ":" not in part:
            raise ConfigError(f"query counts must look like 1p=100,2p=50; got {part!r}")
        t, c = part.replace(":", "=").split("=", 1)
        t = t.strip()
        if t not in QUERY_TYPES:
            raise ConfigError(f"unknown query type {t!r} in counts")
        try:
            counts[t] = int(c)
        except ValueError:
            raise ConfigError(f"count for {t} is not an integer: {c!r}") from None
    return counts


def _parse_types(text):
    from ikqe.query import QUERY_TYPES

    types = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in types if t not in QUERY_TYPES]
    if bad:
        raise CliError(f"unknown query type(s): {', '.join(bad)}")
    return types


def _load_split(path):
    from ikqe.split import SplitError, load_bundle

    d = _require(path, "split directory")
    if not (d / "split.meta").exists():
        raise CliError(f"{path} is not a split directory (split.meta missing)")
    try:
        return load_bundle(d)
    except (SplitError, ValueError) as exc:
        raise CliError(f"cannot read split {path}: {exc}") from None


def _graph_for(bundle, which):
    if which == "train":
        return bundle.train_graph, bundle.mask("train"), None
    if which == "val":
        return bundle.val_inference_graph, bundle.inference_mask("val"), bundle.val_pred
    return bundle.test_inference_graph, bundle.inference_mask("test"), bundle.test_pred


def _read_queries(path):
    from ikqe.query import QuerySchemaError, read_queries

    _require(path, "query file")
    try:
        return read_queries(path)
    except QuerySchemaError as exc:
        raise CliError(f"{path}: {exc}") from None


# ----------------------------------------------------------------- commands

def cmd_split(args, config):
    from ikqe.graph import GraphFormatError, add_inverse_relations, load_graph
    from ikqe.split import SplitConfig, SplitError, make_inductive_split, save_bundle, verify_split

    src = _require(args.input, "input graph")
    try:
        graph = load_graph(src)
    except GraphFormatError as exc:
        raise CliError(str(exc)) from None
    if config.get("split", "inverse"):
        graph = add_inverse_relations(graph)
    try:
        sc = SplitConfig(ratio_r=config.get("split", "ratio"), pred_fraction=config.get("split", "pred_fraction"),
                         seed=config.get("run", "seed"), pred_base=config.get("split", "pred_base"))
        bundle = make_inductive_split(graph, sc)
    except (ValueError, SplitError) as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    save_bundle(bundle, out)
    report = verify_split(bundle)
    print(report)
    names = ["train.tsv", "val_inference.tsv", "test_inference.tsv", "val_pred.tsv", "test_pred.tsv",
             "partition.tsv", "split.meta"]
    _finish("split", config, [src], [out / n for n in names], out)
    return EXIT_OK if report.ok else EXIT_VIOLATIONS


def cmd_sample(args, config):
    from ikqe.query import QUERY_TYPES, TRAIN_TYPES, write_queries
    from ikqe.sampler import (SamplerConfig, SamplingError, changed_by_type, recompute_answers, sample_queries,
                              summarize, write_summary)

    bundle = _load_split(args.split)
    graph, _, pred = _graph_for(bundle, args.which)
    default_types = TRAIN_TYPES if args.which == "train" else QUERY_TYPES
    counts = _parse_counts(config.get("sampler", "counts"), default_types, config.get("sampler", "count"))
    try:
        sc = SamplerConfig(counts, max_answers=config.get("sampler", "max_answers"), seed=config.get("run", "seed"),
                           require_pred_edge=args.which != "train", strict=config.get("sampler", "strict"))
        instances = sample_queries(graph, pred, sc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    except SamplingError as exc:
        raise CliError(str(exc), EXIT_VIOLATIONS) from None
    out_dir, prefix = _file_outputs(args.out)
    write_queries(instances, args.out)
    summary_path = out_dir / f"{prefix}summary.tsv"
    write_summary(summarize(instances, counts), summary_path)
    outputs = [args.out, summary_path]
    if args.recompute_on:
        target, mask, _ = _graph_for(bundle, args.recompute_on)
        try:
            recomputed, changed = recompute_answers(instances, target, mask)
        except KeyError as exc:
            raise CliError(str(exc).strip("'\"")) from None
        stats = changed_by_type(instances, recomputed)
        report = {
            "graph": args.recompute_on,
            "total": len(instances),
            "changed": int(changed),
            "fraction": changed / max(len(instances), 1),
            "by_type": {t: {"total": n, "changed": c, "fraction": c / n} for t, (n, c) in stats.items()},
        }
        rec_path = out_dir / f"{prefix}recomputed_{args.recompute_on}.jsonl"
        write_queries(recomputed, rec_path)
        rep_path = out_dir / f"{prefix}recompute_report.json"
        with open(rep_path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
        for t, row in report["by_type"].items():
            print(f"{t}\tnew answers on {args.recompute_on}: {row['changed']}/{row['total']} ({row['fraction']:.3f})")
        outputs += [rec_path, rep_path]
    print(f"wrote {len(instances)} queries to {args.out}")
    _finish("sample-queries", config, [args.split], outputs, out_dir, prefix)
    return EXIT_OK


def cmd_train_lp(args, config):
    from ikqe.nodepiece import TrainConfig, train_1p

    bundle = _load_split(args.split)
    m = config.values["model"]
    try:
        tc = TrainConfig(epochs=m["epochs"], batch_size=m["batch_size"], lr=m["lr"], num_negatives=m["num_negatives"],
                         adv_temperature=m["adv_temperature"], dim=m["dim"], k=m["k"])
        params = train_1p(bundle.train_graph, tc, seed=config.get("run", "seed"), candidates=bundle.mask("train"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "encoder.ckpt")
    with open(out / "loss.csv", "w", encoding="utf-8") as f:
        f.write("epoch,loss\n")
        for i, v in enumerate(params.history):
            f.write(f"{i},{v!r}\n")
    _finish("train-lp", config, [args.split], [out / "encoder.ckpt", out / "loss.csv"], out)
    return EXIT_OK


def cmd_train_gnnqe(args, config):
    from ikqe.gnnqe import GnnTrainConfig, PatternError, train_gnnqe

    bundle = _load_split(args.split)
    queries = _read_queries(args.queries)
    m = config.values["model"]
    try:
        gc = GnnTrainConfig(batch_size=m["gnn_batch_size"], num_negatives=m["gnn_negatives"],
                            adv_temperature=m["gnn_adv_temperature"], lr=m["gnn_lr"],
                            iterations=m["gnn_iterations"], traversal_dropout=m["traversal_dropout"],
                            dim=m["gnn_dim"], num_layers=m["gnn_layers"], mlp_hidden=m["gnn_mlp_hidden"])
        params = train_gnnqe(bundle.train_graph, queries, gc, seed=config.get("run", "seed"),
                             candidates=bundle.mask("train"))
    except PatternError as exc:
        raise CliError(str(exc), EXIT_UNSUPPORTED) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "gnnqe.ckpt")
    with open(out / "loss.csv", "w", encoding="utf-8") as f:
        f.write("iteration,loss\n")
        for i, v in enumerate(params.history):
            f.write(f"{i},{v!r}\n")
    _finish("train-gnnqe", config, [args.split, args.queries], [out / "gnnqe.ckpt", out / "loss.csv"], out)
    return EXIT_OK


def _chunks(n, workers):
    size = max(1, -(-n // max(workers, 1)))
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def _build_engine(engine, args, config, graph, candidates):
    """Returns ``score(list_of_dags) -> list_of_score_vectors``."""
    from ikqe.fuzzy import execute, heuristic_scores, ranking_to_scores
    from ikqe.graph import RelationEntityIndex

    seed = config.get("run", "seed")
    if engine == "traversal":
        return lambda dags: [execute(d, graph) for d in dags]
    if engine == "heuristic":
        index = RelationEntityIndex.build(graph)

        def heuristic(dags):
            return [ranking_to_scores(heuristic_scores(d, index, seed=seed)[1]) for d in dags]

        return heuristic
    if not args.checkpoint:
        raise CliError(f"engine {engine} needs --checkpoint")
    ckpt = _require(args.checkpoint, "checkpoint")
    if engine == "nodepiece":
        from ikqe.cqd import DecoderConfig, answer_query, default_type_configs, parse_type_configs
        from ikqe.nodepiece import EncoderParams, Embeddings, materialize_inference_embeddings

        try:
            params = EncoderParams.load(ckpt)
            emb = Embeddings(materialize_inference_embeddings(graph, params), params.relation_table())
        except ValueError as exc:
            raise CliError(f"{ckpt}: {exc}") from None
        d = config.values["decoder"]
        try:
            base = DecoderConfig(d["beam_size"], d["logic"], d["normalization"])
            configs = {t: base for t in default_type_configs(base.beam_size)}
            if d["type_config"]:
                configs = parse_type_configs(_require(d["type_config"], "decoder config").read_text(), configs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return lambda dags: [answer_query(q, emb, configs, candidates) for q in dags]
    from ikqe.gnnqe import NBFNetParams, answer_batch

    try:
        params = NBFNetParams.load(ckpt)
    except ValueError as exc:
        raise CliError(f"{ckpt}: {exc}") from None
    if params.num_relations != graph.num_relations:
        raise CliError(f"checkpoint expects {params.num_relations} relations, graph has {graph.num_relations}")
    return lambda dags: answer_batch(dags, graph, params)


def cmd_answer(args, config):
    from ikqe.query import NEGATION_TYPES

    bundle = _load_split(args.split)
    graph, candidates, _ = _graph_for(bundle, args.which)
    queries = _read_queries(args.queries)
    index = list(range(len(queries)))
    if args.types:
        wanted = set(_parse_types(args.types))
        index = [i for i in index if queries[i].query_type in wanted]
    engine = config.get("model", "engine")
    if engine not in ENGINES:
        raise ConfigError(f"unknown engine {engine!r} (choose from {', '.join(ENGINES)})")
    if engine == "nodepiece":
        neg = sorted({queries[i].query_type for i in index} & set(NEGATION_TYPES))
        if neg:
            raise CliError(f"engine nodepiece decodes with CQD-Beam, which does not support queries with "
                           f"negation ({', '.join(neg)}); restrict with --types", EXIT_UNSUPPORTED)
    for i in index:
        for a in queries[i].dag.anchors:
            if not 0 <= a < graph.num_entities:
                raise CliError(f"query {i}: anchor {a} outside the graph's {graph.num_entities} entities")
    score = _build_engine(engine, args, config, graph, candidates)
    dags = [queries[i].dag for i in index]
    workers = config.get("run", "workers")
    if workers > 1 and len(dags) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda r: score([dags[i] for i in r]), _chunks(len(dags), workers)))
        rows = [row for part in parts for row in part]
    else:
        rows = score(dags)
    rows = [np.where(candidates, np.asarray(r, dtype=np.float64), -np.inf) for r in rows]
    from ikqe.evaluation import save_predictions

    top_n = config.get("eval", "top_n") or None
    out_dir, prefix = _file_outputs(args.out)
    save_predictions(args.out, rows, query_index=index, top_n=top_n)
    print(f"answered {len(rows)} queries with {engine}")
    inputs = [args.split, args.queries] + ([args.checkpoint] if args.checkpoint else [])
    _finish("answer", config, inputs, [args.out], out_dir, prefix)
    return EXIT_OK


def cmd_evaluate(args, config):
    from ikqe.evaluation import EvaluationError, evaluate_faithfulness, evaluate_hard, load_predictions

    _require(args.predictions, "predictions")
    try:
        rows, index = load_predictions(args.predictions)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    queries = _read_queries(args.queries)
    if len(index) and index.max() >= len(queries):
        raise CliError(f"predictions reference query {index.max()} but {args.queries} has {len(queries)}")
    selected = [queries[i] for i in index]
    mode = config.get("eval", "mode")
    try:
        if mode == "hard":
            report = evaluate_hard(rows, selected, with_auc=config.get("eval", "roc_auc"))
        elif mode == "faithfulness":
            report = evaluate_faithfulness(rows, selected)
        else:
            raise ConfigError(f"[eval] mode must be 'hard' or 'faithfulness', got {mode!r}")
    except EvaluationError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out.with_suffix(".csv"), out.with_suffix(".json")
    report.write_csv(csv_path)
    report.write_json(json_path)
    print(f"avg_p hits@10 {report.avg_p():.4f}  avg_n hits@10 {report.avg_n():.4f}")
    for t, row in report.per_type.items():
        print(f"{t}\t" + "  ".join(f"{k} {v:.4f}" for k, v in row.items()))
    _finish("evaluate", config, [args.predictions, args.queries], [csv_path, json_path], out.parent, out.stem + ".")
    return EXIT_OK


def cmd_verify(args, config):
    from ikqe.split import verify_split

    bundle = _load_split(args.split)
    report = verify_split(bundle)
    print(report)
    if report.violations:
        for v in report.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_VIOLATIONS
    return EXIT_OK


# ------------------------------------------------------------------ parser

# flag dest -> (section, key)
_FLAG_KEYS = {
    "seed": ("run", "seed"), "workers": ("run", "workers"),
    "ratio": ("split", "ratio"), "pred_fraction": ("split", "pred_fraction"), "pred_base": ("split", "pred_base"),
    "counts": ("sampler", "counts"), "count": ("sampler", "count"), "max_answers": ("sampler", "max_answers"),
    "engine": ("model", "engine"), "epochs": ("model", "epochs"), "dim": ("model", "dim"), "lr": ("model", "lr"),
    "batch_size": ("model", "batch_size"), "negatives": ("model", "num_negatives"), "k": ("model", "k"),
    "iterations": ("model", "gnn_iterations"), "gnn_batch_size": ("model", "gnn_batch_size"),
    "gnn_lr": ("model", "gnn_lr"), "gnn_dim": ("model", "gnn_dim"), "gnn_layers": ("model", "gnn_layers"),
    "traversal_dropout": ("model", "traversal_dropout"),
    "beam_size": ("decoder", "beam_size"), "logic": ("decoder", "logic"),
    "normalization": ("decoder", "normalization"), "decoder_config": ("decoder", "type_config"),
    "mode": ("eval", "mode"), "top_n": ("eval", "top_n"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file with [run] [split] [sampler] [model] "
                                         "[decoder] [eval] sections")
    common.add_argument("--seed", type=int, help="random seed (env IKQE_SEED)")
    common.add_argument("--workers", type=int, help="worker threads across queries (env IKQE_WORKERS)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="ikqe", description="Inductive logical query answering over knowledge graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", parents=[common], help="build an inductive split bundle from a triple TSV")
    s.add_argument("--input", required=True, help="head<TAB>relation<TAB>tail integer triples")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--ratio", type=float, help="fraction of entities kept for training (r)")
    s.add_argument("--pred-fraction", type=float, help="share of inference edges held out as missing")
    s.add_argument("--pred-base", choices=["new", "inference"],
                   help="denominator of --pred-fraction: non-train inference edges (new) or all of them")
    s.add_argument("--no-inverse", action="store_true", help="do not add inverse relations")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("sample-queries", parents=[common], help="ground the query patterns on a split graph")
    s.add_argument("--split", required=True)
    s.add_argument("--which", choices=["train", "val", "test"], default="train",
                   help="train: easy answers on the training graph; val/test: hard answers need a missing edge")
    s.add_argument("--counts", help="per-pattern counts, e.g. 1p=100,2in=50")
    s.add_argument("--count", type=int, help="count for every default pattern when --counts is absent")
    s.add_argument("--max-answers", type=int)
    s.add_argument("--recompute-on", choices=["val", "test"],
                   help="re-execute the sampled queries on that inference graph and report new answers")
    s.add_argument("--out", required=True, help="query JSONL output")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train-lp", parents=[common], help="pre-train the NodePiece encoder on 1p link prediction")
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True, help="output directory (encoder.ckpt)")
    for flag, typ in (("--epochs", int), ("--dim", int), ("--lr", float), ("--batch-size", int),
                      ("--negatives", int), ("--k", int)):
        s.add_argument(flag, type=typ)
    s.set_defaults(func=cmd_train_lp)

    s = sub.add_parser("train-gnnqe", parents=[common], help="train GNN-QE on training queries")
    s.add_argument("--split", required=True)
    s.add_argument("--queries", required=True, help="training query JSONL")
    s.add_argument("--out", required=True, help="output directory (gnnqe.ckpt)")
    for flag, typ in (("--iterations", int), ("--gnn-batch-size", int), ("--gnn-lr", float), ("--gnn-dim", int),
                      ("--gnn-layers", int), ("--traversal-dropout", float)):
        s.add_argument(flag, type=typ)
    s.set_defaults(func=cmd_train_gnnqe)

    s = sub.add_parser("answer", parents=[common], help="score queries with an engine")
    s.add_argument("--split", required=True)
    s.add_argument("--which", choices=["train", "val", "test"], default="test", help="graph to answer on")
    s.add_argument("--queries", required=True)
    s.add_argument("--engine", choices=ENGINES)
    s.add_argument("--checkpoint", help="encoder.ckpt (nodepiece) or gnnqe.ckpt (gnnqe)")
    s.add_argument("--types", help="comma-separated patterns to answer (others skipped)")
    s.add_argument("--beam-size", type=int)
    s.add_argument("--logic", choices=["prod", "min"])
    s.add_argument("--normalization", choices=["sigmoid", "minmax"])
    s.add_argument("--decoder-config", help="per-type lines type=logic,normalization,beam")
    s.add_argument("--top-n", type=int, help="store only the N best entities per query (0 = all)")
    s.add_argument("--out", required=True, help="predictions file")
    s.set_defaults(func=cmd_answer)

    s = sub.add_parser("evaluate", parents=[common], help="rank answers and write a CSV/JSON report")
    s.add_argument("--predictions", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--mode", choices=["hard", "faithfulness"])
    s.add_argument("--out", required=True, help="report path; .csv and .json are written")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("verify", parents=[common], help="check split invariants (exit 1 on violations)")
    s.add_argument("--split", required=True)
    s.set_defaults(func=cmd_verify)
    return p


def resolve_config(args, environ=None):
    config = RunConfig()
    if args.config:
        config.load(args.config)
    config.apply_env(environ)
    for dest, (section, key) in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            config.set(section, key, value)
    if getattr(args, "no_inverse", False):
        config.set("split", "inverse", False)
    if config.get("run", "workers") < 1:
        raise ConfigError("[run] workers must be >= 1")
    return config


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return args.func(args, config)
    except CliError as exc:
        print(f"ikqe {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except UnsupportedQueryError as exc:
        print(f"ikqe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED

if __name__ == "__main__":
    sys.exit(main())
