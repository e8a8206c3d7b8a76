"""Command-line surface: prepare, synth, train, eval, report.

Configuration lives in a single JSON file with a documented key list;
``--set key=value`` flags override file values. Exit codes: 0 success,
2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, evaluation, reporting
from .errors import ConfigError, DatasetError, MissingClassError, NumericalError, ZeroVarianceError
from .graph_store import (Graph, conform_features, load_features, load_splits, make_splits,
                          save_features, save_splits, split_graph, svd_features)
from .node_encoder import GATConfig
from .similarity import mutual_neighbor_similarity, simrank
from .text_encoder import TextEncoderConfig, Tokenizer, TokenizerMode
from .trainer import (Checkpoint, DualEncoder, SplitData, TrainConfig, load_checkpoint,
                      restore_dual_encoder, save_checkpoint, train_joint)

# Documented configuration keys: (type, default). Booleans accept JSON
# true/false; --set flags parse "true"/"false".
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "batch_size": (int, 36),
    "learning_rate": (float, 1e-4),
    "max_epochs": (int, 30),
    "grad_clip_norm": (float, 1.0),
    "alpha": (float, 0.0),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "weight_decay": (float, 0.0),
    "dropout": (float, 0.3),
    "seed": (int, 0),
    "tau_init": (float, 3.5),
    "directed": (bool, False),
    "threads": (int, 1),
    "embed_dim": (int, 64),
    "text_layers": (int, 2),
    "text_heads": (int, 2),
    "text_d_model": (int, 64),
    "text_ffn_dim": (int, 128),
    "text_max_len": (int, 64),
    "text_causal": (bool, True),
    "tokenizer_mode": (str, "whitespace"),
    "vocab_min_count": (int, 2),
    "vocab_max_types": (int, 8192),
    "gat_hidden_dim": (int, 64),
    "gat_out_dim": (int, 64),
    "gat_layers": (int, 3),
    "gat_heads": (int, 2),
    "svd_rank": (int, 64),
    "similarity": (str, "mutual"),
    "eval_seed": (int, 0),
    "topk_max": (int, 10),
    "max_correlation_pairs": (int, 200_000),
    "eval_link_prediction": (bool, True),
    "eval_topk": (bool, True),
    "eval_coupling": (bool, True),
    "eval_simrank_correlation": (bool, True),
    "eval_classification": (bool, True),
    "eval_lm": (bool, False),
    "lm_epochs": (int, 3),
    "lm_learning_rate": (float, 5e-5),
    "lm_batch_size": (int, 12),
}


def _check_type(key: str, value, typ: type):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean")
        return value
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is str and isinstance(value, str):
        return value
    raise ConfigError(f"config key {key!r} must be a {typ.__name__}")


def load_run_config(path=None, overrides=None) -> dict:
    """Defaults, then file values, then --set overrides; unknown keys fail."""
    cfg = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        for key, value in raw.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}: unknown config key {key!r}")
            cfg[key] = _check_type(key, value, CONFIG_SCHEMA[key][0])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        typ = CONFIG_SCHEMA[key][0]
        try:
            if typ is bool:
                if text.lower() not in ("true", "false"):
                    raise ValueError
                value = text.lower() == "true"
            else:
                value = typ(text)
        except ValueError:
            raise ConfigError(f"cannot parse {text!r} as {typ.__name__} for key {key!r}") from None
        cfg[key] = value
    if cfg["similarity"] not in ("mutual", "simrank"):
        raise ConfigError("similarity must be 'mutual' or 'simrank'")
    return cfg


@contextlib.contextmanager
def output_lock(directory: Path):
    """Exclusive lock file preventing concurrent writers in one directory."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".graphtext.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{directory} is locked by another run (remove {lock.name} if stale)") from None
    try:
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
        max_epochs=cfg["max_epochs"], grad_clip_norm=cfg["grad_clip_norm"],
        alpha=cfg["alpha"], adam_betas=(cfg["adam_beta1"], cfg["adam_beta2"]),
        weight_decay=cfg["weight_decay"], dropout=cfg["dropout"], seed=cfg["seed"],
        tau_init=cfg["tau_init"], directed=cfg["directed"],
        embed_dim=cfg["embed_dim"], threads=cfg["threads"],
    )


def _similarity_for(graph: Graph, kind: str):
    if kind == "simrank":
        return simrank(graph)
    return mutual_neighbor_similarity(graph)


def _split_data(graph, corpus, split, which: str, cfg: dict, data_dir: Path | None,
                with_similarity: bool) -> SplitData:
    sub = split_graph(graph, split, which)
    feats = None
    if data_dir is not None:
        candidate = data_dir / f"features.{which}.bin"
        if candidate.exists():
            feats = load_features(candidate)
            if feats.matrix.shape[0] != sub.num_nodes:
                raise ConfigError(f"{candidate}: feature rows do not match the {which} split")
    if feats is None:
        feats = svd_features(sub, cfg["svd_rank"])
    feats = conform_features(feats, cfg["svd_rank"])
    members = set(sub.node_ids)
    records = [r for r in corpus if r.node_id in members]
    sim = _similarity_for(sub, cfg["similarity"]) if with_similarity else None
    return SplitData.build(sub, feats, records, sim)


def cmd_prepare(args) -> int:
    fractions = tuple(float(x) for x in args.fractions.split(","))
    if len(fractions) != 3:
        raise ConfigError("--fractions expects three comma-separated numbers")
    graph, _, _ = datasets.load_dataset(args.input, directed=args.directed)
    split = make_splits(graph, fractions, args.seed)
    out = Path(args.output)
    with output_lock(out):
        save_splits(out / "splits.json", graph, split)
        for which in ("train", "val", "test"):
            sub = split_graph(graph, split, which)
            save_features(out / f"features.{which}.bin", svd_features(sub, args.svd_rank))
    print(f"wrote splits.json and per-split features to {out}")
    return 0


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {args.spec}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: malformed JSON: {exc}") from exc
    known = set(datasets.SbmSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{args.spec}: unknown generator keys {sorted(unknown)}")
    if "length_range" in raw:
        raw["length_range"] = tuple(raw["length_range"])
    spec = datasets.SbmSpec(**raw)
    graph, corpus, labels = datasets.generate_sbm_corpus(spec)
    out = Path(args.output)
    with output_lock(out):
        datasets.save_dataset(out, graph, corpus, labels)
    print(f"wrote {graph.num_nodes} nodes, {graph.num_edges} edges, {len(corpus)} texts to {out}")
    return 0


def _load_prepared(data_dir: Path, cfg: dict):
    graph, corpus, labels = datasets.load_dataset(data_dir, directed=cfg["directed"])
    splits_path = data_dir / "splits.json"
    if not splits_path.exists():
        raise ConfigError(f"{data_dir}: splits.json not found; run 'graphtext prepare' first")
    return graph, corpus, labels, load_splits(splits_path, graph)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    train_cfg = _train_config(cfg)
    data_dir = Path(args.data)
    graph, corpus, _, split = _load_prepared(data_dir, cfg)
    with_sim = cfg["alpha"] > 0
    train_data = _split_data(graph, corpus, split, "train", cfg, data_dir, with_sim)
    val_data = _split_data(graph, corpus, split, "val", cfg, data_dir, with_sim)

    start_epoch, prior_history = 0, None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, tokenizer = restore_dual_encoder(ckpt)
        start_epoch = ckpt.manifest["epoch"]
        prior_history = ckpt.manifest["loss_history"]
    else:
        tokenizer = Tokenizer.train(
            (r.text for r in train_data.records),
            TokenizerMode(cfg["tokenizer_mode"]),
            min_count=cfg["vocab_min_count"], max_types=cfg["vocab_max_types"])
        model = DualEncoder(
            TextEncoderConfig(vocab_size=tokenizer.size, layers=cfg["text_layers"],
                              heads=cfg["text_heads"], d_model=cfg["text_d_model"],
                              ffn_dim=cfg["text_ffn_dim"], max_len=cfg["text_max_len"],
                              causal=cfg["text_causal"]),
            GATConfig(in_dim=cfg["svd_rank"], hidden_dim=cfg["gat_hidden_dim"],
                      out_dim=cfg["gat_out_dim"], layers=cfg["gat_layers"],
                      heads=cfg["gat_heads"], dropout=cfg["dropout"]),
            embed_dim=cfg["embed_dim"], adapter_dropout=cfg["dropout"],
            tau_init=cfg["tau_init"])
        model.init_parameters(cfg["seed"])

    out = Path(args.out)
    with output_lock(out):
        result = train_joint(train_cfg, model, tokenizer, train_data, val_data,
                             start_epoch=start_epoch, prior_history=prior_history)
        save_checkpoint(result.final, out / "final.ckpt")
        save_checkpoint(result.best, out / "best.ckpt")
        tokenizer.save(out / "vocab.txt")
        reporting.write_loss_history(result.history, out / "loss_history.csv")
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final train loss {last['train_loss']:.4f}")
    return 0


def _classification_inputs(data: SplitData, labels: dict, text_embs, node_embs, truth):
    local_labels = [labels.get(nid) for nid in data.graph.node_ids]
    text_mean, covered = evaluation.mean_text_embeddings(text_embs, truth, data.graph.num_nodes)
    usable = np.array([lab is not None for lab in local_labels]) & covered
    idx = np.flatnonzero(usable)
    kinds = {
        "node": node_embs[idx],
        "text_mean": text_mean[idx],
        "concat": np.concatenate([node_embs[idx], text_mean[idx]], axis=1),
    }
    y = [local_labels[i] for i in idx]
    return kinds, y


def evaluate_checkpoint(ckpt: Checkpoint, data_dir: Path, which: str, cfg: dict) -> evaluation.MetricsReport:
    """All enabled metrics for one checkpoint on one split."""
    model, tokenizer = restore_dual_encoder(ckpt)
    run_directed = ckpt.manifest["train_config"]["directed"]
    graph, corpus, labels, split = _load_prepared(data_dir, {**cfg, "directed": run_directed})
    eval_cfg = {**cfg, "svd_rank": model.node_cfg.in_dim}
    data = _split_data(graph, corpus, split, which, eval_cfg, data_dir, with_similarity=False)
    text_embs, node_embs, truth = evaluation.compute_embeddings(model, tokenizer, data)

    report = evaluation.MetricsReport()
    report.meta = {"split": which, "seed": cfg["eval_seed"], "errors": {}}

    def attempt(name: str, fn):
        try:
            return fn()
        except (ZeroVarianceError, MissingClassError, ConfigError, ValueError) as exc:
            report.meta["errors"][name] = str(exc)
            return None

    if cfg["eval_link_prediction"]:
        def link():
            pairs = evaluation.sample_eval_pairs(graph, split, cfg["eval_seed"], which)
            report.values[f"auc.link_prediction.{which}"] = evaluation.link_prediction_auc(node_embs, pairs)
        attempt("link_prediction", link)

    if cfg["eval_topk"] and len(truth):
        def topk():
            accs = evaluation.topk_accuracy(text_embs, node_embs, truth, cfg["topk_max"])
            for k, acc in enumerate(accs, 1):
                report.values[f"topk.acc@{k}.{which}"] = float(acc)
        attempt("topk", topk)

    if cfg["eval_coupling"]:
        def coupling():
            report.values[f"coupling.distance.{which}"] = evaluation.distance_coupling(
                text_embs, node_embs, truth, cfg["max_correlation_pairs"], cfg["eval_seed"])
        attempt("distance_coupling", coupling)

    if cfg["eval_simrank_correlation"]:
        def simrank_corr():
            sim = simrank(data.graph)
            report.values[f"correlation.text_simrank.{which}"] = evaluation.text_simrank_correlation(
                text_embs, sim, truth, cfg["max_correlation_pairs"], cfg["eval_seed"])
        attempt("text_simrank_correlation", simrank_corr)

    if cfg["eval_classification"]:
        def classify():
            kinds, y = _classification_inputs(data, labels, text_embs, node_embs, truth)
            if len(y) < 4 or len(set(y)) < 2:
                raise MissingClassError("not enough labeled nodes for classification")
            results = evaluation.classify_nodes(kinds, y, cfg["eval_seed"])
            for kind, metrics in results.items():
                for metric, value in metrics.items():
                    report.values[f"{metric}.classify_{kind}.{which}"] = value
        attempt("classification", classify)

    if cfg["eval_lm"]:
        def lm_eval():
            if not model.text_cfg.causal:
                raise ConfigError("language-model evaluation requires a causal text encoder")
            baseline = DualEncoder(model.text_cfg, model.node_cfg, model.embed_dim,
                                   model.adapter_dropout)
            baseline.init_parameters(cfg["eval_seed"])
            train_sub = _split_data(graph, corpus, split, "train", eval_cfg, data_dir, False)
            lm_cfg = evaluation.LmEvalConfig(
                epochs=cfg["lm_epochs"], learning_rate=cfg["lm_learning_rate"],
                batch_size=cfg["lm_batch_size"], seed=cfg["eval_seed"])
            joint_ppl, base_ppl, p = evaluation.perplexity_comparison(
                model.text_encoder, baseline.text_encoder, tokenizer,
                [r.text for r in train_sub.records], [r.text for r in data.records], lm_cfg)
            report.values[f"perplexity.joint.{which}"] = joint_ppl
            report.values[f"perplexity.baseline.{which}"] = base_ppl
            report.values[f"pvalue.perplexity.{which}"] = p
        attempt("lm", lm_eval)

    return report


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.set)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    report = evaluate_checkpoint(ckpt, Path(args.data), args.split, cfg)
    report.meta["checkpoint"] = hashlib.sha256(ckpt_path.read_bytes()).hexdigest()[:12]
    out = Path(args.out)
    with output_lock(out.parent):
        payload = dict(sorted(report.values.items()))
        payload["_meta"] = report.meta
        out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(report.values)} metrics to {out}")
    return 0


def cmd_report(args) -> int:
    runs = {}
    for path in args.metrics:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"metrics file not found: {path}")
        payload = json.loads(path.read_text(encoding="utf-8"))
        runs[path.stem] = {k: v for k, v in payload.items() if not k.startswith("_")}
    out = Path(args.out)
    with output_lock(out):
        reporting.write_metrics_table(runs, out / "metrics_table.csv")
        try:
            reporting.write_topk_curve(runs, out / "topk_curve.svg")
        except ValueError:
            pass
    print(f"wrote report for {len(runs)} run(s) to {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphtext",
                                     description="Joint graph-text contrastive pretraining")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split a dataset and compute SVD node features")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.7,0.1,0.2")
    p.add_argument("--svd-rank", type=int, default=64)
    p.add_argument("--directed", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a block-model dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run joint contrastive training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge metrics files into a table and plots")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
