"""Command-line driver for the corpus-to-embedding pipeline.

Every subcommand takes ``--config FILE`` (JSON) and ``--seed``. Values are
resolved as flags over file over defaults, and the resolved configuration is
written next to the outputs as ``<command>.config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import analysis, corpus as corpus_mod, eval as ev, graph as graph_mod, textembed
from .corpus import CorpusError
from .gnn import ENCODER_KINDS, EncoderConfig
from .textembed import EmbeddingMatrix

log = logging.getLogger("relsem")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# defaults per subcommand; the keys double as the accepted config-file keys
DEFAULTS = {
    "ingest": {"corpus": None, "format": "jsonl", "out": "."},
    "preprocess": {"corpus": None, "out": ".", "min_df": 5, "max_df": 0.65, "trademarks": []},
    "stats": {"corpus": None, "graph": None, "out": ".", "er_reps": 100, "exact_threshold": 5000,
              "sample_sources": 1000},
    "lda": {"tokens": None, "vocab": None, "out": ".", "topics": 20, "alpha": None, "eta": 0.01,
            "iterations": 500, "burn_in": 200},
    "pvdm": {"tokens": None, "out": ".", "dim": 20, "window": 10, "negatives": 5, "epochs": 20},
    "train": {"corpus": None, "encoder": "gcn", "text": "external", "embedding": None, "tokens": None,
              "vocab": None, "topics": None, "out": ".", "epochs": 200, "runs": 1, "lr": 0.01,
              "val_frac": 0.05, "test_frac": 0.10, "jobs": 1, "top_n": 1000, "format": "binary"},
    "evaluate": {"corpus": None, "encoders": list(ENCODER_KINDS), "texts": ["tfidf"], "tokens": None,
                 "vocab": None, "topics": None, "out": ".", "epochs": 200, "runs": 10, "lr": 0.01,
                 "val_frac": 0.05, "test_frac": 0.10, "jobs": 1, "top_n": 1000},
    "ablate": {"corpus": None, "encoder": "gcn", "text": "external", "embedding": None, "tokens": None,
               "vocab": None, "topics": None, "drop": None, "out": ".", "epochs": 200, "runs": 10,
               "lr": 0.01, "val_frac": 0.05, "test_frac": 0.10, "jobs": 1, "top_n": 1000},
    "analyze": {"kind": None, "corpus": None, "embedding": None, "semantic": None, "relational": None,
                "theta": None, "a": None, "b": None, "out": "."},
    "export": {"embedding": None, "format": "tsv", "output": None},
}
for _d in DEFAULTS.values():
    _d["seed"] = 0


def _add_common(p):
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--seed", type=int, help="root seed for every stochastic stage")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-frac", type=float, dest="val_frac")
    p.add_argument("--test-frac", type=float, dest="test_frac")
    p.add_argument("--jobs", type=int)
    p.add_argument("--top-n", type=int, dest="top_n", help="one-hot size for authors and affiliations")
    p.add_argument("--tokens", help="tokens.jsonl written by `preprocess`")
    p.add_argument("--vocab", help="vocab.json written by `preprocess`")
    p.add_argument("--topics", help="LDA theta embedding for the topic block")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relsem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def cmd(name, help):
        p = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        _add_common(p)
        return p

    p = cmd("ingest", "validate a corpus and write it as normalized JSONL")
    p.add_argument("--corpus")
    p.add_argument("--format", choices=["jsonl", "csv-pair"])
    p.add_argument("--out")

    p = cmd("preprocess", "tokenize the corpus and build the vocabulary")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--min-df", type=int, dest="min_df")
    p.add_argument("--max-df", type=float, dest="max_df")
    p.add_argument("--trademarks", nargs="*")

    p = cmd("stats", "descriptive statistics of the citation network")
    p.add_argument("--corpus")
    p.add_argument("--graph", help="edges.csv with src,dst columns")
    p.add_argument("--out")
    p.add_argument("--er-reps", type=int, dest="er_reps")
    p.add_argument("--exact-threshold", type=int, dest="exact_threshold")
    p.add_argument("--sample-sources", type=int, dest="sample_sources")

    p = cmd("lda", "fit LDA and write document-topic vectors")
    p.add_argument("--tokens")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--topics", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")

    p = cmd("pvdm", "fit PV-DM document vectors")
    p.add_argument("--tokens")
    p.add_argument("--out")
    p.add_argument("--dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--epochs", type=int)

    p = cmd("train", "train a GAE encoder and export node embeddings")
    p.add_argument("--corpus")
    p.add_argument("--encoder", choices=ENCODER_KINDS)
    p.add_argument("--text", choices=["tfidf", "pvdm", "external", "none"])
    p.add_argument("--embedding", help="text embedding file for --text pvdm/external")
    p.add_argument("--out")
    p.add_argument("--format", choices=["tsv", "binary"])
    _add_training(p)

    p = cmd("evaluate", "link-prediction grid over text encodings and encoders")
    p.add_argument("--corpus")
    p.add_argument("--encoders", nargs="+", choices=ENCODER_KINDS)
    p.add_argument("--texts", nargs="+", help="tfidf and/or NAME=EMBEDDING_FILE entries")
    p.add_argument("--out")
    _add_training(p)

    p = cmd("ablate", "remove one feature block at a time")
    p.add_argument("--corpus")
    p.add_argument("--encoder", choices=ENCODER_KINDS)
    p.add_argument("--text", choices=["tfidf", "pvdm", "external", "none"])
    p.add_argument("--embedding")
    p.add_argument("--drop", nargs="+", help="feature blocks to remove, one per row")
    p.add_argument("--out")
    _add_training(p)

    p = cmd("analyze", "group-level embedding analyses")
    p.add_argument("kind", choices=["collab", "journals", "frobenius", "countries", "pivot", "topics"])
    p.add_argument("--corpus")
    p.add_argument("--embedding")
    p.add_argument("--semantic")
    p.add_argument("--relational")
    p.add_argument("--theta")
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--out")

    p = cmd("export", "convert an embedding file between TSV and binary")
    p.add_argument("--embedding")
    p.add_argument("--format", choices=["tsv", "binary"])
    p.add_argument("--output")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the optional JSON file and explicit flags, in that order."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    path = getattr(args, "config", None)
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise ConfigError(f"{path}: unknown keys for '{command}': {', '.join(unknown)}")
        cfg.update(data)
    cfg.update(flags)
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, command: str, cfg: dict) -> None:
    (out / f"{command}.config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")


def _load_corpus(path: str):
    p = Path(path)
    return corpus_mod.load_corpus(p, "csv-pair" if p.is_dir() or p.suffix == ".csv" else "jsonl")


def _read_tokens(path: str) -> tuple[list[str], list[list[str]]]:
    ids, docs = [], []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ids.append(rec["id"])
                docs.append(rec["tokens"])
    return ids, docs


def _read_vocab(path: str) -> corpus_mod.Vocabulary:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return corpus_mod.Vocabulary(tuple(data["words"]), np.asarray(data["document_frequency"], dtype=np.int64),
                                 int(data["n_docs"]))


def slug(text: str) -> str:
    return re.sub(r"[^0-9a-z]+", "_", text.lower()).strip("_")


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg):
    _require(cfg, "corpus")
    c = corpus_mod.load_corpus(cfg["corpus"], cfg["format"])
    out = _out_dir(cfg)
    corpus_mod.save_corpus(c, out / "corpus.jsonl")
    report = {"articles": len(c), "internal_references": len(c.internal_references()),
              "external_references": len(c.external_references()), "warnings": list(c.warnings)}
    (out / "ingest_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _echo(out, "ingest", cfg)
    print(json.dumps({k: v for k, v in report.items() if k != "warnings"}))


def cmd_preprocess(cfg):
    _require(cfg, "corpus")
    c = _load_corpus(cfg["corpus"])
    pcfg = corpus_mod.make_preprocess_config(c, trademarks=cfg["trademarks"])
    docs = corpus_mod.preprocess_corpus(c, pcfg)
    vocab = corpus_mod.build_vocabulary(docs, cfg["min_df"], cfg["max_df"])
    out = _out_dir(cfg)
    with (out / "tokens.jsonl").open("w", encoding="utf-8") as fh:
        for art, toks in zip(c, docs):
            fh.write(json.dumps({"id": art.id, "tokens": toks}, ensure_ascii=False) + "\n")
    (out / "vocab.json").write_text(json.dumps({
        "words": list(vocab.words), "document_frequency": vocab.document_frequency.tolist(),
        "n_docs": vocab.n_docs}) + "\n", encoding="utf-8")
    _echo(out, "preprocess", cfg)
    print(json.dumps({"documents": len(docs), "vocabulary": len(vocab)}))


def _graph_from_edges_csv(path: str) -> graph_mod.CitationGraph:
    df = pd.read_csv(path, dtype=str)
    if not {"src", "dst"} <= set(df.columns):
        raise ConfigError(f"{path}: expected columns src,dst")
    ids = sorted(set(df["src"]) | set(df["dst"]))
    pos = {k: i for i, k in enumerate(ids)}
    return graph_mod.CitationGraph.from_edges(len(ids), zip(df["src"].map(pos), df["dst"].map(pos)), ids)


def cmd_stats(cfg):
    if cfg.get("graph"):
        g = _graph_from_edges_csv(cfg["graph"])
    else:
        _require(cfg, "corpus")
        g = graph_mod.build_citation_graph(_load_corpus(cfg["corpus"]))
    stats = graph_mod.graph_stats(g, seed=cfg["seed"], exact_threshold=cfg["exact_threshold"],
                                  sample_sources=cfg["sample_sources"], er_replications=cfg["er_reps"])
    out = _out_dir(cfg)
    graph_mod.write_stats_report(stats, out / "stats.json")
    _echo(out, "stats", cfg)
    print(json.dumps(stats.to_report(), indent=2))


def cmd_lda(cfg):
    _require(cfg, "tokens")
    ids, docs = _read_tokens(cfg["tokens"])
    vocab = _read_vocab(cfg["vocab"]) if cfg.get("vocab") else corpus_mod.build_vocabulary(docs)
    dtm = textembed.build_dtm(docs, vocab, "count")
    model = textembed.lda_fit(dtm, K=cfg["topics"], alpha=cfg["alpha"], eta=cfg["eta"],
                              iterations=cfg["iterations"], burn_in=cfg["burn_in"], seed=cfg["seed"])
    out = _out_dir(cfg)
    textembed.save_embeddings(textembed.lda_doc_topics(model, ids), out / "lda_theta.emb", "binary")
    pd.DataFrame(model.beta, columns=list(vocab.words)).to_csv(out / "lda_beta.csv", index_label="topic")
    with (out / "lda_topwords.txt").open("w", encoding="utf-8") as fh:
        for k, words in enumerate(model.top_words(vocab.words, 10)):
            fh.write(f"{k}\t{' '.join(words)}\n")
    _echo(out, "lda", cfg)


def cmd_pvdm(cfg):
    _require(cfg, "tokens")
    ids, docs = _read_tokens(cfg["tokens"])
    E = textembed.pvdm_fit(docs, ids, dim=cfg["dim"], window=cfg["window"], negatives=cfg["negatives"],
                           epochs=cfg["epochs"], seed=cfg["seed"])
    out = _out_dir(cfg)
    textembed.save_embeddings(E, out / "pvdm.emb", "binary")
    _echo(out, "pvdm", cfg)


def _text_block(cfg, c, text: str, path: str | None):
    if text == "none":
        return None
    if text == "tfidf":
        _require(cfg, "tokens")
        ids, docs = _read_tokens(cfg["tokens"])
        if ids != c.ids:
            raise ConfigError("tokens file does not match the corpus order")
        vocab = _read_vocab(cfg["vocab"]) if cfg.get("vocab") else corpus_mod.build_vocabulary(docs)
        return textembed.build_dtm(docs, vocab, "tfidf").matrix.toarray()
    if not path:
        raise ConfigError(f"--embedding is required for --text {text}")
    return textembed.load_external_embeddings(path, c.ids, kind="pvdm" if text == "pvdm" else "external")


def _node_features(cfg, c, text: str, path: str | None):
    """Feature matrix restricted to the nodes of the citation graph, plus the graph."""
    text_block = _text_block(cfg, c, text, path)
    topics = textembed.load_external_embeddings(cfg["topics"], c.ids) if cfg.get("topics") else None
    drop = set()
    if topics is None:
        drop.add("topic-distribution")
    if text_block is None:
        drop.add("text-embedding")
    fcfg = corpus_mod.FeatureConfig(top_n_affiliations=cfg["top_n"], top_n_authors=cfg["top_n"],
                                    drop=frozenset(drop))
    features = corpus_mod.assemble_features(c, text_block, topics, fcfg)
    g = graph_mod.build_citation_graph(c)
    return features.rows(g.nodes), g


def cmd_train(cfg):
    _require(cfg, "corpus")
    c = _load_corpus(cfg["corpus"])
    X, g = _node_features(cfg, c, cfg["text"], cfg.get("embedding"))
    seeds = [cfg["seed"] + r for r in range(cfg["runs"])]
    report = ev.MetricsReport({"text_encoding": cfg["text"], "encoder": cfg["encoder"]}, seeds=seeds)
    out = _out_dir(cfg)
    enc = EncoderConfig.default(cfg["encoder"])
    for r, s in enumerate(seeds):
        split = ev.split_edges(g, cfg["val_frac"], cfg["test_frac"], seed=s)
        Z, hist = ev.train_gae(enc, X.values, split, epochs=cfg["epochs"], seed=s, lr=cfg["lr"], ids=g.ids)
        report.runs.append(ev.link_metrics(Z.values, split.test, split.test_neg))
        log.info("run %d seed %d: test auc %.4f ap %.4f", r, s, report.runs[-1]["auc"], report.runs[-1]["ap"])
        if r == 0:
            name = "gnn.emb" if cfg["format"] == "binary" else "gnn.tsv"
            textembed.save_embeddings(Z, out / name, cfg["format"])
    table = ev.ResultTable([report])
    table.write_csv(out / "train_report.csv")
    table.write_json(out / "train_report.json")
    _echo(out, "train", cfg)
    print(table.to_frame(display=True).to_string(index=False))


def cmd_evaluate(cfg):
    _require(cfg, "corpus")
    c = _load_corpus(cfg["corpus"])
    feats = {}
    g = None
    for item in cfg["texts"]:
        name, _, path = item.partition("=")
        text = "tfidf" if name == "tfidf" else ("pvdm" if name == "pvdm" else "external")
        X, g = _node_features(cfg, c, text, path or None)
        feats[name] = X.values
    seeds = [cfg["seed"] + r for r in range(cfg["runs"])]
    table = ev.run_matrix(feats, cfg["encoders"], g, runs=cfg["runs"], seeds=seeds, epochs=cfg["epochs"],
                          lr=cfg["lr"], val_frac=cfg["val_frac"], test_frac=cfg["test_frac"], jobs=cfg["jobs"])
    out = _out_dir(cfg)
    table.write_csv(out / "table2.csv")
    table.write_json(out / "table2.json")
    _echo(out, "evaluate", cfg)
    print(table.to_frame(display=True).to_string(index=False))


def cmd_ablate(cfg):
    _require(cfg, "corpus")
    c = _load_corpus(cfg["corpus"])
    X, g = _node_features(cfg, c, cfg["text"], cfg.get("embedding"))
    groups = cfg["drop"] if cfg.get("drop") else list(X.blocks)
    seeds = [cfg["seed"] + r for r in range(cfg["runs"])]
    table = ev.ablation_run(cfg["encoder"], X, g, groups, runs=cfg["runs"], seeds=seeds, epochs=cfg["epochs"],
                            lr=cfg["lr"], val_frac=cfg["val_frac"], test_frac=cfg["test_frac"], jobs=cfg["jobs"])
    out = _out_dir(cfg)
    table.write_csv(out / "table3.csv")
    table.write_json(out / "table3.json")
    _echo(out, "ablate", cfg)
    print(table.to_frame(display=True).to_string(index=False))


def _aligned(c, path: str) -> tuple[EmbeddingMatrix, list]:
    """Embedding rows with the corpus articles they describe (embedding order)."""
    E = textembed.load_external_embeddings(path)
    pos = {a.id: i for i, a in enumerate(c)}
    missing = [k for k in E.ids if k not in pos]
    if missing:
        raise KeyError(f"{path}: ids not in the corpus: {missing[:10]}")
    return E, [c[pos[k]] for k in E.ids]


def cmd_analyze(cfg):
    _require(cfg, "corpus")
    c = _load_corpus(cfg["corpus"])
    kind = cfg["kind"]
    out = _out_dir(cfg)
    if kind in ("collab", "journals", "frobenius", "pivot"):
        _require(cfg, "embedding")
        E, arts = _aligned(c, cfg["embedding"])
    if kind == "collab":
        groups = analysis.groups_from_labels([analysis.collaboration_class(a) for a in arts])
        table = analysis.group_mean_cosine(E, groups)
        table.to_csv(out / "collab_cosine.csv", index_label="class")
    elif kind == "journals":
        groups = analysis.groups_from_labels([slug(a.journal) if a.journal else None for a in arts])
        table = analysis.group_mean_cosine(E, groups)
        table.to_csv(out / "journal_cosine.csv", index_label="journal")
    elif kind == "frobenius":
        table = analysis.frobenius_by_citation_group(E, [a.total_citations for a in arts])
        table.to_csv(out / "frobenius.csv", index=False)
    elif kind == "pivot":
        _require(cfg, "a", "b")
        ge = analysis.aggregate_embedding(E, [slug(a.journal) if a.journal else None for a in arts])
        table = analysis.pivot_axis_projection(ge, slug(cfg["a"]), slug(cfg["b"]))
        table.to_csv(out / "pivot.csv", index_label="journal")
    elif kind == "countries":
        _require(cfg, "semantic", "relational")
        per = []
        for key in ("semantic", "relational"):
            E, arts = _aligned(c, cfg[key])
            per.append(analysis.aggregate_embedding(E, [a.first_country for a in arts]))
        cites: dict = {}
        for a in c:
            if a.first_country:
                cites[a.first_country] = cites.get(a.first_country, 0) + a.total_citations
        table = analysis.similarity_scatter(per[0], per[1], cites)
        table.to_csv(out / "country_scatter.csv", index=False)
    else:
        _require(cfg, "theta")
        theta = textembed.load_external_embeddings(cfg["theta"], c.ids)
        table = textembed.topic_relative_importance(theta, [a.field_label or "unknown" for a in c])
        table.to_csv(out / "topic_importance.csv", index_label="field")
    _echo(out, f"analyze-{kind}", cfg)
    print(table.to_string())


def cmd_export(cfg):
    _require(cfg, "embedding", "output")
    E = textembed.load_external_embeddings(cfg["embedding"])
    export_embedding(E, cfg["output"], cfg["format"])
    out = Path(cfg["output"]).parent
    _echo(out, "export", cfg)


def export_embedding(E: EmbeddingMatrix, path, format: str = "binary") -> None:
    """Write ``E`` as TSV or binary; the parent directory must exist and be writable."""
    if format not in ("tsv", "binary"):
        raise ConfigError(f"unknown export format {format!r}")
    textembed.save_embeddings(E, path, format)


COMMANDS = {
    "ingest": cmd_ingest, "preprocess": cmd_preprocess, "stats": cmd_stats, "lda": cmd_lda,
    "pvdm": cmd_pvdm, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "analyze": cmd_analyze, "export": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
    except (ConfigError, CorpusError, ValueError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc.args[0] if isinstance(exc, KeyError) and exc.args else exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.error("runtime error: %s", exc)
        log.debug("traceback", exc_info=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
