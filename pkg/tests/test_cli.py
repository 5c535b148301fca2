import json

import numpy as np
import pytest

from relsem.cli import main
from relsem.corpus import save_corpus
from relsem.synthetic import toy_corpus
from relsem.textembed import EmbeddingMatrix, load_external_embeddings, save_embeddings


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_corpus(toy_corpus(120, seed=0), root / "raw.jsonl")
    assert main(["ingest", "--corpus", str(root / "raw.jsonl"), "--out", str(root)]) == 0
    assert main(["preprocess", "--corpus", str(root / "corpus.jsonl"), "--out", str(root), "--min-df", "2"]) == 0
    return root


def train_args(root, out, *extra):
    return ["train", "--corpus", str(root / "corpus.jsonl"), "--text", "tfidf",
            "--tokens", str(root / "tokens.jsonl"), "--vocab", str(root / "vocab.json"),
            "--epochs", "5", "--out", str(out), *extra]


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_required(self, tmp_path):
        assert main(["ingest", "--out", str(tmp_path)]) == 1

    def test_missing_file(self, tmp_path):
        assert main(["ingest", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 1

    def test_help(self):
        assert main(["--help"]) == 0


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path, workspace):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 3, "learning_rate": 1}))
        assert main(train_args(workspace, tmp_path, "--config", str(cfg))) == 1

    def test_flags_override_file(self, tmp_path, workspace):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 50, "lr": 0.02, "format": "tsv"}))
        assert main(train_args(workspace, tmp_path, "--config", str(cfg))) == 0
        echo = json.loads((tmp_path / "train.config.json").read_text())
        assert echo["epochs"] == 5 and echo["lr"] == 0.02 and echo["runs"] == 1
        assert (tmp_path / "gnn.tsv").exists()


class TestPipeline:
    def test_preprocess_outputs(self, workspace):
        vocab = json.loads((workspace / "vocab.json").read_text())
        assert len(vocab["words"]) == len(vocab["document_frequency"])
        assert (workspace / "ingest_report.json").exists()

    def test_train_deterministic(self, tmp_path, workspace):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(train_args(workspace, a, "--seed", "7")) == 0
        assert main(train_args(workspace, b, "--seed", "7")) == 0
        assert (a / "gnn.emb").read_bytes() == (b / "gnn.emb").read_bytes()
        report = json.loads((a / "train_report.json").read_text())
        assert report[0]["seeds"] == [7]

    def test_stats(self, tmp_path, workspace):
        assert main(["stats", "--corpus", str(workspace / "corpus.jsonl"), "--out", str(tmp_path),
                     "--er-reps", "2"]) == 0
        stats = json.loads((tmp_path / "stats.json").read_text())
        assert stats["Number of nodes"] > 0

    def test_analyze_pivot(self, tmp_path, workspace):
        out = tmp_path / "t"
        assert main(train_args(workspace, out)) == 0
        assert main(["analyze", "pivot", "--corpus", str(workspace / "corpus.jsonl"), "--embedding",
                     str(out / "gnn.emb"), "--a", "journal_of_informetrics", "--b", "isis",
                     "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "pivot.csv").read_text().splitlines()
        assert lines[0] == "journal,cosine" and len(lines) == 5


class TestExport:
    def test_identity_tsv(self, tmp_path):
        save_embeddings(EmbeddingMatrix(np.eye(2), ("a", "b")), tmp_path / "e.emb")
        assert main(["export", "--embedding", str(tmp_path / "e.emb"), "--format", "tsv",
                     "--output", str(tmp_path / "e.tsv")]) == 0
        lines = (tmp_path / "e.tsv").read_text().splitlines()
        assert len(lines) == 2 and all(len(l.split("\t")) == 3 for l in lines)

    def test_empty_embedding_errors(self, tmp_path):
        (tmp_path / "empty.tsv").write_text("")
        assert main(["export", "--embedding", str(tmp_path / "empty.tsv"),
                     "--output", str(tmp_path / "x.emb"), "--format", "binary"]) == 1

    def test_binary_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        E = EmbeddingMatrix(rng.normal(size=(7, 5)).astype(np.float32).astype(np.float64),
                            tuple(f"d{i}" for i in range(7)))
        save_embeddings(E, tmp_path / "e.tsv", "tsv")
        assert main(["export", "--embedding", str(tmp_path / "e.tsv"), "--format", "binary",
                     "--output", str(tmp_path / "e.emb")]) == 0
        back = load_external_embeddings(tmp_path / "e.emb")
        np.testing.assert_array_equal(back.values, E.values)
        assert back.ids == E.ids
