import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relsem import autodiff as ad
from relsem.corpus import FeatureMatrix
from relsem.eval import (OptimizerState, TrainingDiverged, ablation_run, adam_step, auc,
                         average_precision, average_precision_scores, confusion_metrics,
                         random_embedding_metrics, roc_auc_trapezoid, run_matrix, sample_negatives,
                         split_edges, train_gae)
from relsem.gnn import EncoderConfig, MessageGraph
from relsem.synthetic import sbm_benchmark


def brute_auc(pos, neg):
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def brute_ap(labels):
    P = sum(labels)
    out, prev_recall = 0.0, 0.0
    for n in range(1, len(labels) + 1):
        tp = sum(labels[:n])
        recall = tp / P
        out += (recall - prev_recall) * tp / n
        prev_recall = recall
    return out


class TestMetrics:
    def test_auc_examples(self):
        assert auc([0.9, 0.4], [0.5, 0.1]) == 0.75
        assert auc([3, 4], [1, 2]) == 1.0
        assert auc([1, 2, 2], [2, 1, 2]) == 0.5

    def test_auc_empty(self):
        with pytest.raises(ValueError):
            auc([], [0.1])

    def test_ap_examples(self):
        assert average_precision([1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
        assert average_precision([1, 1, 0, 0]) == 1.0

    def test_ap_no_positive(self):
        with pytest.raises(ValueError):
            average_precision([0, 0])

    def test_ap_ties_keep_index_order(self):
        assert average_precision_scores([0.5, 0.5, 0.5], [0, 1, 1]) == pytest.approx(brute_ap([0, 1, 1]))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6).map(lambda x: x / 6), st.booleans()), min_size=2, max_size=50))
    def test_against_brute_force(self, rows):
        scores = np.array([r[0] for r in rows])
        labels = np.array([int(r[1]) for r in rows])
        if labels.sum() in (0, len(labels)):
            return
        pos, neg = scores[labels == 1], scores[labels == 0]
        assert abs(auc(pos, neg) - brute_auc(pos, neg)) < 1e-12
        assert abs(roc_auc_trapezoid(scores, labels) - auc(pos, neg)) < 1e-12
        order = np.argsort(-scores, kind="stable")
        assert abs(average_precision_scores(scores, labels) - brute_ap(list(labels[order]))) < 1e-12

    def test_confusion_example(self):
        scores = np.array([0.9] * 3 + [0.8] + [0.1] + [0.2] * 5)
        labels = np.array([1, 1, 1, 0, 1, 0, 0, 0, 0, 0])
        c = confusion_metrics(scores, labels, 0.5)
        assert (c.tp, c.fp, c.fn, c.tn) == (3, 1, 1, 5)
        assert (c.precision, c.recall) == (0.75, 0.75)
        assert c.fpr == pytest.approx(1 / 6)

    def test_confusion_extremes(self):
        s, y = np.array([0.2, 0.4, 0.6]), np.array([1, 0, 1])
        assert confusion_metrics(s, y, 0.0).recall == 1.0
        assert confusion_metrics(s, y, 1.0).precision is None

    def test_confusion_rejects_non_binary(self):
        with pytest.raises(ValueError):
            confusion_metrics([0.1], [2])


class TestNegatives:
    def test_complete_graph_infeasible(self):
        with pytest.raises(ValueError, match="cannot sample"):
            sample_negatives((3, [(0, 1), (1, 2), (0, 2)]), 1)

    def test_path_enumeration(self):
        neg = sample_negatives((4, [(0, 1), (1, 2), (2, 3)]), 2, seed=0)
        pairs = set(map(tuple, neg.tolist()))
        assert len(pairs) == 2 and pairs <= {(0, 2), (0, 3), (1, 3)}

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(1, 40))
    def test_never_edges_or_excluded(self, seed, count):
        edges, _ = sbm_benchmark(seed % 7, block_size=10)[1:3]
        edges = edges.tolist()
        exclude = [(0, 5), (3, 9)]
        neg = sample_negatives((40, edges), count, seed, exclude=exclude)
        keys = {tuple(sorted(e)) for e in edges} | set(exclude)
        got = [tuple(p) for p in neg.tolist()]
        assert len(set(got)) == count
        assert not (set(got) & keys)
        assert all(a < b for a, b in got)

    def test_rejection_path_on_large_graph(self):
        rng = np.random.default_rng(0)
        edges = rng.integers(0, 5000, size=(2000, 2))
        edges = edges[edges[:, 0] != edges[:, 1]]
        neg = sample_negatives((5000, edges), 500, seed=1)
        keys = {tuple(sorted(e)) for e in edges.tolist()}
        assert len({tuple(p) for p in neg.tolist()}) == 500
        assert not ({tuple(p) for p in neg.tolist()} & keys)


class TestSplit:
    def test_floor_sizes_on_reference_size(self):
        rng = np.random.default_rng(0)
        n = 20_000
        keys = rng.choice(n * (n - 1) // 2, size=68_797, replace=False)
        edges = np.column_stack([keys // n, keys % n])
        edges = edges[edges[:, 0] != edges[:, 1]]
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        m = len(edges)
        s = split_edges((n, edges), seed=0)
        assert (len(s.val), len(s.test)) == (int(0.05 * m), int(0.10 * m))
        assert (int(0.05 * 68797), int(0.10 * 68797)) == (3439, 6879)

    def test_tiny_graph(self):
        edges = [(i, i + 1) for i in range(10)]
        s = split_edges((11, edges), seed=0)
        assert (len(s.val), len(s.test), len(s.train)) == (0, 1, 9)

    def test_partition_and_disjoint(self):
        n, edges, _, _ = sbm_benchmark(0, block_size=30)
        s = split_edges((n, edges), seed=3)
        parts = [set(map(tuple, p.tolist())) for p in (s.train, s.val, s.test)]
        assert sum(map(len, parts)) == len(edges)
        assert set.union(*parts) == set(map(tuple, edges.tolist()))
        negs = set(map(tuple, np.vstack([s.val_neg, s.test_neg]).tolist()))
        assert len(negs) == len(s.val) + len(s.test)
        assert not negs & set.union(*parts)
        s.check()

    def test_deterministic(self):
        n, edges, _, _ = sbm_benchmark(0, block_size=30)
        a, b = split_edges((n, edges), seed=5), split_edges((n, edges), seed=5)
        for name in ("train", "val", "test", "val_neg", "test_neg"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split_edges((4, [(0, 1)]), 0.6, 0.5)


class TestAdam:
    def test_first_step(self):
        p = ad.Tensor([[0.0]], requires_grad=True)
        adam_step([p], [np.array([[0.5]])], OptimizerState())
        assert p.value[0, 0] == pytest.approx(-0.01, rel=1e-6)

    def test_zero_gradient(self):
        p = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        st_ = OptimizerState()
        for _ in range(3):
            adam_step([p], [np.zeros((2, 2))], st_)
        np.testing.assert_array_equal(p.value, np.ones((2, 2)))
        assert st_.step == 3

    def test_symmetry(self):
        a = ad.Tensor([[1.0, 1.0]], requires_grad=True)
        st_ = OptimizerState()
        for g in ([[0.3, 0.3]], [[-1.0, -1.0]]):
            adam_step([a], [np.array(g)], st_)
        assert a.value[0, 0] == a.value[0, 1]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([ad.Tensor([[1.0]])], [np.ones((1, 2))], OptimizerState())


@pytest.fixture(scope="module")
def sbm_split():
    n, edges, X, _ = sbm_benchmark(0, block_size=40)
    return X, split_edges((n, edges), seed=0)


class TestTraining:
    def test_zero_epochs_is_init_forward(self, sbm_split):
        X, split = sbm_split
        Z, hist = train_gae("gcn", X, split, epochs=0, seed=1)
        assert hist.loss == [] and Z.kind == "gnn"
        np.testing.assert_array_equal(Z.values, hist.encoder(X, split.train_graph()).value)

    def test_zero_lr_keeps_parameters(self, sbm_split):
        X, split = sbm_split
        _, init = train_gae("gcn", X, split, epochs=0, seed=1)
        _, hist = train_gae("gcn", X, split, epochs=5, seed=1, lr=0.0)
        for a, b in zip(init.encoder.parameters(), hist.encoder.parameters()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_loss_decreases_and_deterministic(self, sbm_split):
        X, split = sbm_split
        Z1, h1 = train_gae("gcn", X, split, epochs=40, seed=2)
        Z2, h2 = train_gae("gcn", X, split, epochs=40, seed=2)
        np.testing.assert_array_equal(Z1.values, Z2.values)
        assert h1.loss == h2.loss
        assert np.mean(h1.loss[-5:]) < h1.loss[0]
        assert h1.val_epochs == [10, 20, 30, 40]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_epoch(self, sbm_split):
        X, split = sbm_split
        with pytest.raises(TrainingDiverged, match="epoch 1"):
            train_gae("gcn", X * np.inf, split, epochs=3)

    def test_feature_row_mismatch(self, sbm_split):
        X, split = sbm_split
        with pytest.raises(ValueError, match="rows"):
            train_gae("gcn", X[:-1], split, epochs=1)

    @pytest.mark.parametrize("kind", ["sage", "gin", "gat", "agnn", "graphunet"])
    def test_every_encoder_trains(self, sbm_split, kind):
        X, split = sbm_split
        Z, hist = train_gae(kind, X, split, epochs=3, seed=0)
        assert np.all(np.isfinite(Z.values)) and len(hist.loss) == 3

    def test_random_baseline_near_half(self):
        n, edges, _, _ = sbm_benchmark(1)
        split = split_edges((n, edges), seed=1)
        assert 0.4 < random_embedding_metrics(split, seed=1)["auc"] < 0.6


class TestTables:
    def test_minimal_grid(self, sbm_split):
        X, split = sbm_split
        g = MessageGraph(split.n, np.vstack([split.train, split.val, split.test]))
        table = run_matrix({"tfidf": X}, ["gcn"], g, runs=2, epochs=3)
        df = table.to_frame()
        assert len(df) == 1 and df.loc[0, "runs"] == 2
        assert df.loc[0, "auc_std"] is not None

    def test_duplicate_seeds_zero_std(self, sbm_split):
        X, split = sbm_split
        g = MessageGraph(split.n, np.vstack([split.train, split.val, split.test]))
        table = run_matrix({"a": X}, ["gcn"], g, runs=2, seeds=[4, 4], epochs=3)
        assert table.reports[0].std("auc") == 0.0

    def test_failed_cell_kept(self, sbm_split, tmp_path):
        X, split = sbm_split
        g = MessageGraph(split.n, np.vstack([split.train, split.val, split.test]))
        table = run_matrix({"ok": X, "bad": X[:5]}, ["gcn"], g, runs=1, epochs=2)
        assert [r.error is None for r in table.reports] == [True, False]
        assert table.to_frame(display=True)["AUC"].tolist()[1] == "failed"
        table.write_json(tmp_path / "t.json")
        assert len(json.loads((tmp_path / "t.json").read_text())) == 2

    def test_ablation(self, sbm_split):
        X, split = sbm_split
        g = MessageGraph(split.n, np.vstack([split.train, split.val, split.test]))
        fm = FeatureMatrix(np.hstack([X, np.ones((len(X), 2))]), {"year": (0, 4), "first-author": (4, 6)},
                           tuple(str(i) for i in range(len(X))))
        table = ablation_run(EncoderConfig.default("gcn"), fm, g, ["first-author"], runs=1, epochs=2)
        df = table.to_frame()
        assert df["removed"].tolist() == ["none", "first-author"]
        assert df["width"].tolist() == [6, 4]
        assert table.to_frame(display=True)["Removed feature"].tolist() == ["None", "First Author"]

    def test_ablation_unknown_group(self, sbm_split):
        X, split = sbm_split
        fm = FeatureMatrix(X, {"year": (0, 4)}, tuple(str(i) for i in range(len(X))))
        with pytest.raises(ValueError):
            ablation_run("gcn", fm, (split.n, split.train), ["gender"], runs=1)
