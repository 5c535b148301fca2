"""Link-prediction protocol: edge splits, GAE training, metrics and ablations."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from . import autodiff as ad
from .corpus import FeatureMatrix, canonical_block
from .gnn import (EncoderConfig, MessageGraph, as_message_graph, inner_product_decode,
                  make_encoder, reconstruction_loss)
from .textembed import EmbeddingMatrix

log = logging.getLogger(__name__)

ABLATION_LABELS = {
    "none": "None",
    "first-author": "First Author",
    "affiliation": "Affiliation",
    "subject-area": "Subject Area",
    "topic-distribution": "Topic Distribution",
    "year": "Year",
    "citations": "Citations",
    "text-embedding": "Text embedding",
}


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# splits and negatives


def _pair_keys(pairs: np.ndarray, n: int) -> np.ndarray:
    pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
    return pairs[:, 0] * n + pairs[:, 1]


def _keys_to_pairs(keys: np.ndarray, n: int) -> np.ndarray:
    return np.column_stack([keys // n, keys % n]).astype(np.int64)


def _graph_parts(graph) -> tuple[int, np.ndarray]:
    if isinstance(graph, tuple):
        n, edges = graph
        return int(n), np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=1)
    return int(graph.n), np.asarray(graph.undirected_edges if not isinstance(graph, MessageGraph)
                                    else graph.edges, dtype=np.int64).reshape(-1, 2)


def sample_negatives(graph, count: int, seed=0, exclude=None) -> np.ndarray:
    """Distinct uniform non-edges (i < j), avoiding ``exclude`` pairs.

    ``graph`` is a graph object or an ``(n, edges)`` tuple.
    """
    n, edges = _graph_parts(graph)
    rng = np.random.default_rng(seed)
    banned = np.unique(np.concatenate([_pair_keys(edges, n),
                                       _pair_keys(exclude if exclude is not None else np.zeros((0, 2)), n)]))
    total = n * (n - 1) // 2
    available = total - len(banned)
    if count > available:
        raise ValueError(f"cannot sample {count} negatives: only {available} non-edges available")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if total <= 2_000_000 or count > available // 2:
        iu, ju = np.triu_indices(n, k=1)
        keys = iu.astype(np.int64) * n + ju
        keys = keys[~np.isin(keys, banned, assume_unique=True)]
        pick = np.sort(rng.choice(len(keys), size=count, replace=False))
        return _keys_to_pairs(keys[rng.permutation(pick)], n)
    chosen: list[np.ndarray] = []
    have = np.zeros(0, dtype=np.int64)
    while len(have) < count:
        need = count - len(have)
        i = rng.integers(0, n, size=2 * need + 16)
        j = rng.integers(0, n, size=2 * need + 16)
        ok = i != j
        keys = np.minimum(i, j)[ok] * n + np.maximum(i, j)[ok]
        keys = keys[~np.isin(keys, banned)]
        keys = keys[~np.isin(keys, have)]
        _, first = np.unique(keys, return_index=True)
        keys = keys[np.sort(first)][:need]
        chosen.append(keys)
        have = np.concatenate(chosen)
    return _keys_to_pairs(have, n)


@dataclass(frozen=True)
class EdgeSplit:
    n: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray
    seed: int

    def train_graph(self) -> MessageGraph:
        return MessageGraph(self.n, self.train)

    def check(self) -> None:
        """Assert held-out positives are absent from the message-passing graph."""
        tr = set(_pair_keys(self.train, self.n).tolist())
        for name in ("val", "test"):
            held = set(_pair_keys(getattr(self, name), self.n).tolist())
            if tr & held:
                raise AssertionError(f"{name} positives leak into the training graph")


def split_edges(graph, val_frac: float = 0.05, test_frac: float = 0.10, seed: int = 0) -> EdgeSplit:
    """Random split of undirected edges with equal-size negative sets for val/test."""
    if not (0 < val_frac < 1 and 0 < test_frac < 1 and val_frac + test_frac < 1):
        raise ValueError("fractions must lie in (0, 1) and sum to less than 1")
    n, edges = _graph_parts(graph)
    edges = np.unique(edges, axis=0)
    m = len(edges)
    n_val = int(math.floor(val_frac * m))
    n_test = int(math.floor(test_frac * m))
    if m - n_val - n_test < 1:
        raise ValueError("graph too small to leave any training edges")
    ss = np.random.SeedSequence(seed)
    perm_rng, neg_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    perm = perm_rng.permutation(m)
    val = edges[np.sort(perm[:n_val])]
    test = edges[np.sort(perm[n_val:n_val + n_test])]
    train = edges[np.sort(perm[n_val + n_test:])]
    negs = sample_negatives((n, edges), n_val + n_test, neg_rng)
    return EdgeSplit(n, train, val, test, negs[:n_val], negs[n_val:], seed)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[ad.Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params``."""
    lr = state.lr if lr is None else lr
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# metrics


def auc(pos_scores, neg_scores) -> float:
    """Probability a positive outscores a negative, ties counting one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def average_precision(labels_in_score_order) -> float:
    """Sum over ranks of recall increments times precision at that rank."""
    y = np.asarray(labels_in_score_order, dtype=np.int64).ravel()
    P = int(y.sum())
    if P == 0:
        raise ValueError("average precision needs at least one positive")
    hits = np.cumsum(y)
    precision = hits / np.arange(1, len(y) + 1)
    return float(np.sum(precision[y == 1]) / P)


def rank_labels(scores, labels) -> np.ndarray:
    """Labels sorted by descending score; ties keep index order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.asarray(labels)[order]


def average_precision_scores(scores, labels) -> float:
    return average_precision(rank_labels(scores, labels))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) points over descending distinct thresholds, starting at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    P, N = y.sum(), len(y) - y.sum()
    if P == 0 or N == 0:
        raise ValueError("ROC needs both classes")
    return np.r_[0.0, fp / N], np.r_[0.0, tp / P]


def roc_auc_trapezoid(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass(frozen=True)
class Confusion:
    precision: float | None
    recall: float | None
    fpr: float | None
    tp: int
    fp: int
    fn: int
    tn: int


def confusion_metrics(scores, labels, threshold: float = 0.5) -> Confusion:
    """Precision, recall and false-positive rate; undefined ratios are ``None``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))

    def ratio(a, b):
        return a / b if b else None

    return Confusion(ratio(tp, tp + fp), ratio(tp, tp + fn), ratio(fp, fp + tn), tp, fp, fn, tn)


def link_metrics(Z, pos, neg, threshold: float = 0.5) -> dict:
    """AUC, AP and thresholded rates of the inner-product decoder."""
    ps = inner_product_decode(Z, pos)
    ns = inner_product_decode(Z, neg)
    scores = np.concatenate([ps, ns])
    labels = np.r_[np.ones(len(ps), dtype=np.int64), np.zeros(len(ns), dtype=np.int64)]
    c = confusion_metrics(scores, labels, threshold)
    return {"auc": auc(ps, ns), "ap": average_precision_scores(scores, labels),
            "precision": c.precision, "recall": c.recall, "fpr": c.fpr}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_epochs: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    val_ap: list = field(default_factory=list)
    encoder: object = field(default=None, repr=False)


def _seed_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "dropout", "negatives")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def train_gae(encoder_cfg: EncoderConfig | str, features, split: EdgeSplit, epochs: int = 200,
              seed: int = 0, lr: float = 0.01, eval_every: int = 10, ids: Sequence[str] | None = None,
              callback: Callable[[int, float], None] | None = None) -> tuple[EmbeddingMatrix, TrainHistory]:
    """Full-batch GAE training on the split's training graph."""
    cfg = EncoderConfig.default(encoder_cfg) if isinstance(encoder_cfg, str) else encoder_cfg
    X = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if X.shape[0] != split.n:
        raise ValueError(f"features have {X.shape[0]} rows but the graph has {split.n} nodes")
    split.check()
    streams = _seed_streams(seed)
    enc = make_encoder(cfg, X.shape[1], streams["init"])
    params = enc.parameters()
    g = split.train_graph()
    state = OptimizerState(lr=lr)
    hist = TrainHistory(encoder=enc)
    for epoch in range(1, epochs + 1):
        neg = sample_negatives(g, len(split.train), streams["negatives"])
        with ad.Tape() as tape:
            Z = enc(X, g, training=True, rng=streams["dropout"])
            loss = reconstruction_loss(Z, split.train, neg)
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        grads = ad.backward(tape, loss, params)
        adam_step(params, grads, state)
        hist.loss.append(value)
        if callback is not None:
            callback(epoch, value)
        if len(split.val) and (epoch % eval_every == 0 or epoch == epochs):
            Zv = enc(X, g, training=False).value
            m = link_metrics(Zv, split.val, split.val_neg)
            hist.val_epochs.append(epoch)
            hist.val_auc.append(m["auc"])
            hist.val_ap.append(m["ap"])
    Z = enc(X, g, training=False).value
    ids = tuple(ids) if ids is not None else tuple(str(i) for i in range(split.n))
    return EmbeddingMatrix(Z, ids, "gnn"), hist


def random_embedding_metrics(split: EdgeSplit, dim: int = 16, seed: int = 0) -> dict:
    """Test metrics of i.i.d. Gaussian embeddings (a chance-level baseline)."""
    Z = np.random.default_rng(seed).normal(size=(split.n, dim))
    return link_metrics(Z, split.test, split.test_neg)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    label: dict
    runs: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    error: str | None = None

    def values(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.runs if r.get(metric) is not None], dtype=np.float64)

    def mean(self, metric: str) -> float | None:
        v = self.values(metric)
        return float(v.mean()) if len(v) else None

    def std(self, metric: str) -> float | None:
        """Sample standard deviation; absent with fewer than two runs."""
        v = self.values(metric)
        return float(v.std(ddof=1)) if len(v) >= 2 else None

    def summary(self) -> dict:
        out = dict(self.label)
        for k in ("auc", "ap", "precision", "recall", "fpr"):
            out[f"{k}_mean"] = self.mean(k)
            out[f"{k}_std"] = self.std(k)
        out["runs"] = len(self.runs)
        out["error"] = self.error
        return out


def _fmt(mean, std) -> str:
    if mean is None:
        return "failed"
    return f"{mean:.2f}" if std is None else f"{mean:.2f} ({std:.2f})"


@dataclass
class ResultTable:
    reports: list

    def to_frame(self, display: bool = False) -> pd.DataFrame:
        if not display:
            return pd.DataFrame([r.summary() for r in self.reports])
        rows = []
        for r in self.reports:
            row = {("Text Encoding" if k == "text_encoding" else "Model" if k == "encoder" else
                    "Removed feature" if k == "removed" else k): v for k, v in r.label.items()}
            if "Removed feature" in row:
                row["Removed feature"] = ABLATION_LABELS.get(row["Removed feature"], row["Removed feature"])
            row["AUC"] = _fmt(r.mean("auc"), r.std("auc")) if r.error is None else "failed"
            row["AP"] = _fmt(r.mean("ap"), r.std("ap")) if r.error is None else "failed"
            rows.append(row)
        return pd.DataFrame(rows)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def write_json(self, path) -> None:
        payload = [{**r.summary(), "per_run": r.runs, "seeds": r.seeds} for r in self.reports]
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _run_cell(cfg, X, graph, seeds, epochs, lr, val_frac, test_frac) -> list[dict]:
    runs = []
    for s in seeds:
        split = split_edges(graph, val_frac, test_frac, seed=s)
        Z, _ = train_gae(cfg, X, split, epochs=epochs, seed=s, lr=lr)
        runs.append(link_metrics(Z.values, split.test, split.test_neg))
    return runs


def _execute(cells: list, jobs: int) -> list:
    def run(cell):
        report, fn = cell
        try:
            report.runs = fn()
        except Exception as exc:  # noqa: BLE001 - reported per cell
            log.warning("cell %s failed: %s", report.label, exc)
            report.error = f"{type(exc).__name__}: {exc}"
        return report

    if jobs <= 1:
        return [run(c) for c in cells]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, cells))


def _seeds(runs: int, seeds) -> list[int]:
    seeds = list(seeds) if seeds is not None else list(range(runs))
    if len(seeds) != runs:
        raise ValueError("need exactly one seed per run")
    return seeds


def _encoder_cfg(e) -> EncoderConfig:
    return EncoderConfig.default(e) if isinstance(e, str) else e


def run_matrix(features_by_encoding: Mapping[str, object], encoders: Sequence, graph, runs: int = 10,
               seeds: Sequence[int] | None = None, epochs: int = 200, lr: float = 0.01,
               val_frac: float = 0.05, test_frac: float = 0.10, jobs: int = 1) -> ResultTable:
    """Text-encoding by encoder grid; one report per cell, failures kept in place."""
    seeds = _seeds(runs, seeds)
    graph = as_message_graph(graph)
    cells = []
    for enc_name, X in features_by_encoding.items():
        X = np.asarray(getattr(X, "values", X), dtype=np.float64)
        for e in encoders:
            cfg = _encoder_cfg(e)
            report = MetricsReport({"text_encoding": enc_name, "encoder": cfg.kind}, seeds=seeds)
            cells.append((report, lambda cfg=cfg, X=X: _run_cell(cfg, X, graph, seeds, epochs, lr,
                                                                  val_frac, test_frac)))
    return ResultTable(_execute(cells, jobs))


def ablation_run(base_cfg, features: FeatureMatrix, graph, groups: Sequence[str], runs: int = 10,
                 seeds: Sequence[int] | None = None, epochs: int = 200, lr: float = 0.01,
                 val_frac: float = 0.05, test_frac: float = 0.10, jobs: int = 1) -> ResultTable:
    """One row for the full feature set, then one per removed block."""
    names = ["none"] + [canonical_block(g) for g in groups if g != "none"]
    for n in names[1:]:
        if n not in features.blocks:
            raise ValueError(f"feature block {n!r} is not present in the feature matrix")
    seeds = _seeds(runs, seeds)
    cfg = _encoder_cfg(base_cfg)
    graph = as_message_graph(graph)
    cells = []
    for n in names:
        X = features.values if n == "none" else features.drop(n).values
        report = MetricsReport({"removed": n, "encoder": cfg.kind, "width": int(X.shape[1])}, seeds=seeds)
        cells.append((report, lambda X=X: _run_cell(cfg, X, graph, seeds, epochs, lr, val_frac, test_frac)))
    return ResultTable(_execute(cells, jobs))
