"""Semantic document embeddings.

Document-term matrices, LDA fitted by collapsed Gibbs sampling, PV-DM
paragraph vectors with negative sampling, and I/O for precomputed vectors.
The two samplers run as numba kernels on a single thread so that a seed
fully determines the result.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
import pandas as pd
import scipy.sparse as sp

from .corpus import Vocabulary

log = logging.getLogger(__name__)

EMBEDDING_KINDS = ("lda-theta", "pvdm", "external", "gnn", "tfidf")
_EMB_MAGIC = b"EMB1"


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: np.ndarray
    ids: tuple[str, ...]
    kind: str = "external"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] < 1:
            raise ValueError(f"embedding must be n x d with d >= 1, got shape {values.shape}")
        if values.shape[0] != len(self.ids):
            raise ValueError("embedding rows and ids disagree in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding contains non-finite values")
        if self.kind not in EMBEDDING_KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.ids)}

    def align(self, ids: Sequence[str]) -> "EmbeddingMatrix":
        """Rows reordered (and restricted) to ``ids``."""
        pos = self.index()
        missing = [i for i in ids if i not in pos]
        if missing:
            raise KeyError(f"ids missing from embedding: {missing[:10]}")
        return EmbeddingMatrix(self.values[[pos[i] for i in ids]], tuple(ids), self.kind)


# ---------------------------------------------------------------------------
# document-term matrices


@dataclass(frozen=True)
class DocumentTermMatrix:
    matrix: sp.csr_matrix
    weighting: str
    vocabulary: Vocabulary


def build_dtm(docs: Sequence[Sequence[str]], vocab: Vocabulary, weighting: str = "count") -> DocumentTermMatrix:
    """n x V matrix with ``binary``, ``count`` or ``tfidf`` weighting.

    TF-IDF is raw term frequency times ``ln(n / df)`` with no smoothing and
    no row normalization.
    """
    if weighting not in ("binary", "count", "tfidf"):
        raise ValueError(f"unknown weighting {weighting!r}")
    w2i = vocab.word_to_id
    rows, cols = [], []
    for i, doc in enumerate(docs):
        for tok in doc:
            j = w2i.get(tok)
            if j is not None:
                rows.append(i)
                cols.append(j)
    n = len(docs)
    counts = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, len(vocab)))
    counts.sum_duplicates()
    if weighting == "count":
        return DocumentTermMatrix(counts, weighting, vocab)
    if weighting == "binary":
        b = counts.copy()
        b.data[:] = 1.0
        return DocumentTermMatrix(b, weighting, vocab)
    df = np.bincount(counts.indices, minlength=len(vocab)).astype(np.float64)
    idf = np.log(np.divide(n, df, out=np.ones_like(df), where=df > 0))
    tfidf = (counts @ sp.diags(idf)).tocsr()
    return DocumentTermMatrix(tfidf, weighting, vocab)


# ---------------------------------------------------------------------------
# LDA


@dataclass(frozen=True)
class TopicModel:
    beta: np.ndarray   # K x V topic-word
    theta: np.ndarray  # n x K document-topic
    alpha: float
    eta: float

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    def top_words(self, words: Sequence[str], k: int = 10) -> list[list[str]]:
        return [[words[j] for j in np.argsort(-row, kind="stable")[:k]] for row in self.beta]


def gibbs_conditional(n_dk, n_kw, n_k, alpha: float, eta: float, V: int) -> np.ndarray:
    """Unnormalized p(z_i = k | rest) from counts that exclude token i."""
    n_dk, n_kw, n_k = (np.asarray(a, dtype=np.float64) for a in (n_dk, n_kw, n_k))
    return (n_dk + alpha) * (n_kw + eta) / (n_k + V * eta)


@numba.njit(cache=True)
def _gibbs_sweep(docs, words, z, n_dk, n_kw, n_k, alpha, eta, u):
    K = n_k.shape[0]
    V = n_kw.shape[1]
    veta = V * eta
    p = np.empty(K)
    for i in range(docs.shape[0]):
        d = docs[i]
        w = words[i]
        k = z[i]
        n_dk[d, k] -= 1
        n_kw[k, w] -= 1
        n_k[k] -= 1
        total = 0.0
        for t in range(K):
            total += (n_dk[d, t] + alpha) * (n_kw[t, w] + eta) / (n_k[t] + veta)
            p[t] = total
        r = u[i] * total
        k = 0
        while k < K - 1 and p[k] <= r:
            k += 1
        z[i] = k
        n_dk[d, k] += 1
        n_kw[k, w] += 1
        n_k[k] += 1


def lda_fit(dtm, K: int = 20, alpha: float | None = None, eta: float = 0.01,
            iterations: int = 500, burn_in: int = 200, seed: int = 0,
            debug: bool = False) -> TopicModel:
    """Fit LDA by collapsed Gibbs sampling on a count matrix.

    ``theta`` and ``beta`` are posterior means from counts averaged over the
    sweeps after ``burn_in`` (the final state if there are none). With
    ``iterations=0`` both are uniform.
    """
    mat = dtm.matrix if isinstance(dtm, DocumentTermMatrix) else sp.csr_matrix(dtm)
    if isinstance(dtm, DocumentTermMatrix) and dtm.weighting != "count":
        raise ValueError("LDA needs a count-weighted document-term matrix")
    if K < 2:
        raise ValueError("K must be at least 2")
    alpha = 50.0 / K if alpha is None else float(alpha)
    n, V = mat.shape
    if K > V:
        log.warning("more topics (%d) than vocabulary words (%d)", K, V)
    coo = mat.tocoo()
    counts = np.rint(coo.data).astype(np.int64)
    if np.any(counts < 0) or not np.allclose(counts, coo.data):
        raise ValueError("LDA needs non-negative integer counts")
    docs = np.repeat(coo.row.astype(np.int64), counts)
    words = np.repeat(coo.col.astype(np.int64), counts)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(docs))
    docs, words = docs[order], words[order]
    z = rng.integers(0, K, size=len(docs)).astype(np.int64)
    n_dk = np.zeros((n, K), dtype=np.int64)
    n_kw = np.zeros((K, V), dtype=np.int64)
    np.add.at(n_dk, (docs, z), 1)
    np.add.at(n_kw, (z, words), 1)
    n_k = n_kw.sum(axis=1)
    acc_dk = np.zeros((n, K))
    acc_kw = np.zeros((K, V))
    samples = 0
    for sweep in range(iterations):
        _gibbs_sweep(docs, words, z, n_dk, n_kw, n_k, alpha, eta, rng.random(len(docs)))
        if debug:
            assert n_dk.sum() == len(docs) and n_kw.sum() == len(docs) and n_k.sum() == len(docs)
        if sweep >= burn_in:
            acc_dk += n_dk
            acc_kw += n_kw
            samples += 1
    if iterations == 0:
        theta = np.full((n, K), 1.0 / K)
        beta = np.full((K, V), 1.0 / V)
    else:
        if samples == 0:
            acc_dk, acc_kw, samples = n_dk.astype(np.float64), n_kw.astype(np.float64), 1
        avg_dk, avg_kw = acc_dk / samples, acc_kw / samples
        theta = (avg_dk + alpha) / (avg_dk.sum(axis=1, keepdims=True) + K * alpha)
        beta = (avg_kw + eta) / (avg_kw.sum(axis=1, keepdims=True) + V * eta)
    theta /= theta.sum(axis=1, keepdims=True)
    beta /= beta.sum(axis=1, keepdims=True)
    return TopicModel(beta, theta, alpha, eta)


def lda_doc_topics(model: TopicModel, ids: Sequence[str]) -> EmbeddingMatrix:
    return EmbeddingMatrix(model.theta, tuple(ids), "lda-theta")


def topic_relative_importance(theta, group_labels: Sequence, groups: Sequence | None = None) -> pd.DataFrame:
    """Share of each topic within a group over its share in the whole corpus."""
    theta = np.asarray(getattr(theta, "values", theta), dtype=np.float64)
    labels = np.asarray(list(group_labels), dtype=object)
    if len(labels) != theta.shape[0]:
        raise ValueError("group labels must cover every row")
    groups = list(groups) if groups is not None else sorted(set(labels.tolist()), key=str)
    overall = theta.mean(axis=0)
    rows = []
    for g in groups:
        mask = labels == g
        if not mask.any():
            raise ValueError(f"group {g!r} is empty")
        rows.append(theta[mask].mean(axis=0) / overall)
    return pd.DataFrame(rows, index=groups, columns=[f"topic_{k}" for k in range(theta.shape[1])])


# ---------------------------------------------------------------------------
# PV-DM


def negative_sampling_loss(h, u_pos, u_negs) -> float:
    """``-ln s(u_pos . h) - sum ln s(-u_neg . h)`` for one prediction."""
    h = np.asarray(h, dtype=np.float64)
    pos = float(np.dot(u_pos, h))
    negs = np.atleast_2d(u_negs) @ h
    return float(np.logaddexp(0.0, -pos) + np.sum(np.logaddexp(0.0, negs)))


@numba.njit(cache=True)
def _lcg(state):
    return (state * np.uint64(25214903917) + np.uint64(11)) & np.uint64(0xFFFFFFFFFFFF)


@numba.njit(cache=True)
def _pvdm_train(doc_tokens, doc_offsets, doc_vecs, word_vecs, syn1, neg_table,
                window, negatives, epochs, alpha0, min_alpha, seed):
    dim = doc_vecs.shape[1]
    null = word_vecs.shape[0] - 1
    layer = syn1.shape[1]
    total_words = doc_tokens.shape[0] * epochs
    done = 0
    state = np.uint64(seed) & np.uint64(0xFFFFFFFFFFFF)
    h = np.empty(layer)
    grad = np.empty(layer)
    ctx = np.empty(2 * window, dtype=np.int64)
    n_docs = doc_offsets.shape[0] - 1
    for ep in range(epochs):
        for d in range(n_docs):
            lo = doc_offsets[d]
            hi = doc_offsets[d + 1]
            for pos in range(lo, hi):
                lr = alpha0 - (alpha0 - min_alpha) * done / total_words
                if lr < min_alpha:
                    lr = min_alpha
                done += 1
                c = 0
                for off in range(-window, window + 1):
                    if off == 0:
                        continue
                    q = pos + off
                    ctx[c] = doc_tokens[q] if lo <= q < hi else null
                    c += 1
                for j in range(dim):
                    h[j] = doc_vecs[d, j]
                for c in range(2 * window):
                    base = (c + 1) * dim
                    for j in range(dim):
                        h[base + j] = word_vecs[ctx[c], j]
                for j in range(layer):
                    grad[j] = 0.0
                center = doc_tokens[pos]
                for s in range(negatives + 1):
                    if s == 0:
                        target = center
                        label = 1.0
                    else:
                        state = _lcg(state)
                        target = neg_table[(state >> np.uint64(16)) % np.uint64(neg_table.shape[0])]
                        if target == center:
                            continue
                        label = 0.0
                    f = 0.0
                    for j in range(layer):
                        f += h[j] * syn1[target, j]
                    if f > 30.0:
                        f = 30.0
                    elif f < -30.0:
                        f = -30.0
                    g = (label - 1.0 / (1.0 + np.exp(-f))) * lr
                    for j in range(layer):
                        grad[j] += g * syn1[target, j]
                        syn1[target, j] += g * h[j]
                for j in range(dim):
                    doc_vecs[d, j] += grad[j]
                for c in range(2 * window):
                    base = (c + 1) * dim
                    w = ctx[c]
                    for j in range(dim):
                        word_vecs[w, j] += grad[base + j]


def pvdm_fit(docs: Sequence[Sequence[str]], ids: Sequence[str], dim: int = 20, window: int = 10,
             negatives: int = 5, epochs: int = 20, seed: int = 0, alpha: float = 0.025,
             min_alpha: float = 1e-4, min_count: int = 1) -> EmbeddingMatrix:
    """Distributed-memory paragraph vectors with concatenated context.

    The input layer is the document vector followed by the ``2 * window``
    context word vectors; positions outside the document use a trainable
    padding vector. Negatives come from a unigram^0.75 table.
    """
    if dim < 1:
        raise ValueError("dim must be at least 1")
    counts: dict[str, int] = {}
    for doc in docs:
        for tok in doc:
            counts[tok] = counts.get(tok, 0) + 1
    words = sorted(w for w, c in counts.items() if c >= min_count)
    w2i = {w: i for i, w in enumerate(words)}
    V = len(words)
    rng = np.random.default_rng(seed)
    doc_vecs = (rng.random((len(docs), dim)) - 0.5) / dim
    if epochs == 0 or V == 0:
        return EmbeddingMatrix(doc_vecs, tuple(ids), "pvdm")
    word_vecs = (rng.random((V + 1, dim)) - 0.5) / dim
    syn1 = np.zeros((V, dim * (2 * window + 1)))
    flat = [[w2i[t] for t in doc if t in w2i] for doc in docs]
    offsets = np.zeros(len(docs) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(f) for f in flat])
    tokens = np.array([t for f in flat for t in f], dtype=np.int64)
    freq = np.array([counts[w] for w in words], dtype=np.float64) ** 0.75
    table_size = max(1000, 20 * V)
    neg_table = np.repeat(np.arange(V), np.maximum(1, np.round(freq / freq.sum() * table_size)).astype(np.int64))
    _pvdm_train(tokens, offsets, doc_vecs, word_vecs, syn1, neg_table, window, negatives,
                epochs, alpha, min_alpha, int(rng.integers(1, 2**47)))
    return EmbeddingMatrix(doc_vecs, tuple(ids), "pvdm")


# ---------------------------------------------------------------------------
# embedding files


def save_embeddings(E: EmbeddingMatrix, path, format: str = "binary") -> None:
    """Write as TSV (9 significant digits) or ``EMB1`` binary, both single precision."""
    if E.values.size == 0:
        raise ValueError("refusing to export an empty embedding")
    vals = E.values.astype("<f4")
    path = Path(path)
    if format == "tsv":
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for key, row in zip(E.ids, vals):
                fh.write(key + "\t" + "\t".join(f"{float(x):.9g}" for x in row) + "\n")
    elif format == "binary":
        n, d = vals.shape
        body = _EMB_MAGIC + struct.pack("<II", n, d) + vals.tobytes() + "\n".join(E.ids).encode("utf-8")
        path.write_bytes(body)
    else:
        raise ValueError(f"unknown embedding format {format!r}")


def _read_binary(path: Path) -> tuple[list[str], np.ndarray]:
    data = path.read_bytes()
    if data[:4] != _EMB_MAGIC:
        raise ValueError(f"{path}: bad magic, not an EMB1 file")
    n, d = struct.unpack_from("<II", data, 4)
    end = 12 + 4 * n * d
    if len(data) < end:
        raise ValueError(f"{path}: dimension inconsistency, header says {n}x{d} but file is truncated")
    vals = np.frombuffer(data, dtype="<f4", count=n * d, offset=12).reshape(n, d)
    ids = data[end:].decode("utf-8").split("\n") if n else []
    if len(ids) != n:
        raise ValueError(f"{path}: dimension inconsistency, {n} rows but {len(ids)} ids")
    return ids, vals


def _read_tsv(path: Path) -> tuple[list[str], np.ndarray]:
    ids, rows, width = [], [], None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            key, *fields = line.split("\t")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise ValueError(f"{path}:{lineno}: dimension inconsistency, "
                                 f"expected {width} values, got {len(fields)}")
            ids.append(key)
            rows.append([float(x) for x in fields])
    return ids, np.asarray(rows, dtype=np.float32).reshape(len(ids), width or 0)


def load_external_embeddings(path, expected_ids: Sequence[str] | None = None,
                             kind: str = "external") -> EmbeddingMatrix:
    """Read TSV or ``EMB1`` binary vectors, aligned to ``expected_ids`` order."""
    path = Path(path)
    with path.open("rb") as fh:
        binary = fh.read(4) == _EMB_MAGIC
    ids, vals = _read_binary(path) if binary else _read_tsv(path)
    E = EmbeddingMatrix(vals.astype(np.float64), tuple(ids), kind)
    if expected_ids is None:
        return E
    pos = E.index()
    missing = [i for i in expected_ids if i not in pos]
    if missing:
        raise KeyError(f"{path}: missing ids {missing}")
    extra = len(ids) - len(expected_ids)
    if extra > 0:
        log.warning("%s: ignoring %d ids not in the corpus", path, extra)
    return E.align(list(expected_ids))
