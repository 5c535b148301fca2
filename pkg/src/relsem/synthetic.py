"""Synthetic data generators for benchmarks, tests and demos."""
from __future__ import annotations

import numpy as np

from .corpus import Article, Corpus
from .graph import stochastic_block_model

_JOURNALS = (
    ("journal_of_informetrics", "Informetrics", ("citation", "indicator", "impact", "index", "ranking",
                                                  "bibliometric", "metric", "author", "journal", "count")),
    ("scientometrics", "Scientometrics", ("collaboration", "network", "coauthor", "institution", "country",
                                          "productivity", "research", "output", "funding", "grant")),
    ("isis", "History of Science", ("history", "century", "philosophy", "natural", "museum", "archive",
                                    "biography", "medieval", "instrument", "culture")),
    ("research_policy", "Policy", ("innovation", "policy", "patent", "firm", "industry", "university",
                                   "technology", "transfer", "regional", "economic")),
)
_COMMON = ("study", "analysis", "method", "data", "result", "paper", "approach", "model", "evidence", "science")


def sbm_benchmark(seed: int = 0, n_blocks: int = 4, block_size: int = 100, p_in: float = 0.10,
                  p_out: float = 0.005, noise: float = 0.1):
    """SBM graph with block one-hot plus Gaussian-noise features.

    Returns ``(n, edges, X, labels)``.
    """
    rng = np.random.default_rng(seed)
    edges, labels = stochastic_block_model([block_size] * n_blocks, p_in, p_out, rng)
    X = np.eye(n_blocks)[labels] + rng.normal(scale=noise, size=(len(labels), n_blocks))
    return len(labels), edges, X, labels


def planted_topic_corpus(n_docs: int = 200, V: int = 30, K: int = 3, doc_len: int = 50,
                         seed: int = 0, concentration: float = 0.3):
    """Documents drawn from K topics with disjoint word supports.

    Returns ``(docs, beta)`` where word ``w{j:02d}`` is column ``j`` of beta.
    """
    rng = np.random.default_rng(seed)
    beta = np.zeros((K, V))
    for k, cols in enumerate(np.array_split(np.arange(V), K)):
        beta[k, cols] = 1.0 / len(cols)
    docs = []
    for _ in range(n_docs):
        theta = rng.dirichlet([concentration] * K)
        z = rng.choice(K, size=doc_len, p=theta)
        docs.append([f"w{rng.choice(V, p=beta[k]):02d}" for k in z])
    return docs, beta


def toy_corpus(n: int = 160, seed: int = 0, last_year: int = 2020) -> Corpus:
    """Small corpus with four journals, three countries and journal-clustered citations."""
    rng = np.random.default_rng(seed)
    countries = ("DE", "FR", "US")
    affs = [(f"AF{i}", countries[i % 3]) for i in range(9)]
    arts = []
    journal_of = rng.integers(0, len(_JOURNALS), size=n)
    years = np.sort(rng.integers(last_year - 12, last_year - 1, size=n))
    for i in range(n):
        slug, field, words = _JOURNALS[journal_of[i]]
        vocab = words + _COMMON

        def text(k):
            return " ".join(rng.choice(vocab, size=k, p=_mix(len(words), len(_COMMON))))

        n_auth = int(rng.integers(1, 4))
        authors = tuple(f"AU{int(a)}" for a in rng.choice(40, size=n_auth, replace=False))
        first = int(rng.integers(0, len(affs)))
        aff = tuple(affs[first] if rng.random() < 0.6 else affs[int(rng.integers(0, len(affs)))]
                    for _ in range(n_auth))
        y = int(years[i])
        rate = rng.gamma(1.0, 1.5)
        per_year = {yr: int(rng.poisson(rate)) for yr in range(y, last_year + 1)}
        earlier = np.flatnonzero(years[:i] < y)
        refs = []
        if len(earlier):
            same = earlier[journal_of[earlier] == journal_of[i]]
            for _ in range(int(rng.integers(0, 6))):
                pool = same if len(same) and rng.random() < 0.8 else earlier
                refs.append(f"P{int(rng.choice(pool)):04d}")
        refs.append(f"EXT{int(rng.integers(0, 50))}")
        arts.append(Article(
            id=f"P{i:04d}", title=text(4).title(), abstract=text(30) + f" in {y} we use {int(rng.integers(2, 99))} cases.",
            keywords=(str(rng.choice(words)), str(rng.choice(words))), authors=authors, affiliations=aff,
            journal=slug, field_label=field, year=y, subject_areas=(field, "Social Sciences"),
            citations_per_year=per_year, total_citations=sum(per_year.values()),
            references=tuple(dict.fromkeys(refs)),
        ))
    return Corpus(arts)


def _mix(k_topic: int, k_common: int) -> np.ndarray:
    p = np.r_[np.full(k_topic, 0.8 / k_topic), np.full(k_common, 0.2 / k_common)]
    return p / p.sum()


def planted_spectrum(n_groups: int = 10, members: int = 20, dim: int = 8, noise: float = 0.05,
                     seed: int = 0) -> tuple[np.ndarray, list, np.ndarray]:
    """Groups placed at evenly spaced positions on one latent axis.

    Rows are ``e_1 + position * e_0`` plus isotropic noise, so the cosine with
    the axis between the two extreme groups increases with position.
    Returns (rows, labels, positions) with labels ``g0`` (lowest) upward.
    """
    rng = np.random.default_rng(seed)
    positions = np.linspace(-1.0, 1.0, n_groups)
    rows, labels = [], []
    for g, pos in enumerate(positions):
        center = np.zeros(dim)
        center[0], center[1] = pos, 1.0
        rows.append(center + noise * rng.standard_normal((members, dim)))
        labels += [f"g{g}"] * members
    return np.vstack(rows), labels, positions


def planted_norm_embedding(citations, dim: int = 8, seed: int = 0) -> np.ndarray:
    """Random directions scaled so each row norm equals ``ln(1 + citations)``; zero rows get a tiny norm."""
    c = np.asarray(citations, dtype=np.float64)
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((len(c), dim))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    return U * np.maximum(np.log1p(c), 1e-3)[:, None]
