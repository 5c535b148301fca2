"""Group-level analyses of document embeddings.

Similarity between collaboration classes and journals, embedding norms by
citation group, averaged group vectors and projections onto a pivot axis.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

UNKNOWN = "unknown"
CITATION_GROUPS = ("zero", "lower", "mid-low", "mid-high", "high")


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("embedding has zero rows; cosine undefined")
    return X / norms


def collaboration_class(article) -> str:
    """A single author, B one institution, C one country, D several countries."""
    if len(article.authors) == 0:
        return UNKNOWN
    if len(article.authors) == 1:
        return "A"
    affs = [a for a, _ in article.affiliations]
    if not affs or any(a is None for a in affs):
        return UNKNOWN
    if len(set(affs)) == 1:
        return "B"
    countries = [c for _, c in article.affiliations]
    if any(c is None for c in countries):
        return UNKNOWN
    return "C" if len(set(countries)) == 1 else "D"


def groups_from_labels(labels: Sequence, exclude=(UNKNOWN, None)) -> dict:
    """label -> row indices, in sorted label order."""
    out: dict = {}
    for i, lab in enumerate(labels):
        if lab in exclude:
            continue
        out.setdefault(lab, []).append(i)
    return {k: np.asarray(out[k]) for k in sorted(out, key=str)}


def group_mean_cosine(E, row_groups: Mapping, col_groups: Mapping | None = None) -> pd.DataFrame:
    """Mean pairwise cosine between members of two groups, self-pairs excluded.

    Cells with no admissible pair (a singleton against itself) are NaN.
    """
    X = _unit_rows(np.asarray(getattr(E, "values", E), dtype=np.float64))
    col_groups = row_groups if col_groups is None else col_groups
    out = pd.DataFrame(index=list(row_groups), columns=list(col_groups), dtype=np.float64)
    for g, gi in row_groups.items():
        gi = np.asarray(gi)
        if len(gi) == 0:
            raise ValueError(f"group {g!r} is empty")
        for h, hj in col_groups.items():
            hj = np.asarray(hj)
            if len(hj) == 0:
                raise ValueError(f"group {h!r} is empty")
            S = X[gi] @ X[hj].T
            same = gi[:, None] == hj[None, :]
            pairs = S.size - int(same.sum())
            out.loc[g, h] = (S.sum() - S[same].sum()) / pairs if pairs else np.nan
    return out


def citation_groups(total_citations) -> np.ndarray:
    """Zero group plus quartiles of the non-zero counts; ties go to the lower group."""
    c = np.asarray(total_citations, dtype=np.float64)
    out = np.empty(len(c), dtype=object)
    out[c == 0] = "zero"
    nz = c > 0
    if nz.any():
        q1, q2, q3 = np.quantile(c[nz], [0.25, 0.5, 0.75])
        idx = np.searchsorted([q1, q2, q3], c[nz], side="left")
        out[nz] = np.asarray(CITATION_GROUPS[1:], dtype=object)[idx]
    return out


def frobenius_by_citation_group(E, total_citations) -> pd.DataFrame:
    """Mean row norm per citation group."""
    X = np.asarray(getattr(E, "values", E), dtype=np.float64)
    c = np.asarray(total_citations, dtype=np.float64)
    if len(c) != X.shape[0]:
        raise ValueError("citations must align with embedding rows")
    groups = citation_groups(c)
    norms = np.linalg.norm(X, axis=1)
    names = ("zero",) if np.all(c == 0) else CITATION_GROUPS
    rows = []
    for name in names:
        mask = groups == name
        rows.append({
            "group": name,
            "count": int(mask.sum()),
            "min_citations": float(c[mask].min()) if mask.any() else np.nan,
            "max_citations": float(c[mask].max()) if mask.any() else np.nan,
            "mean_norm": float(norms[mask].mean()) if mask.any() else np.nan,
        })
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class GroupEmbedding:
    vectors: dict
    counts: dict

    @property
    def labels(self) -> list:
        return list(self.vectors)

    def matrix(self) -> np.ndarray:
        return np.vstack([self.vectors[k] for k in self.vectors])


def aggregate_embedding(E, labels: Sequence) -> GroupEmbedding:
    """Arithmetic mean row per label; ``unknown`` and missing labels are skipped."""
    X = np.asarray(getattr(E, "values", E), dtype=np.float64)
    if len(labels) != X.shape[0]:
        raise ValueError("labels must cover every row")
    groups = groups_from_labels(labels)
    if not groups:
        raise ValueError("no labelled rows to aggregate")
    return GroupEmbedding({k: X[ix].mean(axis=0) for k, ix in groups.items()},
                          {k: len(ix) for k, ix in groups.items()})


def mean_similarity_to_others(group_emb: GroupEmbedding) -> dict:
    """For each label, mean cosine of its vector with every other label's vector."""
    usable = {}
    for k, v in group_emb.vectors.items():
        if np.linalg.norm(v) == 0:
            log.warning("group %r has a zero mean vector and is excluded", k)
            continue
        usable[k] = v
    if len(usable) < 2:
        raise ValueError("need at least two groups with non-zero vectors")
    keys = list(usable)
    S = _unit_rows(np.vstack([usable[k] for k in keys]))
    C = np.clip(S @ S.T, -1.0, 1.0)
    n = len(keys)
    return {k: float((C[i].sum() - C[i, i]) / (n - 1)) for i, k in enumerate(keys)}


def similarity_scatter(semantic: GroupEmbedding, relational: GroupEmbedding,
                       total_citations: Mapping | None = None) -> pd.DataFrame:
    """Per-label mean similarity in the semantic and relational spaces."""
    sem = mean_similarity_to_others(semantic)
    rel = mean_similarity_to_others(relational)
    labels = [k for k in sem if k in rel]
    return pd.DataFrame({
        "label": labels,
        "semantic_mean_cos": [sem[k] for k in labels],
        "relational_mean_cos": [rel[k] for k in labels],
        "total_citations": [None if total_citations is None else total_citations.get(k) for k in labels],
    })


def pivot_axis_projection(group_emb: GroupEmbedding, pivot_a, pivot_b) -> pd.Series:
    """Cosine of every group vector with ``v_a - v_b``; positive end is ``pivot_a``."""
    if pivot_a == pivot_b:
        raise ValueError("pivots must differ")
    for p in (pivot_a, pivot_b):
        if p not in group_emb.vectors:
            raise KeyError(f"pivot {p!r} is not a group label")
    axis = group_emb.vectors[pivot_a] - group_emb.vectors[pivot_b]
    if np.linalg.norm(axis) == 0:
        raise ValueError("pivot vectors coincide; axis is zero")
    out = {}
    for k, v in group_emb.vectors.items():
        out[k] = cosine(v, axis) if np.linalg.norm(v) > 0 else np.nan
    return pd.Series(out, name="cosine").sort_values(ascending=False, kind="stable")
