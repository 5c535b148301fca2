"""Article data model, corpus ingestion, text preprocessing and feature assembly."""
from __future__ import annotations

import csv
import datetime
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from nltk.stem import PorterStemmer

from .stopwords import ENGLISH_STOPWORDS

log = logging.getLogger(__name__)

NUM_TOKEN = "num"
CITATION_HORIZON = 10

# column blocks of the GNN feature matrix, in assembly order
FEATURE_BLOCKS = (
    "affiliation",
    "first-author",
    "year",
    "subject-area",
    "topic-distribution",
    "text-embedding",
    "citations",
)
_BLOCK_ALIASES = {
    "citations-1..10": "citations",
    "first_author": "first-author",
    "subject_area": "subject-area",
    "topic_distribution": "topic-distribution",
    "text_embedding": "text-embedding",
    "author": "first-author",
    "topics": "topic-distribution",
    "text": "text-embedding",
}


class CorpusError(ValueError):
    """Raised for unreadable or inconsistent corpus files."""


@dataclass(frozen=True)
class Article:
    id: str
    title: str = ""
    abstract: str = ""
    keywords: tuple[str, ...] = ()
    authors: tuple[str, ...] = ()
    affiliations: tuple[tuple[str | None, str | None], ...] = ()
    journal: str = ""
    field_label: str = ""
    year: int = 2000
    subject_areas: tuple[str, ...] = ()
    citations_per_year: Mapping[int, int] = field(default_factory=dict)
    total_citations: int = 0
    references: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise ValueError("article id must be non-empty")
        this_year = datetime.date.today().year
        if not 1900 <= self.year <= this_year:
            raise ValueError(f"article {self.id}: year {self.year} outside 1900..{this_year}")
        if len(self.authors) != len(self.affiliations):
            raise ValueError(f"article {self.id}: {len(self.authors)} authors but "
                             f"{len(self.affiliations)} affiliations")
        if any(c < 0 for c in self.citations_per_year.values()):
            raise ValueError(f"article {self.id}: negative citation count")
        if self.total_citations < sum(self.citations_per_year.values()):
            raise ValueError(f"article {self.id}: total_citations below the per-year sum")

    @property
    def first_affiliation(self) -> str | None:
        return self.affiliations[0][0] if self.affiliations else None

    @property
    def first_country(self) -> str | None:
        return self.affiliations[0][1] if self.affiliations else None

    @property
    def first_author(self) -> str | None:
        return self.authors[0] if self.authors else None


class Corpus:
    """Articles with a dense ``0..n-1`` index.

    References that do not resolve to an article of the corpus are kept and
    counted as external.
    """

    def __init__(self, articles: Iterable[Article], warnings: Sequence[str] = ()):
        self.articles: tuple[Article, ...] = tuple(articles)
        self.id_to_index: dict[str, int] = {}
        for i, art in enumerate(self.articles):
            if art.id in self.id_to_index:
                raise CorpusError(f"duplicate id {art.id!r}")
            self.id_to_index[art.id] = i
        self.warnings = list(warnings)

    def __len__(self) -> int:
        return len(self.articles)

    def __iter__(self):
        return iter(self.articles)

    def __getitem__(self, key) -> Article:
        if isinstance(key, str):
            return self.articles[self.id_to_index[key]]
        return self.articles[key]

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.articles]

    def internal_references(self) -> list[tuple[int, int]]:
        """(citing, cited) index pairs for references that resolve."""
        out = []
        for i, art in enumerate(self.articles):
            for ref in art.references:
                j = self.id_to_index.get(ref)
                if j is not None:
                    out.append((i, j))
        return out

    def external_references(self) -> list[tuple[str, str]]:
        return [(a.id, r) for a in self.articles for r in a.references if r not in self.id_to_index]

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.articles[i] for i in indices])


# ---------------------------------------------------------------------------
# ingestion


def _split_list(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(s.strip() for s in value.split(";") if s.strip())
    return tuple(str(v) for v in value)


def _parse_affiliations(value) -> list[tuple[str | None, str | None]]:
    if value is None:
        return []
    if isinstance(value, str):
        value = [s for s in value.split(";") if s.strip()]
    out = []
    for item in value:
        if isinstance(item, str):
            aff, _, country = item.strip().partition(":")
            out.append((aff or None, country or None))
        elif isinstance(item, Mapping):
            out.append((item.get("id"), item.get("country")))
        else:
            aff, country = (list(item) + [None, None])[:2]
            out.append((aff, country))
    return out


def _parse_citations(value) -> dict[int, int]:
    if not value:
        return {}
    if isinstance(value, str):
        value = value.strip()
        if value.startswith("{"):
            value = json.loads(value)
        else:
            value = dict(part.split(":") for part in value.split(";") if part.strip())
    return {int(k): int(v) for k, v in value.items()}


def article_from_record(rec: Mapping, warn: list[str] | None = None, where: str = "") -> Article:
    """Build an :class:`Article` from a loosely typed record.

    Missing optional fields are filled with empty defaults and reported in
    ``warn``; a record is never dropped for a missing optional field.
    """
    warn = warn if warn is not None else []
    if not rec.get("id"):
        raise CorpusError(f"{where}record without id")
    aid = str(rec["id"])
    for name in ("title", "abstract"):
        if not rec.get(name):
            warn.append(f"{where}article {aid}: missing {name}")
    authors = _split_list(rec.get("authors"))
    affs = _parse_affiliations(rec.get("affiliations"))
    if len(affs) != len(authors):
        if affs:
            warn.append(f"{where}article {aid}: affiliations not aligned to authors, padding")
        else:
            warn.append(f"{where}article {aid}: missing affiliations")
        affs = (affs + [(None, None)] * len(authors))[:len(authors)]
    cites = _parse_citations(rec.get("citations_per_year"))
    total = rec.get("total_citations")
    total = sum(cites.values()) if total in (None, "") else int(total)
    year = rec.get("year")
    if year in (None, ""):
        raise CorpusError(f"{where}article {aid}: missing year")
    try:
        return Article(
            id=aid,
            title=str(rec.get("title") or ""),
            abstract=str(rec.get("abstract") or ""),
            keywords=_split_list(rec.get("keywords")),
            authors=authors,
            affiliations=tuple(affs),
            journal=str(rec.get("journal") or ""),
            field_label=str(rec.get("field_label") or ""),
            year=int(year),
            subject_areas=_split_list(rec.get("subject_areas")),
            citations_per_year=cites,
            total_citations=total,
            references=_split_list(rec.get("references")),
        )
    except ValueError as exc:
        raise CorpusError(f"{where}{exc}") from exc


def _check_duplicates(records: list[tuple[int, Article]]) -> None:
    seen: dict[str, int] = {}
    for line, art in records:
        if art.id in seen:
            raise CorpusError(f"duplicate id {art.id!r} on lines {seen[art.id]} and {line}")
        seen[art.id] = line


def load_corpus(path, format: str = "jsonl") -> Corpus:
    """Read a corpus from JSONL, or from a directory with ``articles.csv`` and ``edges.csv``."""
    path = Path(path)
    warn: list[str] = []
    records: list[tuple[int, Article]] = []
    if format == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"{path}:{lineno}: parse error: {exc.msg}") from exc
                if not isinstance(rec, dict):
                    raise CorpusError(f"{path}:{lineno}: expected a JSON object")
                records.append((lineno, article_from_record(rec, warn, f"{path}:{lineno}: ")))
    elif format == "csv-pair":
        base = path if path.is_dir() else path.parent
        refs: dict[str, list[str]] = {}
        edges_file = base / "edges.csv"
        if edges_file.exists():
            with edges_file.open(encoding="utf-8", newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or not {"src", "dst"} <= set(reader.fieldnames):
                    raise CorpusError(f"{edges_file}:1: expected columns src,dst")
                for row in reader:
                    refs.setdefault(row["src"], []).append(row["dst"])
        with (base / "articles.csv").open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                lineno = reader.line_num
                rec = dict(row)
                rec["references"] = refs.get(rec.get("id", ""), []) + list(_split_list(rec.get("references")))
                records.append((lineno, article_from_record(rec, warn, f"{base / 'articles.csv'}:{lineno}: ")))
    else:
        raise ValueError(f"unknown corpus format {format!r}")
    _check_duplicates(records)
    for w in warn:
        log.warning(w)
    return Corpus([a for _, a in records], warn)


def article_to_record(art: Article) -> dict:
    return {
        "id": art.id,
        "title": art.title,
        "abstract": art.abstract,
        "keywords": list(art.keywords),
        "authors": list(art.authors),
        "affiliations": [list(a) for a in art.affiliations],
        "journal": art.journal,
        "field_label": art.field_label,
        "year": art.year,
        "subject_areas": list(art.subject_areas),
        "citations_per_year": {str(k): v for k, v in sorted(art.citations_per_year.items())},
        "total_citations": art.total_citations,
        "references": list(art.references),
    }


def save_corpus(corpus: Corpus, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for art in corpus:
            fh.write(json.dumps(article_to_record(art), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# text preprocessing

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_stemmer = PorterStemmer()


@dataclass(frozen=True)
class PreprocessConfig:
    stopwords: frozenset[str] = ENGLISH_STOPWORDS
    trademarks: tuple[str, ...] = ()
    # stem -> most frequent surface form, built corpus-wide
    stem_table: Mapping[str, str] = field(default_factory=dict)


def _surface_tokens(text: str, cfg: PreprocessConfig) -> list[str]:
    """Lowercase, strip trademarks, tokenize, drop stopwords, map digits to ``num``."""
    text = text.lower()
    for mark in cfg.trademarks:
        if mark:
            text = text.replace(mark.lower(), " ")
    out = []
    for tok in _TOKEN_RE.findall(text):
        if tok.isdigit():
            out.append(NUM_TOKEN)
        elif len(tok) > 1 and tok not in cfg.stopwords:
            out.append(tok)
    return out


def stem(token: str) -> str:
    return token if token == NUM_TOKEN else _stemmer.stem(token)


def _composite(article: Article, cfg: PreprocessConfig) -> list[str]:
    """Title three times, each keyword three times, abstract once."""
    title = _surface_tokens(article.title, cfg)
    tokens = title * 3
    for kw in article.keywords:
        tokens += _surface_tokens(kw, cfg) * 3
    tokens += _surface_tokens(article.abstract, cfg)
    return tokens


def build_stem_table(articles: Iterable[Article], cfg: PreprocessConfig | None = None) -> dict[str, str]:
    """Map each stem to its most frequent surface form (ties: lexicographically first)."""
    cfg = cfg or PreprocessConfig()
    counts: Counter[str] = Counter()
    for art in articles:
        counts.update(_composite(art, cfg))
    best: dict[str, tuple[int, str]] = {}
    for word, c in counts.items():
        s = stem(word)
        cur = best.get(s)
        if cur is None or c > cur[0] or (c == cur[0] and word < cur[1]):
            best[s] = (c, word)
    return {s: w for s, (_, w) in best.items()}


def make_preprocess_config(corpus: Iterable[Article], stopwords: Iterable[str] | None = None,
                           trademarks: Iterable[str] = ()) -> PreprocessConfig:
    base = PreprocessConfig(
        stopwords=frozenset(stopwords) if stopwords is not None else ENGLISH_STOPWORDS,
        trademarks=tuple(trademarks),
    )
    return PreprocessConfig(base.stopwords, base.trademarks, build_stem_table(corpus, base))


def normalize(text: str, cfg: PreprocessConfig) -> list[str]:
    """Token pipeline for a single text field."""
    return [cfg.stem_table.get(stem(t), t) for t in _surface_tokens(text, cfg)]


def preprocess(article: Article, cfg: PreprocessConfig) -> list[str]:
    return [cfg.stem_table.get(stem(t), t) for t in _composite(article, cfg)]


def preprocess_corpus(corpus: Iterable[Article], cfg: PreprocessConfig | None = None) -> list[list[str]]:
    articles = list(corpus)
    if cfg is None:
        cfg = make_preprocess_config(articles)
    return [preprocess(a, cfg) for a in articles]


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    document_frequency: np.ndarray
    n_docs: int

    @property
    def word_to_id(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)


def build_vocabulary(docs: Sequence[Sequence[str]], min_df: int = 5, max_df: float = 0.65) -> Vocabulary:
    """Keep tokens with ``min_df <= df <= max_df * n``; ids in lexicographic order."""
    if min_df < 1 or not 0 < max_df <= 1:
        raise ValueError("need min_df >= 1 and 0 < max_df <= 1")
    n = len(docs)
    df: Counter[str] = Counter()
    for doc in docs:
        df.update(set(doc))
    limit = max_df * n
    words = sorted(w for w, c in df.items() if min_df <= c <= limit)
    if not words:
        raise ValueError("empty vocabulary: no token satisfies the document-frequency bounds")
    return Vocabulary(tuple(words), np.array([df[w] for w in words], dtype=np.int64), n)


# ---------------------------------------------------------------------------
# citations


def cumulative_citations(article: Article, horizon: int) -> list[int | None]:
    """Cumulative counts after t = 1..10 years; ``None`` where not yet observable.

    Year t covers the publication year and the following t - 1 years.
    """
    out: list[int | None] = []
    for t in range(1, CITATION_HORIZON + 1):
        last = article.year + t - 1
        if last > horizon:
            out.append(None)
        else:
            out.append(sum(c for y, c in article.citations_per_year.items() if y <= last))
    return out


def cohort_growth_ratios(articles: Iterable[Article], horizon: int) -> dict[int, float]:
    """Mean of c(t) / c(t-1) over articles observed at t, skipping c(t-1) = 0."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for art in articles:
        cum = cumulative_citations(art, horizon)
        for t in range(2, CITATION_HORIZON + 1):
            prev, cur = cum[t - 2], cum[t - 1]
            if cur is None or not prev:
                continue
            sums[t] = sums.get(t, 0.0) + cur / prev
            counts[t] = counts.get(t, 0) + 1
    return {t: sums[t] / counts[t] for t in sorted(sums)}


def impute_cumulative_citations(article: Article, horizon: int,
                                cohort_ratios: Mapping[int, float]) -> np.ndarray:
    """Cumulative citations at t = 1..10 followed by the total (11 values).

    Unobservable years continue from the previous year times the cohort
    growth ratio, rounded half up.
    """
    cum = cumulative_citations(article, horizon)
    if cum[0] is None:
        return np.zeros(CITATION_HORIZON + 1, dtype=np.int64)
    out = np.zeros(CITATION_HORIZON + 1, dtype=np.int64)
    for t in range(1, CITATION_HORIZON + 1):
        if cum[t - 1] is not None:
            out[t - 1] = cum[t - 1]
            continue
        ratio = cohort_ratios.get(t)
        if ratio is None:
            log.warning("no cohort growth ratio for t=%d, using 1.0", t)
            ratio = 1.0
        out[t - 1] = math.floor(out[t - 2] * ratio + 0.5)
    out[-1] = article.total_citations
    return out


# ---------------------------------------------------------------------------
# features


def canonical_block(name: str) -> str:
    name = _BLOCK_ALIASES.get(name, name)
    if name not in FEATURE_BLOCKS:
        raise ValueError(f"unknown feature block {name!r}; expected one of {FEATURE_BLOCKS}")
    return name


@dataclass(frozen=True)
class FeatureConfig:
    top_n_affiliations: int = 1000
    top_n_authors: int = 1000
    horizon: int | None = None
    drop: frozenset[str] = frozenset()
    citation_transform: str = "log1p"

    def __post_init__(self):
        object.__setattr__(self, "drop", frozenset(canonical_block(b) for b in self.drop))
        if self.citation_transform not in ("log1p", "none"):
            raise ValueError(f"unknown citation transform {self.citation_transform!r}")


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    blocks: dict[str, tuple[int, int]]
    ids: tuple[str, ...]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def block(self, name: str) -> np.ndarray:
        lo, hi = self.blocks[canonical_block(name)]
        return self.values[:, lo:hi]

    def drop(self, *names: str) -> "FeatureMatrix":
        names = {canonical_block(n) for n in names}
        parts, blocks, ofs = [], {}, 0
        for name, (lo, hi) in self.blocks.items():
            if name in names:
                continue
            parts.append(self.values[:, lo:hi])
            blocks[name] = (ofs, ofs + hi - lo)
            ofs += hi - lo
        values = np.hstack(parts) if parts else np.zeros((len(self.ids), 0))
        return FeatureMatrix(values, blocks, self.ids)

    def rows(self, index: Sequence[int]) -> "FeatureMatrix":
        index = np.asarray(index)
        return FeatureMatrix(self.values[index], self.blocks, tuple(self.ids[i] for i in index))


def _one_hot_top(labels: Sequence[str | None], top_n: int) -> np.ndarray:
    counts = Counter(lab for lab in labels if lab is not None)
    top = [lab for lab, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]]
    col = {lab: i for i, lab in enumerate(top)}
    out = np.zeros((len(labels), len(top) + 1))
    for i, lab in enumerate(labels):
        out[i, col.get(lab, len(top))] = 1.0
    return out


def _dense(x, name: str, n: int) -> np.ndarray:
    arr = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != n:
        raise ValueError(f"dimension mismatch in block {name!r}: got shape {arr.shape}, expected {n} rows")
    return arr


def assemble_features(corpus: Corpus, text_embedding=None, topics=None,
                      cfg: FeatureConfig | None = None) -> FeatureMatrix:
    """Concatenate the feature blocks, row order equal to corpus order."""
    cfg = cfg or FeatureConfig()
    arts = list(corpus)
    n = len(arts)
    horizon = cfg.horizon if cfg.horizon is not None else max(a.year for a in arts)
    parts: list[tuple[str, np.ndarray]] = []
    for name in FEATURE_BLOCKS:
        if name in cfg.drop:
            continue
        if name == "affiliation":
            block = _one_hot_top([a.first_affiliation for a in arts], cfg.top_n_affiliations)
        elif name == "first-author":
            block = _one_hot_top([a.first_author for a in arts], cfg.top_n_authors)
        elif name == "year":
            years = np.array([a.year for a in arts], dtype=np.float64)
            sd = years.std()
            block = ((years - years.mean()) / sd if sd > 0 else np.zeros(n))[:, None]
        elif name == "subject-area":
            areas = sorted({s for a in arts for s in a.subject_areas})
            col = {s: i for i, s in enumerate(areas)}
            block = np.zeros((n, len(areas)))
            for i, a in enumerate(arts):
                for s in a.subject_areas:
                    block[i, col[s]] = 1.0
        elif name == "topic-distribution":
            if topics is None:
                raise ValueError("dimension mismatch in block 'topic-distribution': no topic matrix given")
            block = _dense(topics, name, n)
        elif name == "text-embedding":
            if text_embedding is None:
                raise ValueError("dimension mismatch in block 'text-embedding': no text embedding given")
            block = _dense(text_embedding, name, n)
        else:
            ratios = cohort_growth_ratios(arts, horizon)
            block = np.array([impute_cumulative_citations(a, horizon, ratios) for a in arts],
                             dtype=np.float64).reshape(n, CITATION_HORIZON + 1)
            if cfg.citation_transform == "log1p":
                block = np.log1p(block)
        parts.append((name, block))
    blocks, ofs = {}, 0
    for name, block in parts:
        blocks[name] = (ofs, ofs + block.shape[1])
        ofs += block.shape[1]
    values = np.hstack([b for _, b in parts]) if parts else np.zeros((n, 0))
    if not np.all(np.isfinite(values)):
        raise ValueError("feature matrix contains non-finite values")
    return FeatureMatrix(values, blocks, tuple(a.id for a in arts))
