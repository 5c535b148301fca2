import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relsem.corpus import (Article, Corpus, CorpusError, FeatureConfig, PreprocessConfig,
                           assemble_features, build_stem_table, build_vocabulary,
                           cohort_growth_ratios, cumulative_citations, impute_cumulative_citations,
                           load_corpus, make_preprocess_config, normalize, preprocess, save_corpus)
from relsem.synthetic import toy_corpus


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


def rec(i, refs=(), **kw):
    base = {"id": i, "title": f"title {i}", "abstract": "some text", "year": 2015, "references": list(refs)}
    base.update(kw)
    return base


class TestLoading:
    def test_cross_references(self, tmp_path):
        p = write_jsonl(tmp_path / "c.jsonl", [rec("A", ["B"]), rec("B", ["C", "X9"]), rec("C")])
        c = load_corpus(p)
        assert len(c) == 3
        assert c.internal_references() == [(0, 1), (1, 2)]
        assert c.external_references() == [("B", "X9")]

    def test_missing_abstract_is_warning(self, tmp_path):
        r = rec("A")
        del r["abstract"]
        c = load_corpus(write_jsonl(tmp_path / "c.jsonl", [r]))
        assert c[0].abstract == ""
        assert len(c.warnings) == 1 and "missing abstract" in c.warnings[0]

    def test_duplicate_id_names_both_lines(self, tmp_path):
        recs = [rec(f"X{i}") for i in range(9)]
        recs[3] = rec("A1")
        recs[8] = rec("A1")
        with pytest.raises(CorpusError, match="duplicate id 'A1' on lines 4 and 9"):
            load_corpus(write_jsonl(tmp_path / "c.jsonl", recs))

    def test_parse_error_has_line_number(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text(json.dumps(rec("A")) + "\n{broken\n")
        with pytest.raises(CorpusError, match=":2: parse error"):
            load_corpus(p)

    def test_csv_pair(self, tmp_path):
        (tmp_path / "articles.csv").write_text(
            "id,title,abstract,year,authors,affiliations\n"
            "A,Alpha,text,2010,u1;u2,f1:DE;f2:FR\nB,Beta,text,2011,u3,f3:US\n")
        (tmp_path / "edges.csv").write_text("src,dst\nB,A\n")
        c = load_corpus(tmp_path, "csv-pair")
        assert c.internal_references() == [(1, 0)]
        assert c["A"].affiliations == (("f1", "DE"), ("f2", "FR"))

    def test_save_load_round_trip(self, tmp_path):
        c = toy_corpus(20, seed=1)
        save_corpus(c, tmp_path / "c.jsonl")
        back = load_corpus(tmp_path / "c.jsonl")
        assert [a for a in back] == [a for a in c]


class TestArticle:
    def test_year_bounds(self):
        with pytest.raises(ValueError):
            Article(id="A", year=1850)

    def test_author_affiliation_alignment(self):
        with pytest.raises(ValueError):
            Article(id="A", authors=("a", "b"), affiliations=(("f", "DE"),))

    def test_total_below_per_year_sum(self):
        with pytest.raises(ValueError):
            Article(id="A", citations_per_year={2015: 3}, total_citations=2)

    def test_corpus_rejects_duplicate_ids(self):
        with pytest.raises(CorpusError):
            Corpus([Article(id="A"), Article(id="A")])


def art(title="", keywords=(), abstract="", i="A"):
    return Article(id=i, title=title, keywords=tuple(keywords), abstract=abstract)


class TestPreprocess:
    def test_reference_example(self):
        a = art("Citation Analysis", ["science"], "We study 5 journals.")
        other = art(abstract="journal journal journal", i="B")
        cfg = make_preprocess_config([a, other])
        assert preprocess(a, cfg) == (["citation", "analysis"] * 3 + ["science"] * 3
                                      + ["study", "num", "journal"])

    def test_stem_maps_to_most_frequent_surface(self):
        a = art("Citation Analysis", ["science"], "We study 5 journals.")
        other = art(abstract="journals journals", i="B")
        cfg = make_preprocess_config([a, other])
        assert preprocess(a, cfg)[-1] == "journals"

    def test_stem_table_tie_breaks_lexicographically(self):
        table = build_stem_table([art(abstract="journal journals")])
        assert table["journal"] == "journal"

    def test_all_stopword_abstract(self):
        a = art("Network Science", ["graphs"], "the and of which")
        cfg = make_preprocess_config([a])
        assert preprocess(a, cfg) == ["network", "science"] * 3 + ["graphs"] * 3

    def test_trademarks_removed(self):
        cfg = PreprocessConfig(trademarks=("Elsevier Ltd",))
        assert normalize("Copyright Elsevier Ltd results", cfg) == ["copyright", "results"]

    def test_empty_text(self):
        assert preprocess(art(), PreprocessConfig()) == []

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.sampled_from(["citing", "cited", "citation", "the", "2019", "networks", "network",
                                     "Journal", "of", "x", "analyses", "Analysis", "scientometrics"]),
                    max_size=12))
    def test_idempotent(self, words):
        text = " ".join(words)
        cfg = make_preprocess_config([art(abstract=text), art(abstract="network citation", i="B")])
        once = normalize(text, cfg)
        assert normalize(" ".join(once), cfg) == once
        assert all(t not in cfg.stopwords for t in once)

    @settings(max_examples=40, deadline=None)
    @given(st.text(alphabet="abc de1", max_size=30), st.text(alphabet="xyz q", max_size=30))
    def test_title_triplication(self, title, abstract):
        a = art(title, (), abstract)
        cfg = make_preprocess_config([a])
        toks = preprocess(a, cfg)
        title_toks = normalize(title, cfg)
        n = len(title_toks)
        assert toks[:3 * n] == title_toks * 3


class TestVocabulary:
    def test_min_df(self):
        docs = [["rare"]] * 4 + [["x"]] * 96
        assert "rare" not in build_vocabulary(docs, min_df=5, max_df=1.0).words

    def test_max_df(self):
        docs = [["common", f"w{i % 10}"] for i in range(70)] + [[f"w{i % 10}"] for i in range(30)]
        assert "common" not in build_vocabulary(docs, min_df=1, max_df=0.65).words

    def test_no_op_bounds_and_order(self):
        v = build_vocabulary([["b", "a"], ["c"]], min_df=1, max_df=1.0)
        assert v.words == ("a", "b", "c")
        assert v.word_to_id == {"a": 0, "b": 1, "c": 2}

    def test_empty(self):
        with pytest.raises(ValueError, match="empty vocabulary"):
            build_vocabulary([["a"]], min_df=2)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefgh"), max_size=6), min_size=1, max_size=30),
           st.integers(1, 4), st.floats(0.1, 1.0))
    def test_df_bounds_hold(self, docs, min_df, max_df):
        try:
            v = build_vocabulary(docs, min_df, max_df)
        except ValueError:
            return
        for w, df in zip(v.words, v.document_frequency):
            assert df == sum(w in d for d in docs)
            assert min_df <= df <= max_df * len(docs)


class TestCitations:
    def test_fully_observed_passes_through(self):
        a = Article(id="A", year=2000, citations_per_year={2000 + i: i for i in range(10)}, total_citations=50)
        out = impute_cumulative_citations(a, 2020, {})
        np.testing.assert_array_equal(out[:10], np.cumsum(range(10)))
        assert out[10] == 50

    def test_imputation_rule(self):
        a = Article(id="A", year=2017, citations_per_year={2017: 1, 2018: 1, 2019: 2}, total_citations=4)
        out = impute_cumulative_citations(a, 2019, {t: 1.5 for t in range(2, 11)})
        assert list(out[:3]) == [1, 2, 4]
        assert out[3] == 6
        assert out[4] == 9

    def test_rounds_half_up(self):
        a = Article(id="A", year=2019, citations_per_year={2019: 1}, total_citations=1)
        out = impute_cumulative_citations(a, 2019, {t: 2.5 for t in range(2, 11)})
        assert out[1] == 3

    def test_new_article_zero_vector(self):
        a = Article(id="A", year=2020)
        np.testing.assert_array_equal(impute_cumulative_citations(a, 2020, {}), np.zeros(11))

    def test_cumulative_window(self):
        a = Article(id="A", year=2018, citations_per_year={2018: 2, 2019: 3}, total_citations=5)
        assert cumulative_citations(a, 2019)[:3] == [2, 5, None]

    def test_cohort_ratios_skip_zero_denominator(self):
        arts = [Article(id="A", year=2018, citations_per_year={2018: 2, 2019: 3}, total_citations=5),
                Article(id="B", year=2018, citations_per_year={2019: 4}, total_citations=4)]
        assert cohort_growth_ratios(arts, 2019) == {2: 2.5}


class TestFeatures:
    def make(self, n=10):
        arts = [Article(id=f"A{i}", year=2010 + i % 5, authors=(f"u{i % 4}",),
                        affiliations=((f"f{i % 5}", "DE"),), subject_areas=(f"s{i % 5}",),
                        citations_per_year={2010 + i % 5: i}, total_citations=i) for i in range(n)]
        return Corpus(arts)

    def test_block_widths(self):
        c = self.make()
        rng = np.random.default_rng(0)
        fm = assemble_features(c, rng.normal(size=(10, 16)), rng.dirichlet(np.ones(20), 10),
                               FeatureConfig(top_n_affiliations=3, top_n_authors=3))
        assert fm.width == 3 + 1 + 4 + 1 + 5 + 20 + 16 + 11
        assert fm.drop("citations").width == fm.width - 11
        assert "text-embedding" not in fm.drop("text-embedding").blocks
        assert fm.ids == tuple(c.ids)

    def test_dimension_mismatch_names_block(self):
        with pytest.raises(ValueError, match="text-embedding"):
            assemble_features(self.make(), np.ones((9, 4)), np.ones((10, 2)))

    def test_drop_via_config(self):
        fm = assemble_features(self.make(), None, None,
                               FeatureConfig(drop=frozenset({"text", "topics", "citations-1..10"})))
        assert set(fm.blocks) == {"affiliation", "first-author", "year", "subject-area"}

    def test_unknown_block(self):
        with pytest.raises(ValueError):
            FeatureConfig(drop=frozenset({"gender"}))

    def test_permutation_equivariance(self):
        c = self.make()
        rng = np.random.default_rng(0)
        text = rng.normal(size=(10, 3))
        topics = rng.dirichlet(np.ones(4), 10)
        perm = rng.permutation(10)
        cfg = FeatureConfig(top_n_affiliations=10, top_n_authors=10)
        a = assemble_features(c, text, topics, cfg).values
        b = assemble_features(c.subset(perm), text[perm], topics[perm], cfg).values
        np.testing.assert_allclose(b, a[perm])
