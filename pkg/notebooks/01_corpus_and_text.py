# %% [markdown]
# # Corpus, preprocessing and semantic embeddings
#
# A synthetic corpus stands in for a bibliographic export. We normalise the
# text, build a vocabulary, fit LDA and PV-DM, and look at which topics each
# field leans on.

# %%
import numpy as np

from relsem.corpus import build_vocabulary, make_preprocess_config, preprocess_corpus
from relsem.synthetic import toy_corpus
from relsem.textembed import build_dtm, lda_doc_topics, lda_fit, pvdm_fit, topic_relative_importance

corpus = toy_corpus(160, seed=0)
print(len(corpus), "articles;", len(corpus.internal_references()), "internal citations")
print(corpus[0].title, "|", corpus[0].journal, corpus[0].year)

# %% [markdown]
# Titles and keywords are repeated three times before the abstract, numbers
# become `num`, and stems map back to their most frequent surface form.

# %%
cfg = make_preprocess_config(corpus)
docs = preprocess_corpus(corpus, cfg)
print(docs[0][:15])
vocab = build_vocabulary(docs, min_df=2, max_df=0.65)
print("vocabulary size", len(vocab.words))

# %%
counts = build_dtm(docs, vocab, "count")
model = lda_fit(counts, K=5, iterations=200, burn_in=50, seed=0)
for k, words in enumerate(model.top_words(vocab.words, 6)):
    print(k, " ".join(words))

# %% [markdown]
# Relative importance above 1 means a field uses a topic more than the corpus
# average.

# %%
theta = lda_doc_topics(model, corpus.ids)
print(topic_relative_importance(theta.values, [a.field_label for a in corpus]).round(2))

# %%
vectors = pvdm_fit(docs, corpus.ids, dim=16, epochs=10, seed=0)
unit = vectors.values / np.linalg.norm(vectors.values, axis=1, keepdims=True)
print("mean pairwise cosine", round(float((unit @ unit.T).mean()), 3))
