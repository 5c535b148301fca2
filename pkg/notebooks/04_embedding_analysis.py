# %% [markdown]
# # Reading structure out of embeddings
#
# Group similarities, embedding norms against citations, and projection onto
# an axis spanned by two journals.

# %%
import numpy as np

from relsem.analysis import (aggregate_embedding, collaboration_class, frobenius_by_citation_group,
                             group_mean_cosine, groups_from_labels, pivot_axis_projection)
from relsem.corpus import build_vocabulary, make_preprocess_config, preprocess_corpus
from relsem.synthetic import toy_corpus
from relsem.textembed import pvdm_fit

corpus = toy_corpus(200, seed=2)
docs = preprocess_corpus(corpus, make_preprocess_config(corpus))
E = pvdm_fit(docs, corpus.ids, dim=16, epochs=15, seed=0)

# %%
journals = groups_from_labels([a.journal for a in corpus])
print(group_mean_cosine(E, journals).round(3))

# %%
classes = [collaboration_class(a) for a in corpus]
print({c: classes.count(c) for c in sorted(set(classes))})
print(group_mean_cosine(E, groups_from_labels(classes)).round(3))

# %%
print(frobenius_by_citation_group(E, [a.total_citations for a in corpus]))

# %% [markdown]
# Positive values lean towards the first pivot journal.

# %%
by_journal = aggregate_embedding(E, [a.journal for a in corpus])
print(pivot_axis_projection(by_journal, "journal_of_informetrics", "isis").round(3))
