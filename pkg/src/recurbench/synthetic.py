"""Synthetic corpora with known dependency structure."""
import numpy as np


def pattern_corpus(n_docs, doc_len, pattern=("a", "b")):
    """Documents repeating a fixed token pattern; perfectly predictable after one period."""
    return [" ".join(pattern[i % len(pattern)] for i in range(doc_len)) for _ in range(n_docs)]


def topic_corpus(n_docs, doc_len, rng, alphabet=48, topic_size=12):
    """Each document draws its tokens uniformly from its own random subset of the alphabet.

    Every additional token of context narrows down the document's subset, so
    models that see further back predict better.
    """
    words = [f"w{i}" for i in range(alphabet)]
    docs = []
    for _ in range(n_docs):
        topic = rng.choice(alphabet, size=topic_size, replace=False)
        docs.append(" ".join(words[i] for i in rng.choice(topic, size=doc_len)))
    return docs

