"""Synthetic long documents for desk-scale streaming experiments.

Every document mixes a shared Zipfian lexicon of lowercase pseudo-words with
material that only that document uses: a skew toward its own favourite
words, and a cast of capitalized entity names, each tied to a fixed
epithet ("Qorvane the amber"). Entities recur throughout the document, often
farther apart than a short attention window, so a memory that accumulates
over the document can predict them where truncated context cannot.
"""
from __future__ import annotations

import string

import numpy as np

VOWELS = np.array(list("aeiou"))
CONSONANTS = np.array([c for c in string.ascii_lowercase if c not in "aeiou"])


def _pseudo_word(rng, lo, hi):
    n = int(rng.integers(lo, hi + 1))
    start_vowel = rng.random() < 0.3
    chars = [
        (rng.choice(VOWELS) if (k % 2 == 0) == start_vowel else rng.choice(CONSONANTS))
        for k in range(n)
    ]
    return "".join(chars)


def make_lexicon(seed=0, size=400):
    rng = np.random.default_rng(10_000 + seed)
    words = []
    seen = set()
    while len(words) < size:
        w = _pseudo_word(rng, 2, 7)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_document(rng, lexicon, doc_len, vocab_skew=1.1, n_entities=16, min_recur=20,
                  topic_words=40, topic_boost=8.0):
    """One document of exactly ``doc_len`` ASCII bytes."""
    V = len(lexicon)
    base = 1.0 / np.arange(1, V + 1) ** vocab_skew
    weights = base.copy()
    topic = rng.choice(V, size=min(topic_words, V), replace=False)
    weights[topic] *= topic_boost
    weights /= weights.sum()

    entities = []
    taken = set(lexicon)
    while len(entities) < n_entities:
        name = _pseudo_word(rng, 5, 9).capitalize()
        if name.lower() not in taken:
            taken.add(name.lower())
            entities.append(name)
    epithets = rng.choice(V, size=n_entities)
    mention = [f"{e} the {lexicon[w]}" for e, w in zip(entities, epithets)]

    # mentions are placed among the base words up front, all inside the first
    # 90% of the expected length, so truncation never drops one
    base_len = float(np.sum(weights * (np.array([len(w) for w in lexicon]) + 1)))
    mention_len = float(np.mean([len(x) + 1 for x in mention]))
    n_mentions = min_recur * n_entities
    n_base = int((doc_len - n_mentions * mention_len) / base_len)
    if n_base < n_mentions:
        raise ValueError(f"doc_len={doc_len} is too short for {n_entities} entities x {min_recur} mentions")
    schedule = np.concatenate([np.arange(n_entities)] * min_recur)
    rng.shuffle(schedule)
    slots = np.sort(rng.choice(int(0.9 * n_base), size=n_mentions, replace=False))

    parts = []
    size = 0
    k = 0
    sent_left = int(rng.integers(6, 15))
    word_idx = 0
    capital = True
    while size < doc_len:
        if k < n_mentions and word_idx >= slots[k]:
            w = mention[schedule[k]]
            k += 1
        else:
            w = lexicon[rng.choice(V, p=weights)]
            word_idx += 1
            if capital:
                w = w.capitalize()
        capital = False
        sent_left -= 1
        if sent_left == 0:
            sep = "." + ("\n" if rng.random() < 0.2 else " ")
            sent_left = int(rng.integers(6, 15))
            capital = True
        else:
            sep = " "
        parts.append(w + sep)
        size += len(w) + len(sep)
    text = "".join(parts)[:doc_len]
    return text.encode("ascii"), entities


def make_synthetic_corpus(seed=0, n_docs=8, doc_len=16384, vocab_skew=1.1, n_entities=16,
                          min_recur=20, lexicon_seed=0):
    """``n_docs`` byte documents; the lexicon depends only on ``lexicon_seed``.

    Returns a list of ``bytes``. Every entity of a document appears at least
    ``min_recur`` times; ``doc_len`` must leave room for the mentions
    (roughly ``doc_len >= 30 * min_recur * n_entities``); otherwise ``ValueError``.
    """
    lexicon = make_lexicon(lexicon_seed)
    rng = np.random.default_rng(seed)
    return [make_document(rng, lexicon, doc_len, vocab_skew, n_entities, min_recur)[0] for _ in range(n_docs)]


def corpus_entities(seed=0, n_docs=8, doc_len=16384, vocab_skew=1.1, n_entities=16, min_recur=20,
                    lexicon_seed=0):
    """Entity names per document, regenerated with the same arguments as the corpus."""
    lexicon = make_lexicon(lexicon_seed)
    rng = np.random.default_rng(seed)
    return [make_document(rng, lexicon, doc_len, vocab_skew, n_entities, min_recur)[1] for _ in range(n_docs)]
