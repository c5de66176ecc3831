"""Evaluation suite: repetition rates, Ent-n, Dist-n, BLEU-4, topic NLL.

Corpus layout for the repetition/diversity metrics: a corpus is a list of
stories, a story a list of sentences, a sentence a list of tokens.  Inter
repetition and Dist-n share one n-gram pool (per-sentence windows), so
dist_n == 1 - inter_repetition identically.  Ent-n follows the other
convention: each story is one token stream and n-grams containing a
punctuation token are discarded.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import PUNCT, SENT_END


def extract_ngrams(tokens, n: int, exclude_punct_crossing: bool = False) -> Counter:
    """Sliding-window n-gram multiset; short input yields an empty multiset."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = list(tokens)
    out = Counter()
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i:i + n])
        if exclude_punct_crossing and any(t in PUNCT for t in gram):
            continue
        out[gram] += 1
    return out


def split_sentences(tokens):
    """Token stream -> sentences (terminator kept; trailing fragment kept)."""
    sents, cur = [], []
    for t in tokens:
        cur.append(t)
        if t in SENT_END:
            sents.append(cur)
            cur = []
    if cur:
        sents.append(cur)
    return sents


def _sentence_pool(corpus, n: int) -> Counter:
    pool = Counter()
    for story in corpus:
        for sent in story:
            pool.update(extract_ngrams(sent, n))
    return pool


def inter_repetition(corpus, n: int) -> float:
    """1 - distinct/total over all sentences' n-grams; 0 on an empty pool."""
    pool = _sentence_pool(corpus, n)
    total = sum(pool.values())
    if total == 0:
        return 0.0
    return 1.0 - len(pool) / total


def dist_n(corpus, n: int) -> float:
    """Distinct-to-total n-gram ratio over the same pool as inter_repetition."""
    pool = _sentence_pool(corpus, n)
    total = sum(pool.values())
    if total == 0:
        return 0.0
    return len(pool) / total


def _overlap(a: Counter, b: Counter) -> int:
    return sum(min(c, b[g]) for g, c in a.items() if g in b)


def intra_repetition(corpus, n: int) -> float:
    """Within-story repetition of sentence j against each earlier sentence.

    Per story: term_j = sum_i<j |f(s_j) /\\ f(s_i)| / ((j-1) * |f(s_j)|) with
    term_1 := 0 and zero-denominator terms contributing 0; the story score
    averages terms over its own sentence count, the corpus averages stories.
    """
    if not corpus:
        return 0.0
    scores = []
    for story in corpus:
        grams = [extract_ngrams(s, n) for s in story]
        m = len(story)
        if m == 0:
            scores.append(0.0)
            continue
        terms = [0.0]
        for j in range(1, m):
            total_j = sum(grams[j].values())
            denom = j * total_j
            if denom == 0:
                terms.append(0.0)
                continue
            overlap = sum(_overlap(grams[j], grams[i]) for i in range(j))
            terms.append(overlap / denom)
        scores.append(sum(terms) / m)
    return float(np.mean(scores))


def ent_n(corpus, n: int) -> float:
    """Shannon entropy (natural log) of the empirical n-gram distribution.

    Each story is one token stream; n-grams containing punctuation are
    removed before counting.
    """
    pool = Counter()
    for story in corpus:
        stream = [t for sent in story for t in sent]
        pool.update(extract_ngrams(stream, n, exclude_punct_crossing=True))
    total = sum(pool.values())
    if total == 0:
        return 0.0
    return -sum((c / total) * math.log(c / total) for c in pool.values()) + 0.0


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu4(candidates, references) -> float:
    """Corpus BLEU up to 4-grams with brevity penalty.

    references[i] may be one token list or a list of alternatives.  Orders
    with a zero match count are smoothed as (num+1)/(den+1); orders with no
    candidate n-grams at all contribute a neutral precision of 1.
    """
    if not candidates or len(candidates) != len(references):
        raise ValueError("need equal-length nonempty candidate/reference lists")
    refs = []
    for r in references:
        refs.append([list(r)] if r and isinstance(r[0], str) else [list(x) for x in r])
    cand_len = sum(len(c) for c in candidates)
    if cand_len == 0:
        raise ValueError("empty candidate corpus")
    ref_len = 0
    for c, rs in zip(candidates, refs):
        ref_len += min((len(x) for x in rs), key=lambda l: (abs(l - len(c)), l))
    log_p = 0.0
    for n in range(1, 5):
        num = den = 0
        for c, rs in zip(candidates, refs):
            cg = extract_ngrams(c, n)
            den += sum(cg.values())
            if not cg:
                continue
            best = Counter()
            for r in rs:
                rg = extract_ngrams(r, n)
                for g, cnt in rg.items():
                    if cnt > best[g]:
                        best[g] = cnt
            num += sum(min(cnt, best[g]) for g, cnt in cg.items())
        if den == 0:
            p = 1.0
        elif num == 0:
            p = (num + 1) / (den + 1)
        else:
            p = num / den
        log_p += math.log(p) / 4.0
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# Topic classifier indicator
# ---------------------------------------------------------------------------


@dataclass
class TopicClassifier:
    """Bag-of-words softmax regression over length-normalized counts."""

    token_index: dict
    topics: list
    w: np.ndarray
    b: np.ndarray

    def _featurize(self, tokens) -> np.ndarray:
        x = np.zeros(len(self.token_index))
        for t in tokens:
            i = self.token_index.get(t)
            if i is not None:
                x[i] += 1.0
        if tokens:
            x /= len(tokens)
        return x

    def predict_log_proba(self, tokens) -> np.ndarray:
        z = self._featurize(tokens) @ self.w + self.b
        z = z - z.max()
        return z - math.log(np.exp(z).sum())


def train_topic_classifier(corpus, iters: int = 300, lr: float = 2.0) -> TopicClassifier:
    """Full-batch MLE from zero init (convex, so deterministic without a seed).

    corpus: iterable of (tokens, topic) pairs with at least 2 distinct topics.
    """
    corpus = list(corpus)
    topics = sorted({t for _, t in corpus})
    if len(topics) < 2:
        raise ValueError("topic classifier needs at least 2 topics")
    vocab = sorted({w for tokens, _ in corpus for w in tokens})
    token_index = {w: i for i, w in enumerate(vocab)}
    clf = TopicClassifier(token_index=token_index, topics=topics,
                          w=np.zeros((len(vocab), len(topics))),
                          b=np.zeros(len(topics)))
    x = np.stack([clf._featurize(tokens) for tokens, _ in corpus])
    t_idx = {t: i for i, t in enumerate(topics)}
    y = np.zeros((len(corpus), len(topics)))
    for r, (_, t) in enumerate(corpus):
        y[r, t_idx[t]] = 1.0
    n = len(corpus)
    for _ in range(iters):
        z = x @ clf.w + clf.b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - y) / n
        clf.w -= lr * (x.T @ d)
        clf.b -= lr * d.sum(axis=0)
    return clf


def topic_nll(clf: TopicClassifier, stories, true_topic: str) -> float:
    """Mean negative log posterior of the true topic; lower = more on-topic."""
    if true_topic not in clf.topics:
        raise ValueError(f"unknown topic {true_topic!r}")
    j = clf.topics.index(true_topic)
    if not stories:
        raise ValueError("no stories to score")
    return float(np.mean([-clf.predict_log_proba(s)[j] for s in stories]))


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    inter_rep: dict
    intra_rep: dict
    ent: dict
    dist: dict
    bleu4: float = None
    topic_nll: float = None

    def as_dict(self) -> dict:
        out = {}
        for n in sorted(self.inter_rep):
            out[f"inter_rep_{n}"] = self.inter_rep[n]
            out[f"intra_rep_{n}"] = self.intra_rep[n]
            out[f"ent_{n}"] = self.ent[n]
            out[f"dist_{n}"] = self.dist[n]
        if self.bleu4 is not None:
            out["bleu4"] = self.bleu4
        if self.topic_nll is not None:
            out["topic_nll"] = self.topic_nll
        return out


def compute_report(token_streams, ns=(1, 2, 3, 4), candidates=None,
                   references=None, clf=None, story_topics=None) -> MetricsReport:
    """Metrics over generated stories given as flat token streams."""
    corpus = [split_sentences(s) for s in token_streams]
    rep = MetricsReport(
        inter_rep={n: inter_repetition(corpus, n) for n in ns},
        intra_rep={n: intra_repetition(corpus, n) for n in ns},
        ent={n: ent_n(corpus, n) for n in ns},
        dist={n: dist_n(corpus, n) for n in ns})
    if candidates is not None and references is not None:
        rep.bleu4 = bleu4(candidates, references)
    if clf is not None and story_topics is not None:
        vals = [-clf.predict_log_proba(s)[clf.topics.index(t)]
                for s, t in zip(token_streams, story_topics) if t in clf.topics]
        if vals:
            rep.topic_nll = float(np.mean(vals))
    return rep
