"""Dataset ingestion, vocabulary, topic splits, and synthetic corpora.

The on-disk format is line-delimited JSON: a header line carrying
schema_version / feature_dim / stream_len, then one record per story with
id, topic, features (stream_len x feature_dim floats) and raw text.
Floats round-trip exactly (json uses repr), so write-then-read is
bit-stable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .util import fork_rng

SCHEMA_VERSION = 1

PUNCT = {".", ",", "!", "?", ";", ":"}
SENT_END = {".", "!", "?"}

_TOKEN_RE = re.compile(r"[^\s.,!?;:]+|[.,!?;:]")


def tokenize(text: str):
    """Lowercase, whitespace split, punctuation as standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class StoryCase:
    """One photo-stream/story pair.

    ``token_ids`` is filled in by apply_vocab once a vocabulary exists; it
    ends with the end-of-story id.
    """

    id: str
    topic: str
    features: np.ndarray
    text: str
    words: list = field(default_factory=list)
    token_ids: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"case {self.id}: features must be [L, feature_dim], L >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"case {self.id}: non-finite feature entries")
        if not self.words:
            self.words = tokenize(self.text)
        if not self.words:
            raise ValueError(f"case {self.id}: empty story text")


@dataclass
class Vocabulary:
    """Token/id bijection with fixed special ids."""

    token_to_id: dict
    id_to_token: list
    min_freq: int = 1

    PAD = 0
    BOS = 1
    EOS = 2
    UNK = 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, words):
        unk = self.UNK
        t2i = self.token_to_id
        return [t2i.get(w, unk) for w in words]

    def decode(self, ids, skip_special: bool = True):
        out = []
        for i in ids:
            if skip_special and i < len(self.SPECIALS):
                continue
            out.append(self.id_to_token[i])
        return out


def build_vocab(cases, min_freq: int = 1) -> Vocabulary:
    """Ids by descending frequency (ties lexicographic); rare tokens -> unk."""
    if not cases:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    freq = {}
    for case in cases:
        for w in case.words:
            freq[w] = freq.get(w, 0) + 1
    kept = sorted((w for w, c in freq.items() if c >= min_freq),
                  key=lambda w: (-freq[w], w))
    id_to_token = list(Vocabulary.SPECIALS) + kept
    token_to_id = {w: i for i, w in enumerate(id_to_token) if i >= len(Vocabulary.SPECIALS)}
    return Vocabulary(token_to_id=token_to_id, id_to_token=id_to_token, min_freq=min_freq)


def apply_vocab(cases, vocab: Vocabulary):
    """Assign token_ids (eos-terminated) to every case, in place."""
    for case in cases:
        ids = vocab.encode(case.words) + [Vocabulary.EOS]
        case.token_ids = np.asarray(ids, dtype=np.int64)
    return cases


def split_topics(cases, n_train_topics: int):
    """Topics by story count descending (ties lexicographic): top n train, rest test."""
    counts = {}
    for case in cases:
        counts[case.topic] = counts.get(case.topic, 0) + 1
    topics = sorted(counts, key=lambda t: (-counts[t], t))
    if len(topics) < n_train_topics + 1:
        raise ValueError(
            f"need at least {n_train_topics + 1} topics, have {len(topics)}")
    return topics[:n_train_topics], topics[n_train_topics:]


def topic_pool(cases):
    """Topic -> list of cases, insertion-ordered."""
    pool = {}
    for case in cases:
        pool.setdefault(case.topic, []).append(case)
    return pool


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def dataset_header(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: line 1: invalid header: {e}") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    return header


def load_dataset(path, min_tokens: int = 10, max_tokens: int = 120):
    """Parse a dataset file, dropping stories outside the token-length bounds.

    Structural problems (bad JSON, wrong feature shape) are errors naming the
    offending line; length bounds are a filter, not an error.
    """
    header = dataset_header(path)
    feature_dim = int(header["feature_dim"])
    stream_len = int(header["stream_len"])
    cases = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if lineno == 1 or not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: invalid record: {e}") from None
            try:
                rid = rec["id"]
                features = np.asarray(rec["features"], dtype=np.float64)
                case = StoryCase(id=rid, topic=rec["topic"], features=features,
                                 text=rec["text"])
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from None
            if case.features.shape != (stream_len, feature_dim):
                raise ValueError(
                    f"{path}: line {lineno}: record {rid}: features shape "
                    f"{case.features.shape} != ({stream_len}, {feature_dim})")
            if not (min_tokens <= len(case.words) <= max_tokens):
                continue
            cases.append(case)
    return cases


def write_dataset(path, cases, feature_dim: int, stream_len: int):
    with open(path, "w", encoding="utf-8") as f:
        header = {"schema_version": SCHEMA_VERSION, "feature_dim": int(feature_dim),
                  "stream_len": int(stream_len)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for case in cases:
            rec = {"id": case.id, "topic": case.topic,
                   "features": [[float(x) for x in row] for row in case.features],
                   "text": case.text}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Synthetic topic-structured corpus
# ---------------------------------------------------------------------------

BACKGROUND_WORDS = (
    "the a we they it was were had saw went got very so then and to at of "
    "day people place time fun").split()

KEYWORD_POOL = (
    "beach waves sand castle bride groom vows cake trail summit ridge tent "
    "candles balloons presents confetti pumpkin costume candy ghost turkey "
    "feast parade fireworks stadium goal crowd cheer museum statue garden "
    "fountain market stall spices boat harbor island lighthouse snow sled "
    "mitten cocoa puppy leash park frisbee guitar stage chorus drums").split()

# Sentence skeletons; None slots are filled by keyword/background sampling.
TEMPLATES = (
    ("the", None, "was", "very", None, "."),
    ("we", "saw", "the", None, "and", "the", None, "."),
    ("it", "was", "a", None, None, "day", "."),
    ("they", "had", None, "and", None, "at", "the", None, "."),
    ("we", "went", "to", "the", None, "for", "the", None, "."),
    ("the", None, "and", "the", None, "were", "at", "the", None, "."),
)


@dataclass
class SyntheticTopicSpec:
    """Recipe for one synthetic topic.

    Keywords are emitted in template slots with probability keyword_prob
    (> background share); photo features are Gaussian around a topic-specific
    signature vector.
    """

    topic: str
    keywords: list
    background: list
    templates: tuple
    feature_mean: np.ndarray
    noise_scale: float = 0.3
    keyword_prob: float = 0.7

    def __post_init__(self):
        if not self.keywords:
            raise ValueError(f"topic {self.topic}: empty keyword set")
        if not 0.0 < self.keyword_prob <= 1.0:
            raise ValueError(f"topic {self.topic}: keyword_prob out of range")
        share = (1.0 - self.keyword_prob) / max(len(self.background), 1)
        if self.keyword_prob / len(self.keywords) <= share:
            raise ValueError(f"topic {self.topic}: keyword emission not elevated")


def make_topic_specs(n_topics: int, feature_dim: int, seed: int,
                     keywords_per_topic: int = 3,
                     noise_scale: float = 0.3,
                     keyword_prob: float = 0.7) -> list:
    """Disjoint keyword sets per topic, shared background, distinct signatures."""
    if n_topics * keywords_per_topic > len(KEYWORD_POOL):
        raise ValueError("keyword pool too small for requested topics")
    rng = fork_rng(seed, "topic-specs")
    specs = []
    for t in range(n_topics):
        kws = KEYWORD_POOL[t * keywords_per_topic:(t + 1) * keywords_per_topic]
        mean = rng.normal(0.0, 1.0, feature_dim)
        specs.append(SyntheticTopicSpec(
            topic=f"topic{t:02d}", keywords=list(kws),
            background=list(BACKGROUND_WORDS), templates=TEMPLATES,
            feature_mean=mean, noise_scale=noise_scale,
            keyword_prob=keyword_prob))
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            if np.allclose(specs[i].feature_mean, specs[j].feature_mean):
                raise ValueError("degenerate topic signatures")
    return specs


def _fill_template(spec: SyntheticTopicSpec, rng) -> list:
    tpl = spec.templates[rng.integers(len(spec.templates))]
    words = []
    for slot in tpl:
        if slot is not None:
            words.append(slot)
        elif rng.random() < spec.keyword_prob:
            words.append(spec.keywords[rng.integers(len(spec.keywords))])
        else:
            words.append(spec.background[rng.integers(len(spec.background))])
    return words


def synth_generate(specs, stories_per_topic: int, L: int = 5,
                   feature_dim: int = None, seed: int = 0,
                   sentences_per_story: int = 5):
    """Deterministic synthetic corpus: requested counts honored exactly."""
    if len(specs) < 2:
        raise ValueError("need at least 2 topic specs")
    cases = []
    for spec in specs:
        if feature_dim is not None and spec.feature_mean.shape != (feature_dim,):
            raise ValueError(f"topic {spec.topic}: feature_mean dim mismatch")
        rng = fork_rng(seed, f"synth:{spec.topic}")
        for k in range(stories_per_topic):
            feats = spec.feature_mean + spec.noise_scale * rng.normal(
                0.0, 1.0, (L, spec.feature_mean.shape[0]))
            words = []
            for _ in range(sentences_per_story):
                words.extend(_fill_template(spec, rng))
            cases.append(StoryCase(id=f"{spec.topic}-{k:03d}", topic=spec.topic,
                                   features=feats, text=" ".join(words)))
    return cases
