"""Shared helpers: finite differences, tiny models, brute-force decode.

Finite-difference checks use a floored relative error.  Central differences
at eps=1e-5 carry roughly 1e-10 of absolute noise, which dominates the plain
ratio |a-b|/|b| whenever the true gradient entry is near zero; the floor
keeps the comparison at the intended 1e-4 relative strength for entries of
typical magnitude without rejecting noise-dominated tiny ones.
"""

import numpy as np

from fewstory import autodiff as ad
from fewstory.data import StoryCase, Vocabulary
from fewstory.seqmodel import (ModelConfig, ModelParams, decode_step,
                               encode_photo_stream, init_decoder)
from fewstory.util import fork_rng


def rel_err(a, b, floor: float = 1e-3) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def fd_gradient(f, arrays, eps: float = 1e-5):
    """Central differences of scalar f(arrays) w.r.t. every array entry."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(arrays)
            flat[i] = orig - eps
            lo = f(arrays)
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def tiny_model(vocab: int = 12, emb: int = 6, hidden: int = 8,
               feat: int = 4, seed: int = 0, scale: float = 0.3):
    cfg = ModelConfig(vocab_size=vocab, emb_dim=emb, hidden=hidden,
                      feature_dim=feat, dropout=0.0)
    params = ModelParams.init(cfg, fork_rng(seed, "tiny"), scale=scale)
    return cfg, params


def random_case(rng, cfg: ModelConfig, stream_len: int = 3,
                n_tokens: int = 5, topic: str = "t0", cid: str = "c0"):
    """Story case with random features and eos-terminated content ids."""
    feats = rng.standard_normal((stream_len, cfg.feature_dim))
    # text is a placeholder: these tests drive the model through token_ids
    case = StoryCase(id=cid, topic=topic, features=feats, text="x")
    ids = list(rng.integers(4, cfg.vocab_size, size=n_tokens))
    case.token_ids = np.asarray(ids + [Vocabulary.EOS], dtype=np.int64)
    return case


def exhaustive_best(params: ModelParams, features, max_len: int = 4):
    """Brute-force argmax over the decoder's full hypothesis space.

    Enumerates every sequence that ends with eos or reaches max_len,
    scoring each step with the full-vocabulary log-softmax restricted to
    {eos} + content-id transitions.  Returns (log_prob, tokens).
    """
    enc = encode_photo_stream(params, features)
    h0 = init_decoder(params, enc.final)
    allowed = [Vocabulary.EOS] + list(range(len(Vocabulary.SPECIALS),
                                            params.config.vocab_size))
    best = None

    def log_rows(logits):
        x = logits.data
        m = x.max()
        return x - (m + np.log(np.exp(x - m).sum()))

    def rec(h, prev, tokens, lp):
        nonlocal best
        if (tokens and tokens[-1] == Vocabulary.EOS) or len(tokens) == max_len:
            if best is None or lp > best[0]:
                best = (lp, list(tokens))
            return
        hn, logits = decode_step(params, h, prev, enc.states)
        row = log_rows(logits)
        for t in allowed:
            rec(hn, t, tokens + [t], lp + row[t])

    with ad.no_grad():
        rec(h0, Vocabulary.BOS, [], 0.0)
    return best


WORDS = ["a", "b", "c", "d", "e"]
MARKS = [".", ",", "!", "?"]


def random_stream(rng, min_len: int = 5, max_len: int = 30):
    """Token stream mixing a small vocabulary with punctuation."""
    n = int(rng.integers(min_len, max_len + 1))
    out = []
    for _ in range(n):
        if rng.random() < 0.25:
            out.append(MARKS[rng.integers(len(MARKS))])
        else:
            out.append(WORDS[rng.integers(len(WORDS))])
    return out


def random_corpus(rng, max_stories: int = 6):
    return [random_stream(rng) for _ in range(int(rng.integers(2, max_stories + 1)))]
