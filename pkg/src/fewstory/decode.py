"""Story generation: greedy search, beam search, repeated-sentence removal.

Token rules shared by both decoders: pad/bos/unk are never emitted, and
score ties are broken toward the lowest-id non-end token (the end token wins
only when it is the strict argmax).  Beam search accumulates unnormalized
log probability (length normalization behind a default-off flag), retires
finished hypotheses, and keeps the greedy path as a standing candidate, so
its result never scores below greedy's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import SENT_END, Vocabulary
from .seqmodel import (ModelParams, Prototype, decode_step_batch,
                       encode_photo_batch, init_state, prototype_batch)


@dataclass
class Hypothesis:
    tokens: list
    log_prob: float
    state: np.ndarray
    finished: bool


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _allowed_ids(vocab_size: int) -> np.ndarray:
    return np.array([Vocabulary.EOS] + list(range(4, vocab_size)), dtype=np.int64)


def _token_key(t: int):
    # end token loses ties against any regular token, then lowest id wins
    return (t == Vocabulary.EOS, t)


def _lex_key(tokens):
    return tuple(_token_key(t) for t in tokens)


def _score(hyp: Hypothesis, length_norm: bool) -> float:
    if length_norm and hyp.tokens:
        return hyp.log_prob / len(hyp.tokens)
    return hyp.log_prob


def _best(pool, length_norm: bool) -> Hypothesis:
    return min(pool, key=lambda hyp: (-_score(hyp, length_norm), _lex_key(hyp.tokens)))


def _prepare(params: ModelParams, features, proto):
    feats = np.asarray(features, dtype=np.float64)
    enc_states, v_final = encode_photo_batch(params, feats[None, :, :])
    vec = None
    if proto is not None:
        vec = proto.vector if isinstance(proto, Prototype) else proto
        vec = vec.reshape(1, vec.data.shape[-1])
    h0 = init_state(params, v_final, vec)
    return enc_states, h0


def greedy_decode_hyp(params: ModelParams, features, proto=None,
                      max_len: int = 40) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    allowed = _allowed_ids(params.config.vocab_size)
    with ad.no_grad():
        enc_states, h = _prepare(params, features, proto)
        tokens, lp = [], 0.0
        y = Vocabulary.BOS
        for _ in range(max_len):
            h, logits, _ = decode_step_batch(params, h, np.array([y]), enc_states)
            row = _log_softmax(logits.data)[0]
            t = min(allowed, key=lambda a: (-row[a],) + _token_key(int(a)))
            t = int(t)
            tokens.append(t)
            lp += float(row[t])
            if t == Vocabulary.EOS:
                return Hypothesis(tokens, lp, h.data[0].copy(), True)
            y = t
    return Hypothesis(tokens, lp, h.data[0].copy(), False)


def greedy_decode(params: ModelParams, features, proto=None, max_len: int = 40):
    """Argmax decoding; stops at the end token or max_len."""
    return greedy_decode_hyp(params, features, proto, max_len).tokens


def beam_search_hyp(params: ModelParams, features, proto=None, beam: int = 3,
                    max_len: int = 40, length_norm: bool = False) -> Hypothesis:
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    allowed = _allowed_ids(params.config.vocab_size)
    greedy = greedy_decode_hyp(params, features, proto, max_len)
    with ad.no_grad():
        enc_states, h0 = _prepare(params, features, proto)
        active = [Hypothesis([], 0.0, h0.data[0].copy(), False)]
        pool = []
        for _ in range(max_len):
            b = len(active)
            h_mat = ad._wrap(np.stack([hyp.state for hyp in active]))
            y_prev = np.array([hyp.tokens[-1] if hyp.tokens else Vocabulary.BOS
                               for hyp in active], dtype=np.int64)
            s = enc_states if b == 1 else ad._wrap(
                np.repeat(enc_states.data, b, axis=0))
            hn, logits, _ = decode_step_batch(params, h_mat, y_prev, s)
            logp = _log_softmax(logits.data)
            cands = []
            for i, hyp in enumerate(active):
                for t in allowed:
                    t = int(t)
                    cands.append((hyp.log_prob + float(logp[i, t]), i, t))
            cands.sort(key=lambda c: (-c[0], _lex_key(active[c[1]].tokens + [c[2]])))
            nxt = []
            for lp, i, t in cands[:beam]:
                tokens = active[i].tokens + [t]
                if t == Vocabulary.EOS:
                    pool.append(Hypothesis(tokens, lp, hn.data[i].copy(), True))
                else:
                    nxt.append(Hypothesis(tokens, lp, hn.data[i].copy(), False))
            active = nxt
            if not active:
                break
            if pool and not length_norm:
                # log-probs only decrease, so strictly dominated actives
                # cannot catch up; ties keep exploring for the lex rule
                if max(p.log_prob for p in pool) > max(a.log_prob for a in active):
                    break
        pool.extend(active)
        pool.append(greedy)
        return _best(pool, length_norm)


def beam_search(params: ModelParams, features, proto=None, beam: int = 3,
                max_len: int = 40, length_norm: bool = False):
    """Highest cumulative-log-prob sequence under a width-``beam`` search."""
    return beam_search_hyp(params, features, proto, beam, max_len,
                           length_norm).tokens


def postprocess(tokens, end_tokens=None):
    """Drop any sentence exactly repeating an earlier one; order preserved.

    Sentences are split after tokens in ``end_tokens`` (sentence-final
    punctuation by default); a trailing unterminated fragment counts as a
    final sentence.  Idempotent.
    """
    if end_tokens is None:
        end_tokens = SENT_END
    sents, cur = [], []
    for t in tokens:
        cur.append(t)
        if t in end_tokens:
            sents.append(tuple(cur))
            cur = []
    if cur:
        sents.append(tuple(cur))
    seen, out = set(), []
    for s in sents:
        if s in seen:
            continue
        seen.add(s)
        out.extend(s)
    return list(out)
