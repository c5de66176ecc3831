"""Topic-adaptive visual storytelling network.

Visual GRU encoder over photo features, GRU story decoder with scaled
dot-product attention back into the encoder states, a story-text GRU encoder
for support stories, prototype fusion (attention from a case's visual vector
into support story vectors), and the teacher-forcing sequence loss.

Single-case operations mirror the public contracts; *_batch variants process
several cases at once (rows of [B, .] tensors, ragged lengths handled with a
hold mask) and are what training uses.  Both paths share the same primitives,
so they agree to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import GRUParams, Tensor
from .data import Vocabulary


@dataclass
class ModelConfig:
    vocab_size: int
    emb_dim: int = 24
    hidden: int = 32
    feature_dim: int = 8
    dropout: float = 0.2

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab must include the 4 special tokens")
        for f in ("emb_dim", "hidden", "feature_dim"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    def as_dict(self):
        return {"vocab_size": self.vocab_size, "emb_dim": self.emb_dim,
                "hidden": self.hidden, "feature_dim": self.feature_dim,
                "dropout": self.dropout}


@dataclass
class ModelParams:
    """All learnable parameters.

    w_init maps the concatenation [v_final; proto] (prototype slot zeroed
    when absent) to the decoder's initial hidden state; the output head maps
    [h_t; c_t] to vocabulary logits.
    """

    config: ModelConfig
    emb: Tensor
    vis_enc: GRUParams
    txt_enc: GRUParams
    dec: GRUParams
    w_init: Tensor
    b_init: Tensor
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, config: ModelConfig, rng, scale: float = 0.1):
        def w(shape):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        def b(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        h, v = config.hidden, config.vocab_size
        return cls(
            config=config,
            emb=w((v, config.emb_dim)),
            vis_enc=GRUParams.create(config.feature_dim, h, rng, scale),
            txt_enc=GRUParams.create(config.emb_dim, h, rng, scale),
            dec=GRUParams.create(config.emb_dim, h, rng, scale),
            w_init=w((2 * h, h)), b_init=b((h,)),
            w_out=w((2 * h, v)), b_out=b((v,)))

    def named_params(self):
        out = [("emb", self.emb)]
        out += list(self.vis_enc.named("vis_enc"))
        out += list(self.txt_enc.named("txt_enc"))
        out += list(self.dec.named("dec"))
        out += [("w_init", self.w_init), ("b_init", self.b_init),
                ("w_out", self.w_out), ("b_out", self.b_out)]
        return out

    def tensors(self):
        return [t for _, t in self.named_params()]

    def replace(self, mapping) -> "ModelParams":
        """New ModelParams with the named tensors swapped, rest shared."""

        def pick(name, cur):
            return mapping.get(name, cur)

        def gru(prefix, g):
            return GRUParams(*[pick(f"{prefix}.{f}", getattr(g, f))
                               for f in GRUParams.FIELDS])

        return ModelParams(
            config=self.config,
            emb=pick("emb", self.emb),
            vis_enc=gru("vis_enc", self.vis_enc),
            txt_enc=gru("txt_enc", self.txt_enc),
            dec=gru("dec", self.dec),
            w_init=pick("w_init", self.w_init), b_init=pick("b_init", self.b_init),
            w_out=pick("w_out", self.w_out), b_out=pick("b_out", self.b_out))

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict) -> "ModelParams":
        tmpl = cls._zeros(config)
        mapping = {name: Tensor(arrays[name], requires_grad=True)
                   for name, _ in tmpl.named_params()}
        return tmpl.replace(mapping)

    @classmethod
    def _zeros(cls, config: ModelConfig):
        h, v = config.hidden, config.vocab_size

        def z(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        return cls(config=config, emb=z((v, config.emb_dim)),
                   vis_enc=GRUParams.create(config.feature_dim, h),
                   txt_enc=GRUParams.create(config.emb_dim, h),
                   dec=GRUParams.create(config.emb_dim, h),
                   w_init=z((2 * h, h)), b_init=z((h,)),
                   w_out=z((2 * h, v)), b_out=z((v,)))

    def clone(self) -> "ModelParams":
        return self.replace({n: Tensor(t.data.copy(), requires_grad=True)
                             for n, t in self.named_params()})


@dataclass
class EncoderOutput:
    states: list
    final: Tensor


class AttentionResult(NamedTuple):
    output: Tensor
    weights: Tensor


@dataclass
class Prototype:
    vector: Tensor
    attention_weights: Tensor


# ---------------------------------------------------------------------------
# Small tensor-shaping helpers
# ---------------------------------------------------------------------------


def stack_rows(tensors):
    """List of K [H] vectors -> [K, H]."""
    return ad.concat([t.reshape(1, t.data.shape[-1]) for t in tensors], axis=0)


def tile_rows(t: Tensor, b: int):
    """[K, H] -> [B, K, H] by repetition."""
    k, h = t.data.shape
    one = t.reshape(1, k, h)
    if b == 1:
        return one
    return ad.concat([one] * b, axis=0)


# ---------------------------------------------------------------------------
# Batched cores
# ---------------------------------------------------------------------------


def encode_photo_batch(params: ModelParams, feats):
    """feats [B, L, D] -> (states [B, L, H], final [B, H])."""
    feats = np.asarray(feats, dtype=np.float64)
    b, l, d = feats.shape
    h = ad._wrap(np.zeros((b, params.config.hidden)))
    states = []
    for t in range(l):
        h = ad.gru_cell(params.vis_enc, h, ad._wrap(feats[:, t, :]))
        states.append(h.reshape(b, 1, params.config.hidden))
    return ad.concat(states, axis=1), h


def encode_text_batch(params: ModelParams, ids, mask):
    """ids [B, T] with pad, mask [B, T] in {0,1} -> final hidden [B, H]."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    b, t_max = ids.shape
    h = ad._wrap(np.zeros((b, params.config.hidden)))
    for t in range(t_max):
        x = ad.take_rows(params.emb, ids[:, t])
        hn = ad.gru_cell(params.txt_enc, h, x)
        m = ad._wrap(mask[:, t:t + 1])
        h = m * hn + (1.0 - m) * h
    return h


def attend_kv(keys, values, query):
    """Scaled dot-product attention.

    keys/values [B, K, H], query [B, H] -> (context [B, H], weights [B, K]).
    """
    d_k = keys.data.shape[-1]
    scores = ad.att_scores(keys, query) * (1.0 / np.sqrt(d_k))
    weights = ad.softmax_rows(scores)
    return ad.att_apply(weights, values), weights


def prototype_batch(params: ModelParams, v_query, support_vis, support_story):
    """Prototype per batch row: attention(v_query, support_vis, support_story).

    v_query [B, H]; support_vis/support_story [K, H] shared across the batch.
    """
    b = v_query.data.shape[0]
    keys = tile_rows(support_vis, b)
    values = tile_rows(support_story, b)
    return attend_kv(keys, values, v_query)


def init_state(params: ModelParams, v_final, proto=None):
    """[v_final; proto] @ w_init + b_init, prototype slot zeroed when absent."""
    b, h = v_final.data.shape
    if proto is None:
        proto = ad._wrap(np.zeros((b, h)))
    return ad.concat([v_final, proto], axis=1) @ params.w_init + params.b_init


def decode_step_batch(params: ModelParams, h_prev, y_prev, enc_states,
                      rng=None, drop: float = 0.0):
    """One teacher-forcing/decoding step over a batch.

    y_prev: [B] int ids. Returns (h [B,H], logits [B,V], att weights [B,L]).
    """
    x = ad.take_rows(params.emb, np.asarray(y_prev, dtype=np.int64))
    if rng is not None and drop > 0.0:
        x = ad.dropout(x, drop, rng)
    h = ad.gru_cell(params.dec, h_prev, x)
    ctx, w = attend_kv(enc_states, enc_states, h)
    hc = ad.concat([h, ctx], axis=1)
    if rng is not None and drop > 0.0:
        hc = ad.dropout(hc, drop, rng)
    logits = hc @ params.w_out + params.b_out
    return h, logits, w


def pad_token_batch(token_seqs):
    """Right-pad id sequences; returns (in_ids, tgt_ids, mask), each [B, T].

    in_ids start with bos and feed teacher forcing; tgt_ids are the
    eos-terminated originals.
    """
    b = len(token_seqs)
    t_max = max(len(s) for s in token_seqs)
    in_ids = np.full((b, t_max), Vocabulary.PAD, dtype=np.int64)
    tgt = np.full((b, t_max), Vocabulary.PAD, dtype=np.int64)
    mask = np.zeros((b, t_max), dtype=np.float64)
    for i, s in enumerate(token_seqs):
        n = len(s)
        in_ids[i, 0] = Vocabulary.BOS
        if n > 1:
            in_ids[i, 1:n] = s[:-1]
        tgt[i, :n] = s
        mask[i, :n] = 1.0
    return in_ids, tgt, mask


def story_nll_batch(params: ModelParams, feats, token_seqs, support=None,
                    rng=None, drop: float = 0.0):
    """Per-case teacher-forcing NLL sums: Tensor [B].

    feats [B, L, D]; token_seqs: list of eos-terminated id sequences;
    support: optional ([K,H] visual finals, [K,H] story vectors) shared by
    the batch.  Padded steps contribute exactly zero.
    """
    in_ids, tgt, mask = pad_token_batch(token_seqs)
    b, t_max = in_ids.shape
    enc_states, v_final = encode_photo_batch(params, feats)
    proto = None
    if support is not None:
        support_vis, support_story = support
        proto, _ = prototype_batch(params, v_final, support_vis, support_story)
    h = init_state(params, v_final, proto)
    total = ad._wrap(np.zeros(b))
    for t in range(t_max):
        m_col = ad._wrap(mask[:, t:t + 1])
        hn, logits, _ = decode_step_batch(params, h, in_ids[:, t], enc_states,
                                          rng=rng, drop=drop)
        h = m_col * hn + (1.0 - m_col) * h
        step = ad.logsumexp_rows(logits) - ad.pick_cols(logits, tgt[:, t])
        total = total + step * ad._wrap(mask[:, t])
    return total


def encode_support(params: ModelParams, cases):
    """Support-case encodings: ([K,H] visual finals, [K,H] story vectors)."""
    feats = np.stack([c.features for c in cases])
    _, vis = encode_photo_batch(params, feats)
    seqs = [c.token_ids for c in cases]
    t_max = max(len(s) for s in seqs)
    ids = np.full((len(cases), t_max), Vocabulary.PAD, dtype=np.int64)
    mask = np.zeros((len(cases), t_max), dtype=np.float64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    story = encode_text_batch(params, ids, mask)
    return vis, story


# ---------------------------------------------------------------------------
# Single-case operations
# ---------------------------------------------------------------------------


def encode_photo_stream(params: ModelParams, features) -> EncoderOutput:
    """Ordered photo features -> L hidden states from a zero initial state."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("features must be a nonempty list of vectors")
    if feats.shape[1] != params.config.feature_dim:
        raise ValueError(
            f"feature dim {feats.shape[1]} != model feature_dim "
            f"{params.config.feature_dim}")
    s, v = encode_photo_batch(params, feats[None, :, :])
    l, h = feats.shape[0], params.config.hidden
    states = [ad.narrow(s, 1, i, 1).reshape(h) for i in range(l)]
    return EncoderOutput(states=states, final=v.reshape(h))


def attention(query: Tensor, keys, values) -> AttentionResult:
    """softmax(q . k_i / sqrt(d_k)) combination of values; weights exposed."""
    keys, values = list(keys), list(values)
    if not keys or len(keys) != len(values):
        raise ValueError("attention needs matching nonempty keys/values")
    d_k = query.data.shape[-1]
    if any(k.data.shape[-1] != d_k for k in keys):
        raise ValueError("query/key dimension mismatch")
    k_mat = stack_rows(keys).reshape(1, len(keys), d_k)
    v_mat = stack_rows(values).reshape(1, len(values), values[0].data.shape[-1])
    ctx, w = attend_kv(k_mat, v_mat, query.reshape(1, d_k))
    return AttentionResult(output=ctx.reshape(values[0].data.shape[-1]),
                           weights=w.reshape(len(keys)))


def encode_story_text(params: ModelParams, tokens) -> Tensor:
    """Final text-encoder hidden state after consuming embedded tokens."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be nonempty")
    if ids.min() < 0 or ids.max() >= params.config.vocab_size:
        raise IndexError("token id out of vocabulary")
    h = encode_text_batch(params, ids[None, :], np.ones((1, ids.size)))
    return h.reshape(params.config.hidden)


def fuse_prototype(v_query: Tensor, support_visuals, support_stories) -> Prototype:
    """Attention from a case's visual vector into the support story vectors."""
    res = attention(v_query, support_visuals, support_stories)
    return Prototype(vector=res.output, attention_weights=res.weights)


def init_decoder(params: ModelParams, v_final: Tensor, proto=None) -> Tensor:
    vec = None
    if proto is not None:
        vec = proto.vector if isinstance(proto, Prototype) else proto
        vec = vec.reshape(1, vec.data.shape[-1])
    h0 = init_state(params, v_final.reshape(1, v_final.data.shape[-1]), vec)
    return h0.reshape(params.config.hidden)


def decode_step(params: ModelParams, h_prev: Tensor, y_prev: int, encoder_states):
    """One decoder step for a single case -> (h_t, logits)."""
    y = int(y_prev)
    if not 0 <= y < params.config.vocab_size:
        raise IndexError("token id out of vocabulary")
    if isinstance(encoder_states, EncoderOutput):
        encoder_states = encoder_states.states
    h = params.config.hidden
    s = stack_rows(list(encoder_states)).reshape(1, len(encoder_states), h)
    hp = h_prev.reshape(1, h)
    hn, logits, _ = decode_step_batch(params, hp, np.asarray([y]), s)
    return hn.reshape(h), logits.reshape(params.config.vocab_size)


def story_nll(params: ModelParams, case, support_context=None,
              rng=None, drop: float = 0.0) -> Tensor:
    """Teacher-forcing sum of per-token cross-entropy for one story.

    support_context: optional (visual finals, story vectors) as lists of [H]
    tensors or stacked [K, H] tensors; when given, the decoder is initialized
    with the prototype keyed by this case's own visual vector.
    """
    ids = getattr(case, "token_ids", None)
    if ids is None or len(ids) < 1 or ids[-1] != Vocabulary.EOS:
        raise ValueError(f"malformed case {getattr(case, 'id', '?')}: "
                         "token ids must be nonempty and eos-terminated")
    support = None
    if support_context is not None:
        vis, story = support_context
        if not isinstance(vis, Tensor):
            vis = stack_rows(list(vis))
        if not isinstance(story, Tensor):
            story = stack_rows(list(story))
        support = (vis, story)
    nll = story_nll_batch(params, case.features[None, :, :], [ids],
                          support=support, rng=rng, drop=drop)
    return nll.sum()
