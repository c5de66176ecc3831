"""Episodic meta-training and baselines.

Inner loop: M full-batch SGD steps on the mean support NLL (prototype fused
from the support set itself, self-attention allowed).  Meta objective: mean
adapted query loss over a batch of topic episodes, differentiated back to
the initialization -- through the inner gradients when second_order, with
the inner gradients treated as constants otherwise.  Outer optimizer Adam
by default, plain SGD selectable; clipping applies to the outer gradient
only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seqmodel import ModelParams, encode_support, story_nll_batch


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; the run records this, never ignores it."""


@dataclass
class HyperParams:
    inner_lr: float = 0.05
    meta_lr: float = 0.001
    inner_steps: int = 3
    topics_per_batch: int = 5
    k_shot: int = 5
    grad_clip: float = 10.0
    dropout: float = 0.2
    second_order: bool = True
    freeze_embedding_inner: bool = True
    seed: int = 0

    def __post_init__(self):
        # inner_lr 0 is allowed: it is the degeneracy identity (theta' = theta)
        if self.inner_lr < 0 or self.meta_lr <= 0:
            raise ValueError("learning rates must be positive (inner_lr may be 0)")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.topics_per_batch < 1 or self.k_shot < 1:
            raise ValueError("topics_per_batch and k_shot must be >= 1")


@dataclass
class Episode:
    topic: str
    support: list
    query: list

    def __post_init__(self):
        if len(self.support) != len(self.query) or not self.support:
            raise ValueError("support and query must be nonempty and equal-sized")
        ids = {c.id for c in self.support} & {c.id for c in self.query}
        if ids:
            raise ValueError(f"support/query overlap: {sorted(ids)}")
        topics = {c.topic for c in self.support + self.query}
        if topics != {self.topic}:
            raise ValueError(f"episode mixes topics: {sorted(topics)}")


def sample_episode(pool, topic, k, rng) -> Episode:
    """Uniform without replacement: first K to support, next K to query."""
    cases = pool[topic]
    if len(cases) < 2 * k:
        raise ValueError(f"topic {topic}: {len(cases)} cases, need {2 * k}")
    idx = rng.choice(len(cases), size=2 * k, replace=False)
    return Episode(topic=topic,
                   support=[cases[i] for i in idx[:k]],
                   query=[cases[i] for i in idx[k:]])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _case_batch(cases):
    feats = np.stack([c.features for c in cases])
    seqs = [c.token_ids for c in cases]
    return feats, seqs


def support_loss(params: ModelParams, support, use_prototype: bool = True,
                 rng=None, drop: float = 0.0) -> Tensor:
    """Mean support-story NLL; each case may attend to itself (support side)."""
    feats, seqs = _case_batch(support)
    ctx = encode_support(params, support) if use_prototype else None
    per = story_nll_batch(params, feats, seqs, support=ctx, rng=rng, drop=drop)
    return per.sum() * (1.0 / len(support))


def query_loss(params: ModelParams, episode: Episode, use_prototype: bool = True,
               rng=None, drop: float = 0.0) -> Tensor:
    """Mean query NLL with the prototype fused from the (re-encoded) support."""
    feats, seqs = _case_batch(episode.query)
    ctx = encode_support(params, episode.support) if use_prototype else None
    per = story_nll_batch(params, feats, seqs, support=ctx, rng=rng, drop=drop)
    return per.sum() * (1.0 / len(episode.query))


# ---------------------------------------------------------------------------
# Inner adaptation and the meta objective
# ---------------------------------------------------------------------------


def inner_adapt(params: ModelParams, support, h: HyperParams,
                track_for_meta: bool = False, use_prototype: bool = True,
                rng=None, log=None) -> ModelParams:
    """M SGD steps on the support loss.

    With track_for_meta the update chain stays on the tape so meta gradients
    flow through it (through the inner gradients themselves when
    second_order; around them, update treated as a constant shift, when
    first-order).  The embedding is excluded from updates when
    freeze_embedding_inner: the returned params share the embedding tensor.
    """
    if h.inner_steps == 0 or h.inner_lr == 0.0:
        return params
    cur = params
    for _ in range(h.inner_steps):
        loss = support_loss(cur, support, use_prototype, rng, h.dropout if rng else 0.0)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"inner step diverged: support loss {loss.data}")
        if log is not None:
            log.append(float(loss.data))
        named = cur.named_params()
        if h.freeze_embedding_inner:
            named = [(n, t) for n, t in named if n != "emb"]
        names = [n for n, _ in named]
        tensors = [t for _, t in named]
        if track_for_meta:
            grads = ad.gradient(loss, tensors, create_graph=h.second_order,
                                retain_graph=True, allow_unused=not use_prototype)
            upd = {n: t - h.inner_lr * g
                   for n, t, g in zip(names, tensors, grads)}
        else:
            grads = ad.gradient(loss, tensors, allow_unused=not use_prototype)
            upd = {n: Tensor(t.data - h.inner_lr * g.data, requires_grad=True)
                   for n, t, g in zip(names, tensors, grads)}
        cur = cur.replace(upd)
    return cur


def meta_loss(params: ModelParams, episodes, h: HyperParams,
              use_prototype: bool = True, rng=None, log=None) -> Tensor:
    """Mean over episodes of the adapted query loss, differentiable w.r.t. params."""
    if not episodes:
        raise ValueError("meta_loss needs at least one episode")
    total = None
    for ep in episodes:
        adapted = inner_adapt(params, ep.support, h, track_for_meta=True,
                              use_prototype=use_prototype, rng=rng, log=log)
        q = query_loss(adapted, ep, use_prototype, rng, h.dropout if rng else 0.0)
        total = q if total is None else total + q
    return total * (1.0 / len(episodes))


# ---------------------------------------------------------------------------
# Outer optimizers
# ---------------------------------------------------------------------------


def clip_global_norm(grads, max_norm: float):
    """Scale the gradient list so its global L2 norm is at most max_norm."""
    sq = sum(float(np.sum(g * g)) for g in grads)
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, named_params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for (name, p), g in zip(named_params, grads):
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class SGDState:
    lr: float

    def step(self, named_params, grads):
        for (_, p), g in zip(named_params, grads):
            p.data -= self.lr * g


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return AdamState(lr=lr)
    if kind == "sgd":
        return SGDState(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# Training drivers
# ---------------------------------------------------------------------------


def meta_train_step(params: ModelParams, episodes, h: HyperParams, opt,
                    use_prototype: bool = True, rng=None) -> dict:
    """One outer update; returns loss/grad-norm diagnostics."""
    inner_log = []
    loss = meta_loss(params, episodes, h, use_prototype, rng, log=inner_log)
    if not np.isfinite(loss.data):
        raise DivergenceError(f"meta loss diverged: {loss.data}")
    named = params.named_params()
    grads = ad.gradient(loss, [t for _, t in named], allow_unused=True)
    garrs = [g.data for g in grads]
    if any(not np.all(np.isfinite(g)) for g in garrs):
        raise DivergenceError("non-finite meta gradient")
    garrs, norm = clip_global_norm(garrs, h.grad_clip)
    opt.step(named, garrs)
    return {"meta_loss": float(loss.data), "grad_norm": norm,
            "inner_losses": inner_log}


def train_meta(params: ModelParams, pool, h: HyperParams, iterations: int,
               rng, use_prototype: bool = True, optimizer: str = "adam") -> list:
    """Episodic training over a topic pool; returns per-iteration stats."""
    eligible = sorted(t for t, cs in pool.items() if len(cs) >= 2 * h.k_shot)
    if not eligible:
        raise ValueError(f"no topic has {2 * h.k_shot} cases")
    opt = make_optimizer(optimizer, h.meta_lr)
    history = []
    for it in range(iterations):
        n = min(h.topics_per_batch, len(eligible))
        chosen = rng.choice(len(eligible), size=n, replace=False)
        episodes = [sample_episode(pool, eligible[i], h.k_shot, rng)
                    for i in chosen]
        stats = meta_train_step(params, episodes, h, opt, use_prototype, rng)
        stats["iteration"] = it
        history.append(stats)
    return history


def train_supervised(params: ModelParams, cases, h: HyperParams, steps: int,
                     batch_size: int, rng, use_prototype: bool = False,
                     lr: float = None, optimizer: str = "adam") -> list:
    """Mini-batch MLE baseline; batches are topic-homogeneous when the
    prototype is enabled (the batch acts as its own support set)."""
    if not cases:
        raise ValueError("empty training corpus")
    opt = make_optimizer(optimizer, h.meta_lr if lr is None else lr)
    by_topic = {}
    for c in cases:
        by_topic.setdefault(c.topic, []).append(c)
    topics = sorted(by_topic)
    history = []
    for it in range(steps):
        if use_prototype:
            topic = topics[rng.integers(len(topics))]
            group = by_topic[topic]
            take = min(batch_size, len(group))
            idx = rng.choice(len(group), size=take, replace=False)
            batch = [group[i] for i in idx]
        else:
            take = min(batch_size, len(cases))
            idx = rng.choice(len(cases), size=take, replace=False)
            batch = [cases[i] for i in idx]
        feats, seqs = _case_batch(batch)
        ctx = encode_support(params, batch) if use_prototype else None
        per = story_nll_batch(params, feats, seqs, support=ctx, rng=rng,
                              drop=h.dropout)
        loss = per.sum() * (1.0 / len(batch))
        if not np.isfinite(loss.data):
            raise DivergenceError(f"supervised loss diverged at step {it}")
        named = params.named_params()
        grads = ad.gradient(loss, [t for _, t in named], allow_unused=True)
        garrs, norm = clip_global_norm([g.data for g in grads], h.grad_clip)
        opt.step(named, garrs)
        history.append({"iteration": it, "loss": float(loss.data),
                        "grad_norm": norm})
    return history


def matched_supervised_steps(meta_iterations: int, h: HyperParams,
                             batch_size: int) -> int:
    """Supervised step count visiting as many stories as meta training does.

    One meta iteration forwards K support cases per inner step plus K query
    cases, for each of N topics.
    """
    visits = meta_iterations * h.topics_per_batch * h.k_shot * (h.inner_steps + 1)
    return max(1, int(round(visits / batch_size)))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_adaptation(params: ModelParams, episodes, h: HyperParams,
                        use_prototype: bool = True) -> list:
    """Per-episode query NLL before (zero-shot) and after (few-shot) adaptation.

    Inner adaptation here runs without dropout (deterministic evaluation).
    Divergence is recorded per episode, not raised.
    """
    results = []
    for ep in episodes:
        row = {"topic": ep.topic, "diverged": False}
        tokens = sum(len(c.token_ids) for c in ep.query)
        try:
            with_zero = query_loss(params, ep, use_prototype)
            row["zero_shot_nll"] = float(with_zero.data)
            adapted = inner_adapt(params, ep.support, h, track_for_meta=False,
                                  use_prototype=use_prototype)
            with_few = query_loss(adapted, ep, use_prototype)
            row["few_shot_nll"] = float(with_few.data)
            if not (np.isfinite(row["zero_shot_nll"])
                    and np.isfinite(row["few_shot_nll"])):
                raise DivergenceError("non-finite query NLL")
            row["zero_shot_nll_token"] = row["zero_shot_nll"] * len(ep.query) / tokens
            row["few_shot_nll_token"] = row["few_shot_nll"] * len(ep.query) / tokens
        except DivergenceError as e:
            row["diverged"] = True
            row["reason"] = str(e)
        results.append(row)
    return results
