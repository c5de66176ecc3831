"""Command-line surface: synth | train | adapt | generate | evaluate | sweep-ulr.

Every run is reproducible from (config, seed): reports and checkpoints are
byte-identical across reruns.  A flat key=value config file can preseed any
flag (command line wins); FEWSTORY_LOG=quiet silences progress lines.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Vocabulary, apply_vocab, build_vocab, dataset_header,
                   load_dataset, make_topic_specs, split_topics,
                   synth_generate, tokenize, topic_pool, write_dataset)
from .decode import beam_search_hyp, postprocess
from .meta import (DivergenceError, HyperParams, evaluate_adaptation,
                   inner_adapt, matched_supervised_steps, sample_episode,
                   support_loss, train_meta, train_supervised)
from .metrics import compute_report, train_topic_classifier
from .seqmodel import ModelConfig, ModelParams, encode_photo_batch, \
    encode_support, prototype_batch
from .util import fork_rng, format_kv_report, parse_kv_report

MODES = ("supervised", "proto_supervised", "meta", "tavs")


def _log(msg: str):
    if os.environ.get("FEWSTORY_LOG", "").lower() != "quiet":
        print(msg, file=sys.stderr)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _mode_uses_prototype(mode: str) -> bool:
    return mode in ("proto_supervised", "tavs")


def _mode_is_episodic(mode: str) -> bool:
    """proto_supervised trains episodically too: a disjoint support set feeds
    the prototype, there is just no inner adaptation (inner_steps forced 0)."""
    return mode in ("proto_supervised", "meta", "tavs")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _apply_config_file(parser: argparse.ArgumentParser, argv):
    """Load --config key=value defaults ahead of parsing (flags still win)."""
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    if path is None:
        return
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        values = parse_kv_report(f.read())
    known = {a.dest for a in parser._actions}
    for key in values:
        if key not in known:
            raise ValueError(f"invalid config field: {key}")
    parser.set_defaults(**values)


def _hyper_from_args(args) -> HyperParams:
    return HyperParams(
        inner_lr=args.inner_lr, meta_lr=args.meta_lr,
        inner_steps=args.inner_steps, topics_per_batch=args.topics_per_batch,
        k_shot=args.k_shot, grad_clip=args.grad_clip, dropout=args.dropout,
        second_order=not args.first_order,
        freeze_embedding_inner=not args.no_freeze_embedding, seed=args.seed)


def _add_hyper_flags(p: argparse.ArgumentParser):
    p.add_argument("--inner-lr", type=float, default=0.05)
    p.add_argument("--meta-lr", type=float, default=0.001)
    p.add_argument("--inner-steps", type=int, default=3)
    p.add_argument("--topics-per-batch", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=5)
    p.add_argument("--grad-clip", type=float, default=10.0)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--first-order", action="store_true",
                   help="do not differentiate through the inner gradients")
    p.add_argument("--no-freeze-embedding", action="store_true",
                   help="let inner steps update the word embedding")


def _echo_config(args, skip=("func",)) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip or callable(v):
            continue
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        out[f"config_{k}"] = v
    return out


def _write_report(path, values: dict):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_kv_report(values))


def _load_model(path):
    meta, arrays = load_checkpoint(path)
    cfg = ModelConfig(**meta["model"])
    params = ModelParams.from_arrays(cfg, arrays)
    id_to_token = list(meta["vocab"])
    vocab = Vocabulary(
        token_to_id={w: i for i, w in enumerate(id_to_token)
                     if i >= len(Vocabulary.SPECIALS)},
        id_to_token=id_to_token, min_freq=int(meta.get("min_freq", 1)))
    return params, vocab, meta


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    specs = make_topic_specs(args.topics, args.feature_dim, args.seed,
                             keywords_per_topic=args.keywords_per_topic,
                             noise_scale=args.noise_scale,
                             keyword_prob=args.keyword_prob)
    cases = synth_generate(specs, args.stories_per_topic, L=args.stream_len,
                           feature_dim=args.feature_dim, seed=args.seed,
                           sentences_per_story=args.sentences_per_story)
    write_dataset(args.out, cases, args.feature_dim, args.stream_len)
    _log(f"wrote {len(cases)} stories over {args.topics} topics to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.mode not in MODES:
        return _fail(f"invalid config field mode: must be one of {MODES}")
    cases = load_dataset(args.data, min_tokens=args.min_tokens,
                         max_tokens=args.max_tokens)
    if not cases:
        return _fail(f"{args.data}: no usable stories after filtering")
    header = dataset_header(args.data)
    vocab = build_vocab(cases, min_freq=args.min_freq)
    apply_vocab(cases, vocab)
    topics = sorted({c.topic for c in cases})
    n_train = args.train_topics
    if n_train is None:
        n_train = max(1, len(topics) - max(1, len(topics) // 3))
    train_topics, test_topics = split_topics(cases, n_train)
    train_cases = [c for c in cases if c.topic in set(train_topics)]

    cfg = ModelConfig(vocab_size=len(vocab), emb_dim=args.emb_dim,
                      hidden=args.hidden,
                      feature_dim=int(header["feature_dim"]),
                      dropout=args.dropout)
    params = ModelParams.init(cfg, fork_rng(args.seed, "init"))
    if args.mode == "proto_supervised":
        args.inner_steps = 0  # episodic but unadapted; echoed config agrees
    h = _hyper_from_args(args)
    rng = fork_rng(args.seed, "train")
    use_proto = _mode_uses_prototype(args.mode)

    report = _echo_config(args)
    report["n_cases"] = len(cases)
    report["n_train_topics"] = len(train_topics)
    report["n_test_topics"] = len(test_topics)
    report["vocab_size"] = len(vocab)
    try:
        if _mode_is_episodic(args.mode):
            pool = topic_pool(train_cases)
            history = train_meta(params, pool, h, args.iterations, rng,
                                 use_prototype=use_proto,
                                 optimizer=args.optimizer)
            for row in history:
                report[f"iter_{row['iteration']:05d}_meta_loss"] = row["meta_loss"]
                report[f"iter_{row['iteration']:05d}_inner"] = ";".join(
                    f"{x:.6f}" for x in row["inner_losses"])
            report["final_meta_loss"] = history[-1]["meta_loss"]
        else:
            steps = args.steps
            if steps is None:
                steps = matched_supervised_steps(args.iterations, h,
                                                 args.batch_size)
            report["supervised_steps"] = steps
            history = train_supervised(params, train_cases, h, steps,
                                       args.batch_size, rng,
                                       use_prototype=use_proto,
                                       optimizer=args.optimizer)
            for row in history:
                report[f"iter_{row['iteration']:05d}_loss"] = row["loss"]
            report["final_loss"] = history[-1]["loss"]
        report["diverged"] = False
    except DivergenceError as e:
        report["diverged"] = True
        report["divergence"] = str(e)
        if args.report:
            _write_report(args.report, report)
        return _fail(f"training diverged: {e}")

    meta = {"model": cfg.as_dict(), "vocab": vocab.id_to_token,
            "min_freq": args.min_freq, "mode": args.mode,
            "train_topics": train_topics, "test_topics": test_topics,
            "hyper": {"inner_lr": h.inner_lr, "meta_lr": h.meta_lr,
                      "inner_steps": h.inner_steps,
                      "topics_per_batch": h.topics_per_batch,
                      "k_shot": h.k_shot, "grad_clip": h.grad_clip,
                      "dropout": h.dropout, "second_order": h.second_order,
                      "freeze_embedding_inner": h.freeze_embedding_inner,
                      "seed": h.seed}}
    save_checkpoint(args.out, meta,
                    [(n, t.data) for n, t in params.named_params()])
    if args.report:
        _write_report(args.report, report)
    _log(f"trained mode={args.mode}; checkpoint at {args.out}")
    return 0


def _single_topic(cases, what: str) -> str:
    topics = {c.topic for c in cases}
    if len(topics) != 1:
        raise ValueError(f"{what} must contain exactly one topic, got {sorted(topics)}")
    return topics.pop()


def cmd_adapt(args) -> int:
    params, vocab, meta = _load_model(args.ckpt)
    support = load_dataset(args.support, min_tokens=args.min_tokens,
                           max_tokens=args.max_tokens)
    if not support:
        return _fail(f"{args.support}: no usable support stories")
    _single_topic(support, "support set")
    apply_vocab(support, vocab)
    hyper = dict(meta["hyper"])
    hyper["inner_lr"] = args.inner_lr if args.inner_lr is not None \
        else hyper["inner_lr"]
    hyper["inner_steps"] = args.steps
    h = HyperParams(**hyper)
    use_proto = _mode_uses_prototype(meta["mode"])

    report = _echo_config(args)
    report["topic"] = support[0].topic
    report["n_support"] = len(support)
    try:
        report["support_nll_before"] = float(
            support_loss(params, support, use_proto).data)
        adapted = inner_adapt(params, support, h, track_for_meta=False,
                              use_prototype=use_proto)
        report["support_nll_after"] = float(
            support_loss(adapted, support, use_proto).data)
        report["diverged"] = False
    except DivergenceError as e:
        report["diverged"] = True
        report["divergence"] = str(e)
        if args.report:
            _write_report(args.report, report)
        return _fail(f"adaptation diverged: {e}")
    save_checkpoint(args.out, meta,
                    [(n, t.data) for n, t in adapted.named_params()])
    if args.report:
        _write_report(args.report, report)
    _log(f"adapted {args.ckpt} with {h.inner_steps} steps -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    params, vocab, meta = _load_model(args.ckpt)
    cases = load_dataset(args.data, min_tokens=args.min_tokens,
                         max_tokens=args.max_tokens)
    apply_vocab(cases, vocab)
    use_proto = _mode_uses_prototype(meta["mode"]) and args.support is not None
    support_ctx = None
    if use_proto:
        support = load_dataset(args.support, min_tokens=args.min_tokens,
                               max_tokens=args.max_tokens)
        _single_topic(support, "support set")
        apply_vocab(support, vocab)
        with ad.no_grad():
            support_ctx = encode_support(params, support)
    records = []
    with ad.no_grad():
        for case in cases:
            proto = None
            if support_ctx is not None:
                _, v = encode_photo_batch(params, case.features[None, :, :])
                pvec, _ = prototype_batch(params, v, *support_ctx)
                proto = pvec.reshape(params.config.hidden)
            hyp = beam_search_hyp(params, case.features, proto=proto,
                                  beam=args.beam, max_len=args.max_len,
                                  length_norm=args.length_norm)
            words = postprocess(vocab.decode(hyp.tokens))
            records.append({"id": case.id, "topic": case.topic,
                            "text": " ".join(words),
                            "log_prob": hyp.log_prob})
    with open(args.out, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _log(f"generated {len(records)} stories to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    stories = []
    with open(args.stories, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                stories.append((rec["id"], rec["topic"], tokenize(rec["text"])))
            except (json.JSONDecodeError, KeyError) as e:
                return _fail(f"{args.stories}: line {lineno}: {e}")
    if not stories:
        return _fail(f"{args.stories}: empty story file")
    ns = tuple(int(x) for x in args.ngrams.split(","))
    streams = [s for _, _, s in stories]
    candidates = references = clf = None
    topics = [t for _, t, _ in stories]
    if args.data:
        refs = load_dataset(args.data, min_tokens=args.min_tokens,
                            max_tokens=args.max_tokens)
        by_id = {c.id: c for c in refs}
        pairs = [(s, by_id[i].words) for i, _, s in stories if i in by_id]
        if pairs:
            candidates = [c for c, _ in pairs]
            references = [r for _, r in pairs]
        if len({c.topic for c in refs}) >= 2:
            clf = train_topic_classifier([(c.words, c.topic) for c in refs],
                                         iters=args.classifier_iters)
    rep = compute_report(streams, ns=ns, candidates=candidates,
                         references=references, clf=clf, story_topics=topics)
    report = _echo_config(args)
    report["n_stories"] = len(stories)
    report.update(rep.as_dict())
    _write_report(args.out, report)
    _log(f"metrics for {len(stories)} stories written to {args.out}")
    return 0


def cmd_sweep_ulr(args) -> int:
    params, vocab, meta = _load_model(args.ckpt)
    cases = load_dataset(args.data, min_tokens=args.min_tokens,
                         max_tokens=args.max_tokens)
    apply_vocab(cases, vocab)
    test_topics = meta.get("test_topics") or sorted({c.topic for c in cases})
    pool = topic_pool([c for c in cases if c.topic in set(test_topics)])
    eligible = sorted(t for t, cs in pool.items() if len(cs) >= 2 * args.k_shot)
    if not eligible:
        return _fail(f"no test topic has {2 * args.k_shot} stories")
    rng = fork_rng(args.seed, "sweep-episodes")
    episodes = [sample_episode(pool, eligible[i % len(eligible)],
                               args.k_shot, rng)
                for i in range(args.episodes)]
    hyper = dict(meta["hyper"])
    hyper["inner_steps"] = args.steps
    hyper["k_shot"] = args.k_shot
    use_proto = _mode_uses_prototype(meta["mode"])
    rates = [float(x) for x in args.rates.split(",")]
    report = _echo_config(args)
    report["n_episodes"] = len(episodes)
    for rate in rates:
        hyper["inner_lr"] = rate
        h = HyperParams(**hyper)
        rows = evaluate_adaptation(params, episodes, h, use_prototype=use_proto)
        ok = [r for r in rows if not r["diverged"]]
        key = f"rate_{rate:g}"
        report[f"{key}_diverged_episodes"] = len(rows) - len(ok)
        if ok:
            report[f"{key}_zero_shot_nll"] = float(
                np.mean([r["zero_shot_nll"] for r in ok]))
            report[f"{key}_few_shot_nll"] = float(
                np.mean([r["few_shot_nll"] for r in ok]))
        else:
            report[f"{key}_outcome"] = "diverged"
        _log(f"rate {rate:g}: {len(rows) - len(ok)}/{len(rows)} episodes diverged")
    _write_report(args.out, report)
    _log(f"sweep report written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewstory",
        description="Few-shot topic-adaptive story generation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="flat key=value file preseeding any flag")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--min-tokens", type=int, default=10)
        p.add_argument("--max-tokens", type=int, default=120)

    p = sub.add_parser("synth", help="write a synthetic topic-structured dataset")
    common(p)
    p.add_argument("--topics", type=int, default=12)
    p.add_argument("--stories-per-topic", type=int, default=40)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--stream-len", type=int, default=5)
    p.add_argument("--keywords-per-topic", type=int, default=3)
    p.add_argument("--noise-scale", type=float, default=0.3)
    p.add_argument("--keyword-prob", type=float, default=0.7)
    p.add_argument("--sentences-per-story", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one of the four ablation modes")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES, default="tavs")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--iterations", type=int, default=150)
    p.add_argument("--steps", type=int, default=None,
                   help="supervised steps (default: budget-matched to --iterations)")
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--hidden", type=int, default=48)
    p.add_argument("--emb-dim", type=int, default=32)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--train-topics", type=int, default=None,
                   help="top-N frequent topics to meta-train on")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="apply inner steps to a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--inner-lr", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("generate", help="beam-search stories for a dataset")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--support", default=None,
                   help="single-topic dataset supplying the prototype")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--max-len", type=int, default=40)
    p.add_argument("--length-norm", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="metrics report for generated stories")
    common(p)
    p.add_argument("--stories", required=True)
    p.add_argument("--data", default=None,
                   help="reference dataset for BLEU and the topic classifier")
    p.add_argument("--ngrams", default="1,2,3,4")
    p.add_argument("--classifier-iters", type=int, default=300)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-ulr", help="update-learning-rate sweep")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rates", default="0.01,0.03,0.05,0.07,0.1")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--k-shot", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_ulr)

    return parser


def _subcommand_parsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def dispatch(argv) -> int:
    parser = build_parser()
    # config defaults belong to the subparser that owns the flags
    if argv and not argv[0].startswith("-"):
        sub = _subcommand_parsers(parser).get(argv[0])
        if sub is not None:
            try:
                _apply_config_file(sub, argv[1:])
            except (FileNotFoundError, ValueError) as e:
                return _fail(str(e))
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError,) as e:
        return _fail(str(e))
    except (ValueError, KeyError) as e:
        return _fail(str(e))


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
