"""End-to-end CLI behavior on tiny runs: exit codes, files, determinism."""

import json

import numpy as np
import pytest

from fewstory.checkpoint import load_checkpoint
from fewstory.cli import dispatch
from fewstory.data import load_dataset, write_dataset
from fewstory.util import parse_kv_report


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset plus a tiny trained checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.jsonl"
    rc = dispatch(["synth", "--topics", "4", "--stories-per-topic", "10",
                   "--feature-dim", "4", "--stream-len", "3",
                   "--seed", "11", "--out", str(data)])
    assert rc == 0
    ckpt = root / "model.ckpt"
    report = root / "train.report"
    rc = dispatch(["train", "--data", str(data), "--mode", "tavs",
                   "--iterations", "2", "--hidden", "10", "--emb-dim", "8",
                   "--topics-per-batch", "2", "--k-shot", "2",
                   "--inner-steps", "1", "--seed", "1",
                   "--out", str(ckpt), "--report", str(report)])
    assert rc == 0
    cases = load_dataset(data)
    support = root / "support.jsonl"
    topic = sorted({c.topic for c in cases})[-1]
    write_dataset(support, [c for c in cases if c.topic == topic][:2], 4, 3)
    return {"root": root, "data": data, "ckpt": ckpt, "report": report,
            "support": support, "topic": topic}


def test_synth_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    args = ["synth", "--topics", "3", "--stories-per-topic", "4",
            "--feature-dim", "4", "--seed", "5"]
    assert dispatch(args + ["--out", str(a)]) == 0
    assert dispatch(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_unknown_flag_exits_2_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        dispatch(["synth", "--out", "x.jsonl", "--no-such-flag"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_file_reports_error(tmp_path, capsys):
    rc = dispatch(["train", "--data", str(tmp_path / "nope.jsonl"),
                   "--out", str(tmp_path / "m.ckpt")])
    assert rc != 0
    assert "error" in capsys.readouterr().err


def test_invalid_config_field_is_named(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_flag=3\n")
    rc = dispatch(["synth", "--config", str(cfg),
                   "--out", str(tmp_path / "x.jsonl")])
    assert rc == 1
    assert "not_a_flag" in capsys.readouterr().err


def test_config_file_defaults_yield_to_flags(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("topics=6\nstories_per_topic=3\n")
    out = tmp_path / "d.jsonl"
    rc = dispatch(["synth", "--config", str(cfg), "--topics", "2",
                   "--feature-dim", "4", "--out", str(out)])
    assert rc == 0
    cases = load_dataset(out, min_tokens=1)
    topics = {c.topic for c in cases}
    assert len(topics) == 2  # flag beat the config file
    assert sum(c.topic == sorted(topics)[0] for c in cases) == 3  # config beat default


def test_train_writes_checkpoint_with_vocab_and_report(workdir):
    meta, arrays = load_checkpoint(workdir["ckpt"])
    assert meta["mode"] == "tavs"
    assert meta["vocab"][:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert len(meta["train_topics"]) + len(meta["test_topics"]) == 4
    assert "emb" in arrays and "w_out" in arrays
    report = parse_kv_report(workdir["report"].read_text())
    assert report["config_mode"] == "tavs"
    assert report["diverged"] is False
    assert "iter_00001_meta_loss" in report


def test_adapt_zero_steps_is_byte_identical(workdir, tmp_path):
    out = tmp_path / "same.ckpt"
    rc = dispatch(["adapt", "--ckpt", str(workdir["ckpt"]),
                   "--support", str(workdir["support"]),
                   "--steps", "0", "--out", str(out)])
    assert rc == 0
    assert out.read_bytes() == workdir["ckpt"].read_bytes()


def test_adapt_moves_parameters_and_reports_loss(workdir, tmp_path):
    out = tmp_path / "adapted.ckpt"
    rep = tmp_path / "adapt.report"
    rc = dispatch(["adapt", "--ckpt", str(workdir["ckpt"]),
                   "--support", str(workdir["support"]),
                   "--steps", "1", "--inner-lr", "0.05",
                   "--out", str(out), "--report", str(rep)])
    assert rc == 0
    _, before = load_checkpoint(workdir["ckpt"])
    _, after = load_checkpoint(out)
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    report = parse_kv_report(rep.read_text())
    assert report["topic"] == workdir["topic"]
    assert np.isfinite(report["support_nll_after"])


def test_adapt_rejects_mixed_topic_support(workdir, tmp_path, capsys):
    cases = load_dataset(workdir["data"])
    mixed = tmp_path / "mixed.jsonl"
    topics = sorted({c.topic for c in cases})
    picks = [next(c for c in cases if c.topic == t) for t in topics[:2]]
    write_dataset(mixed, picks, 4, 3)
    rc = dispatch(["adapt", "--ckpt", str(workdir["ckpt"]),
                   "--support", str(mixed), "--steps", "1",
                   "--out", str(tmp_path / "x.ckpt")])
    assert rc == 1
    assert "one topic" in capsys.readouterr().err


def test_generate_evaluate_round_trip(workdir, tmp_path):
    gen = tmp_path / "gen.jsonl"
    rc = dispatch(["generate", "--ckpt", str(workdir["ckpt"]),
                   "--data", str(workdir["support"]),
                   "--support", str(workdir["support"]),
                   "--beam", "2", "--max-len", "8", "--out", str(gen)])
    assert rc == 0
    recs = [json.loads(l) for l in gen.read_text().splitlines()]
    assert {r["topic"] for r in recs} == {workdir["topic"]}
    assert all(set(r) == {"id", "topic", "text", "log_prob"} for r in recs)

    rep = tmp_path / "eval.report"
    rc = dispatch(["evaluate", "--stories", str(gen),
                   "--data", str(workdir["data"]), "--out", str(rep)])
    assert rc == 0
    report = parse_kv_report(rep.read_text())
    assert report["n_stories"] == len(recs)
    for key in ("inter_rep_1", "intra_rep_4", "ent_2", "dist_3"):
        assert key in report

    gen2 = tmp_path / "gen2.jsonl"
    dispatch(["generate", "--ckpt", str(workdir["ckpt"]),
              "--data", str(workdir["support"]),
              "--support", str(workdir["support"]),
              "--beam", "2", "--max-len", "8", "--out", str(gen2)])
    assert gen.read_bytes() == gen2.read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_completes_and_records_divergence(workdir, tmp_path):
    rep = tmp_path / "sweep.report"
    rc = dispatch(["sweep-ulr", "--ckpt", str(workdir["ckpt"]),
                   "--data", str(workdir["data"]),
                   "--rates", "0.05,1e300", "--episodes", "2",
                   "--steps", "2", "--k-shot", "2",
                   "--seed", "3", "--out", str(rep)])
    assert rc == 0
    report = parse_kv_report(rep.read_text())
    assert report["rate_0.05_diverged_episodes"] == 0
    assert report["rate_1e+300_diverged_episodes"] == 2
    assert report["rate_1e+300_outcome"] == "diverged"
    assert np.isfinite(report["rate_0.05_few_shot_nll"])


def test_train_rerun_is_byte_identical(workdir, tmp_path):
    ckpt2 = tmp_path / "again.ckpt"
    rc = dispatch(["train", "--data", str(workdir["data"]), "--mode", "tavs",
                   "--iterations", "2", "--hidden", "10", "--emb-dim", "8",
                   "--topics-per-batch", "2", "--k-shot", "2",
                   "--inner-steps", "1", "--seed", "1", "--out", str(ckpt2)])
    assert rc == 0
    assert ckpt2.read_bytes() == workdir["ckpt"].read_bytes()


def test_proto_supervised_trains_episodically_without_inner_steps(workdir, tmp_path):
    ckpt = tmp_path / "proto.ckpt"
    rep = tmp_path / "proto.report"
    rc = dispatch(["train", "--data", str(workdir["data"]),
                   "--mode", "proto_supervised", "--iterations", "2",
                   "--hidden", "10", "--emb-dim", "8",
                   "--topics-per-batch", "2", "--k-shot", "2",
                   "--inner-steps", "3", "--seed", "1",
                   "--out", str(ckpt), "--report", str(rep)])
    assert rc == 0
    meta, _ = load_checkpoint(ckpt)
    assert meta["hyper"]["inner_steps"] == 0  # episodic but unadapted
    report = parse_kv_report(rep.read_text())
    assert report["config_inner_steps"] == 0
    assert "iter_00001_meta_loss" in report


def test_invalid_mode_fails(workdir, tmp_path, capsys):
    with pytest.raises(SystemExit):
        dispatch(["train", "--data", str(workdir["data"]),
                  "--mode", "magic", "--out", str(tmp_path / "x.ckpt")])
