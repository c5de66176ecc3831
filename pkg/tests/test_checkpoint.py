"""Binary checkpoint round trip and byte stability."""

import numpy as np
import pytest

from fewstory.checkpoint import load_checkpoint, save_checkpoint


def _tensors(rng):
    return [("w_out", rng.standard_normal((3, 4))),
            ("emb", rng.standard_normal((5, 2))),
            ("b", rng.standard_normal(4))]


def test_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    named = _tensors(rng)
    meta = {"mode": "tavs", "vocab": ["<pad>", "a"], "nested": {"x": 1}}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, meta, named)
    meta2, arrays = load_checkpoint(p)
    assert meta2 == meta
    assert list(arrays) == [n for n, _ in named]
    for name, arr in named:
        assert np.array_equal(arrays[name], arr)


def test_save_is_byte_stable(tmp_path):
    rng = np.random.default_rng(1)
    named = _tensors(rng)
    meta = {"b": 2, "a": 1}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, meta, named)
    save_checkpoint(p2, {"a": 1, "b": 2}, named)  # key order must not matter
    assert p1.read_bytes() == p2.read_bytes()


def test_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(p)
