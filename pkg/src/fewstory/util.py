"""Reproducibility helpers: labeled RNG forks and deterministic reports."""

from __future__ import annotations

import hashlib

import numpy as np


def fork_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator derived from (seed, label).

    Stable across runs and machines: the label is hashed, so adding a new
    consumer elsewhere never shifts the streams of existing ones.
    """
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    entropy = [int.from_bytes(digest[i:i + 8], "little") for i in (0, 8, 16, 24)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def format_kv_report(values: dict) -> str:
    """Deterministic key=value text, one pair per line, keys sorted.

    Floats written with repr for exact round-trip; no timestamps or other
    run-varying content may enter here.
    """
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, float):
            lines.append(f"{k}={v!r}")
        elif isinstance(v, (bool, int, str)):
            lines.append(f"{k}={v}")
        elif v is None:
            lines.append(f"{k}=None")
        else:
            raise TypeError(f"unsupported report value for {k}: {type(v)}")
    return "\n".join(lines) + "\n"


def parse_kv_report(text: str) -> dict:
    """Inverse of format_kv_report (strings stay strings unless numeric)."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, _, raw = line.partition("=")
        if raw == "True" or raw == "False":
            out[k] = raw == "True"
        elif raw == "None":
            out[k] = None
        else:
            try:
                out[k] = int(raw)
            except ValueError:
                try:
                    out[k] = float(raw)
                except ValueError:
                    out[k] = raw
    return out
