"""Named random sub-streams derived from one run seed.

Every stochastic step in the pipeline draws from
stream_rng(run_seed, "some.name"), so stages are independently
reproducible and adding a consumer never shifts another stage's draws.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream_seed", "stream_rng"]


def stream_seed(seed: int, name: str) -> list:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int(seed), int.from_bytes(digest[:8], "big")]


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))
