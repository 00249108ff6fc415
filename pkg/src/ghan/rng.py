"""Seedable random streams.

All randomness in the package goes through :func:`stream`, which builds a
numpy ``Generator`` over the Philox-4x64 counter-based bit generator. A stream
is named by a seed plus a tuple of integer or string labels, so unrelated
consumers (init, dropout for epoch 3 day 17, the sampled Shapley estimator,
...) never share state and stay reproducible when other consumers change.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label) -> list[int]:
    if isinstance(label, (int, np.integer)):
        return [int(label) & 0xFFFFFFFF, (int(label) >> 32) & 0xFFFFFFFF]
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return [int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little")]


def stream(seed: int, *labels) -> np.random.Generator:
    words = _label_words(seed)
    for label in labels:
        words.extend(_label_words(label))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
