"""Named RNG substreams derived from one global seed.

Every source of randomness in a run pulls its generator through
:func:`substream`, keyed by a purpose path (e.g. ``("member", 3, "noise")``),
so adding or reordering consumers elsewhere never shifts another stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(path):
    words = []
    for part in path:
        if isinstance(part, (int, np.integer)):
            words.append(int(part) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:4], "big"))
    return words


def substream(seed, *path):
    """Deterministic generator for (seed, purpose path)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + _key_words(path)))


def substream_seed(seed, *path):
    """A derived integer seed, for components that store their own seed."""
    return int(
        np.random.SeedSequence([int(seed)] + _key_words(path)).generate_state(1)[0]
    )
