"""Seeded synthetic translation task whose candidate quality is a planted surface feature.

The target is the source reversed with every word ``w<i>`` mapped to ``v<i>``, so
source and target share no surface tokens. Candidates come from
``TemplateGenerator``, which corrupts the target with junk words (``zq*``) and
drops, so reference-based quality falls with the amount of corruption: a
feature a reranker can learn without access to the reference.
"""

from __future__ import annotations

import numpy as np

from .data import Example


def make_examples(n: int, seed: int, prefix: str = "ex", vocab_size: int = 200,
                  min_len: int = 6, max_len: int = 12) -> list[Example]:
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab_size)]
    out = []
    for i in range(n):
        toks = [str(t) for t in rng.choice(words, size=int(rng.integers(min_len, max_len + 1)))]
        target = " ".join("v" + t[1:] for t in reversed(toks))
        out.append(Example(f"{prefix}{i}", " ".join(toks), target))
    return out


def make_splits(n_train: int = 300, n_val: int = 40, n_test: int = 100, seed: int = 0,
                **kwargs) -> dict[str, list[Example]]:
    return {
        "train": make_examples(n_train, seed, "train", **kwargs),
        "val": make_examples(n_val, seed + 1, "val", **kwargs),
        "test": make_examples(n_test, seed + 2, "test", **kwargs),
    }
