"""Root-seed fan-out.

Every stochastic stage draws from ``derive_seed(root, stage, *keys)``: the
first 8 bytes (little endian, top bit cleared) of
``sha256("refgen|<root>|<stage>|<key1>|<key2>...")``. One root integer thus
fixes a whole experiment while stages and items get independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, stage: str, *keys) -> int:
    text = "|".join(["refgen", str(int(root)), stage, *map(str, keys)])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


def stage_rng(root: int, stage: str, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stage, *keys))
