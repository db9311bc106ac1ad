"""Named random substreams derived from one global seed."""

import hashlib

import numpy as np


def derive_seed(seed, *purpose):
    """Stable 63-bit seed for ``purpose`` under the global ``seed``.

    The purpose parts are joined into a string and hashed, so the value does
    not depend on Python's per-process hash randomisation.
    """
    text = "/".join([str(int(seed))] + [str(p) for p in purpose])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def substream(seed, *purpose):
    return np.random.default_rng(derive_seed(seed, *purpose))
