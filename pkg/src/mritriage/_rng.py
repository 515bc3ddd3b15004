"""Named random sub-streams derived from a single root seed."""

import hashlib

import numpy as np


def _name_key(name):
    if isinstance(name, (int, np.integer)):
        return int(name)
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed, *names):
    """Return a Generator for the sub-stream ``(seed, *names)``.

    Names may be strings or non-negative integers (e.g. a run index). The
    same path always yields the same stream, independent of which other
    streams were drawn first.
    """
    key = tuple(_name_key(n) for n in names)
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.default_rng(ss)
