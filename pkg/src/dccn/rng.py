"""Seeded random streams.

Every stochastic consumer asks for a named stream.  The stream for
``(seed, "a/b/c")`` is ``PCG64(SeedSequence(seed, spawn_key=(crc32("a"),
crc32("b"), crc32("c"))))``, so each layer, epoch shuffle or dropout site
gets an independent generator whose state depends only on the run seed and
its name.  PCG64 and SeedSequence are specified bit-exactly by numpy, which
makes the streams identical across platforms.
"""

import zlib

import numpy as np


def spawn_key(name):
    return tuple(zlib.crc32(part.encode("utf-8")) for part in name.split("/") if part)


def stream(seed, name=""):
    """Return the generator for ``name`` under run seed ``seed``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=spawn_key(name))
    return np.random.Generator(np.random.PCG64(seq))


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
