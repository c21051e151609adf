import hashlib
import math
from typing import Any

import numpy as np

# Stream identifiers used as the first element of a SeedSequence spawn key.
TRAIN_STREAM = 0
VAL_STREAM = 1
# Second spawn-key element for dataset-level draws; sample indices stay below it.
LABELS_KEY = 0xFFFF_FFFF

GENERATOR_NAME = "numpy.PCG64/SeedSequence"


def _canonical(part: Any) -> str:
    if part is None:
        return "na"
    if isinstance(part, bool):
        return "1" if part else "0"
    if isinstance(part, float):
        if math.isfinite(part) and part == int(part):
            return str(int(part))
        return repr(part)
    return str(part)


def derive_seed(*parts: Any) -> int:
    """Stable 64-bit seed from an ordered tuple of parts.

    Integral floats hash like ints so 40 and 40.0 name the same cell.
    """
    text = "|".join(_canonical(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent PCG64 stream for ``seed`` split by ``key``.

    The split follows SeedSequence spawn keys, so a stream only depends on
    (seed, key) and never on how many other streams were drawn before it.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def sample_stream(seed: int, stream_id: int, index: int) -> np.random.Generator:
    return stream(seed, stream_id, index)
