"""Counter-based random streams keyed by (seed, purpose, frame, index).

Every consumer derives its own Philox generator from the key, so draws never
depend on call order across purposes or on how work is split over threads.
"""

from __future__ import annotations

import zlib

import numpy as np


def _purpose_id(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


def stream(seed: int, purpose: str, frame: int = 0, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_id(purpose), int(frame), int(index)])
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))
