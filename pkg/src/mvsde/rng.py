"""Counter-based random streams.

Every random number in the package is a pure function of a 64-bit seed and an
integer counter, computed with the Philox4x32-10 bijection (Salmon et al.,
SC'11).  This lets a path, vortex or proposal sample own its stream without any
shared generator state, so results do not depend on batching or scheduling.

Counter layout used throughout: ``(c0, c1, c2, c3)`` with

* ``c0`` - item index (path within start, vortex id, sample id)
* ``c1`` - step index
* ``c2`` - group index (start point, replica)
* ``c3`` - ``(tag << 16) | lane`` where ``lane`` enumerates pairs of outputs
"""
from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

# stream tags
TAG_PATHS = 1
TAG_PROPOSAL = 2
TAG_VORTEX = 3
TAG_BOOTSTRAP = 4
TAG_MISC = 5


def philox4x32(counter, key):
    """Philox4x32-10 on broadcastable uint32 arrays.

    Parameters
    ----------
    counter : sequence of four integer arrays
    key : pair of integers

    Returns
    -------
    tuple of four uint64 arrays holding 32-bit words
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(10):
        if r:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT) ^ c1 ^ k0,
            p1 & _MASK,
            (p0 >> _SHIFT) ^ c3 ^ k1,
            p0 & _MASK,
        )
    return c0, c1, c2, c3


def _key(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _uniform_pairs(words):
    """Two 53-bit uniforms in (0, 1) from four 32-bit words."""
    a, b, c, d = words
    scale = 1.0 / 9007199254740992.0  # 2**-53
    u1 = ((a >> np.uint64(5)) * np.uint64(67108864) + (b >> np.uint64(6))).astype(np.float64)
    u2 = ((c >> np.uint64(5)) * np.uint64(67108864) + (d >> np.uint64(6))).astype(np.float64)
    # shift by half an ulp so 0 is never returned
    return (u1 + 0.5) * scale, (u2 + 0.5) * scale


def uniforms(seed, tag, c0, c1=0, c2=0, n=1):
    """Uniforms on (0, 1) with trailing axis of length ``n``."""
    key = _key(seed)
    c0, c1, c2 = np.broadcast_arrays(np.asarray(c0), np.asarray(c1), np.asarray(c2))
    lanes = (n + 1) // 2
    out = np.empty(c0.shape + (2 * lanes,))
    for lane in range(lanes):
        c3 = (int(tag) << 16) | lane
        u1, u2 = _uniform_pairs(philox4x32((c0, c1, c2, c3), key))
        out[..., 2 * lane] = u1
        out[..., 2 * lane + 1] = u2
    return out[..., :n]


def normals(seed, tag, c0, c1=0, c2=0, n=1):
    """Standard normals (Box-Muller) with trailing axis of length ``n``."""
    key = _key(seed)
    c0, c1, c2 = np.broadcast_arrays(np.asarray(c0), np.asarray(c1), np.asarray(c2))
    lanes = (n + 1) // 2
    out = np.empty(c0.shape + (2 * lanes,))
    for lane in range(lanes):
        c3 = (int(tag) << 16) | lane
        u1, u2 = _uniform_pairs(philox4x32((c0, c1, c2, c3), key))
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        out[..., 2 * lane] = rad * np.cos(ang)
        out[..., 2 * lane + 1] = rad * np.sin(ang)
    return out[..., :n]
