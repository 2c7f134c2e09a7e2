"""64-bit voxel keys.

Each signed voxel index in ``[-2**20, 2**20)`` is zigzag-encoded to 21 bits
and packed at bit offsets 0 (x), 21 (y) and 42 (z).  Bit 63 stays zero.
"""

from __future__ import annotations

import numpy as np

INDEX_BITS = 21
INDEX_LIMIT = 1 << (INDEX_BITS - 1)
_MASK = np.uint64((1 << INDEX_BITS) - 1)


class VoxelRangeError(ValueError):
    pass


def voxel_indices(points, voxel):
    """Floor-division voxel indices, (N, 3) int64."""
    pts = np.asarray(points, dtype=np.float64)
    return np.floor(pts / voxel).astype(np.int64)


def _zigzag(i):
    i = np.asarray(i, dtype=np.int64)
    return ((i << 1) ^ (i >> 63)).astype(np.uint64)


def _unzigzag(z):
    z = np.asarray(z, dtype=np.uint64)
    return ((z >> np.uint64(1)).astype(np.int64)) ^ (-(z & np.uint64(1)).astype(np.int64))


def pack_indices(idx):
    """Pack (N, 3) signed indices into uint64 keys."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < -INDEX_LIMIT or idx.max() >= INDEX_LIMIT):
        bad = np.argwhere((idx < -INDEX_LIMIT) | (idx >= INDEX_LIMIT))[0]
        raise VoxelRangeError(
            f"voxel index {idx[bad[0]].tolist()} outside [-2^20, 2^20) on axis {bad[1]}"
        )
    zz = _zigzag(idx)
    return zz[..., 0] | (zz[..., 1] << np.uint64(21)) | (zz[..., 2] << np.uint64(42))


def unpack_keys(keys):
    keys = np.asarray(keys, dtype=np.uint64)
    out = np.empty(keys.shape + (3,), dtype=np.int64)
    out[..., 0] = _unzigzag(keys & _MASK)
    out[..., 1] = _unzigzag((keys >> np.uint64(21)) & _MASK)
    out[..., 2] = _unzigzag((keys >> np.uint64(42)) & _MASK)
    return out


def point_keys(points, voxel):
    return pack_indices(voxel_indices(points, voxel))


def mix64(keys):
    """splitmix64 finaliser; a fixed bijection on uint64 used for unbiased ordering."""
    z = np.asarray(keys, dtype=np.uint64).copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z
