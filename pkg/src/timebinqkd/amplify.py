"""Privacy amplification: Toeplitz universal hashing over GF(2).

The hash of an n-bit key down to ``out_len`` bits multiplies by the
Toeplitz matrix T[i, j] = seed[i - j + n - 1], where the seed is a bit
string of length n + out_len - 1 holding the matrix's first column and
first row. Each output row is one lag of the GF(2) convolution of key
and seed, so the whole hash is computed as a single big-integer product:
bits are spread one per 32-bit limb, making every convolution
coefficient (at most n, far below 2**32) land in its own limb with no
carry between lags, and the coefficient parities are read back off the
low bit of each limb. GMP's multiplication is subquadratic, which keeps
megabit keys at interactive speed where the naive matrix product would
take hours.
"""

from __future__ import annotations

import gmpy2
import numpy as np

__all__ = [
    "toeplitz_hash",
    "toeplitz_hash_naive",
    "random_seed",
    "seed_length",
]

_LIMB_BITS = 32
_MAX_KEY_BITS = 2 ** _LIMB_BITS - 1


def seed_length(n: int, out_len: int) -> int:
    """Seed bits required to hash n bits down to out_len bits."""
    return n + out_len - 1


def _as_bits(arr, name: str) -> np.ndarray:
    bits = np.ascontiguousarray(arr, dtype=np.uint8)
    if bits.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if bits.size and bits.max() > 1:
        raise ValueError(f"{name} must contain only 0/1 values")
    return bits


def _check_dims(n: int, seed_len: int, out_len: int) -> None:
    if out_len < 0:
        raise ValueError("output length must be nonnegative")
    if out_len > n:
        raise ValueError(f"cannot stretch {n} bits to {out_len}")
    if n > _MAX_KEY_BITS:
        raise ValueError("key too long for limb-packed convolution")
    if out_len and seed_len != seed_length(n, out_len):
        raise ValueError(
            f"seed must have {seed_length(n, out_len)} bits for n={n}, "
            f"out_len={out_len}; got {seed_len}"
        )


def _spread(bits: np.ndarray) -> gmpy2.mpz:
    """Pack one bit per 32-bit limb, little-endian, into an integer."""
    limbs = bits.astype(np.uint32)
    return gmpy2.mpz(int.from_bytes(limbs.tobytes(), "little"))


def toeplitz_hash(key, seed, out_len: int) -> np.ndarray:
    """Hash ``key`` down to ``out_len`` bits with the Toeplitz matrix
    defined by ``seed``. Both inputs are 0/1 arrays."""
    key_bits = _as_bits(key, "key")
    seed_bits = _as_bits(seed, "seed")
    n = key_bits.size
    _check_dims(n, seed_bits.size, out_len)
    if out_len == 0:
        return np.zeros(0, dtype=np.uint8)

    product = _spread(key_bits) * _spread(seed_bits)
    # lags n-1 .. n+out_len-2 of the convolution are the output rows
    n_limbs = n + seed_bits.size - 1
    raw = int(product).to_bytes(n_limbs * (_LIMB_BITS // 8) + 8, "little")
    limbs = np.frombuffer(raw, dtype=np.uint32)
    return (limbs[n - 1 : n - 1 + out_len] & 1).astype(np.uint8)


def toeplitz_hash_naive(key, seed, out_len: int) -> np.ndarray:
    """Reference O(n*out_len) matrix-vector product. Test oracle only."""
    key_bits = _as_bits(key, "key")
    seed_bits = _as_bits(seed, "seed")
    n = key_bits.size
    _check_dims(n, seed_bits.size, out_len)
    if out_len == 0:
        return np.zeros(0, dtype=np.uint8)
    rows = np.arange(out_len)[:, None]
    cols = np.arange(n)[None, :]
    matrix = seed_bits[rows - cols + n - 1]
    return ((matrix @ key_bits.astype(np.int64)) & 1).astype(np.uint8)


def random_seed(rng: np.random.Generator, n: int, out_len: int) -> np.ndarray:
    """Draw a fresh uniform Toeplitz seed for an (n -> out_len) hash."""
    return rng.integers(0, 2, size=seed_length(n, out_len), dtype=np.uint8)
