"""Interactive error correction (Cascade) and the correctness check.

The receiver drives: it asks the sender for parities of segments of the
sifted key and flips its own bits where binary search pins a mismatch.
Every disclosed parity is one bit of leakage, counted identically on
both sides, and that count is what the key-length budget subtracts as
lambda_EC when measured leakage is used.

Both parties derive the same pass permutations from a shared seed, so a
parity query travels as a compact (pass, lo, hi) range in permuted
order rather than an index list. Pass 1 keeps natural order; later
passes shuffle and double the block size. Whole-pass parity disclosures
are batched into one query; within passes 2+, the last block's parity
is inferred from the key's total parity (known after pass 1) instead of
being disclosed.

``verify`` backs epsilon_cor: both sides hash their key with a shared
random Toeplitz matrix and compare short tags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .amplify import random_seed, toeplitz_hash

__all__ = [
    "ReconcileResult",
    "initial_block_size",
    "verify_tag_length",
    "make_permutations",
    "answer_parities",
    "CascadeReceiver",
    "cascade",
    "hash_tag",
    "verify",
]

PASSES = 4

ParityOracle = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ReconcileResult:
    """Outcome of one reconciliation: the corrected key, the exact number
    of parity bits disclosed, the number of query round trips, and
    whether the corrected key matched."""

    key: np.ndarray
    leak_bits: int
    rounds: int
    verified: bool


def initial_block_size(qber_hint: float) -> int:
    if not 0.0 < qber_hint < 0.25:
        raise ValueError(f"qber_hint must be in (0, 0.25), got {qber_hint}")
    return math.ceil(0.73 / qber_hint)


def verify_tag_length(eps_cor: float) -> int:
    if not 0.0 < eps_cor < 1.0:
        raise ValueError("eps_cor must be in (0, 1)")
    return math.ceil(math.log2(2.0 / eps_cor))


def make_permutations(n: int, seed: int, passes: int = PASSES) -> list[np.ndarray]:
    """Pass permutations shared by both parties: identity first, then
    seeded shuffles."""
    rng = np.random.Generator(np.random.Philox(seed))
    perms = [np.arange(n, dtype=np.int64)]
    for _ in range(passes - 1):
        perms.append(rng.permutation(n).astype(np.int64))
    return perms


def answer_parities(key: np.ndarray, perms: list[np.ndarray], queries: np.ndarray) -> np.ndarray:
    """Sender side of one query batch: parities of key[perm[p][lo:hi]]
    for each (p, lo, hi) row."""
    out = np.empty(len(queries), dtype=np.uint8)
    for i, (p, lo, hi) in enumerate(queries):
        out[i] = np.bitwise_xor.reduce(key[perms[p][lo:hi]])
    return out


class CascadeReceiver:
    """Receiver-side Cascade over an arbitrary parity oracle.

    The oracle is called with an (m, 3) int64 array of (pass, lo, hi)
    rows and must return m parity bits; each returned bit counts as one
    leaked bit, each call as one round trip.
    """

    def __init__(
        self,
        key: np.ndarray,
        qber_hint: float,
        seed: int,
        oracle: ParityOracle,
        passes: int = PASSES,
    ):
        self.key = np.ascontiguousarray(key, dtype=np.uint8).copy()
        self.n = self.key.size
        if self.n < 64:
            raise ValueError(f"key too short to reconcile ({self.n} bits, need >= 64)")
        if passes < 1:
            raise ValueError("need at least one pass")
        k1 = initial_block_size(qber_hint)
        self.block_sizes = [min(k1 * 2 ** i, self.n) for i in range(passes)]
        self.perms = make_permutations(self.n, seed, passes)
        self.inv_pos = [np.argsort(perm) for perm in self.perms]
        self.oracle = oracle
        self.leak_bits = 0
        self.rounds = 0
        self.flip_count = 0
        # per pass: Alice's block parities (with known-mask), Bob's block
        # parities, block boundaries
        self.alice_par: list[np.ndarray] = []
        self.known: list[np.ndarray] = []
        self.bob_par: list[np.ndarray] = []
        self.starts: list[np.ndarray] = []
        self.total_parity: int | None = None

    def _ask(self, queries: np.ndarray) -> np.ndarray:
        queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        bits = np.asarray(self.oracle(queries), dtype=np.uint8)
        if bits.shape != (len(queries),):
            raise ValueError("parity oracle returned a malformed batch")
        self.leak_bits += len(queries)
        self.rounds += 1
        return bits

    def _segment_parity(self, p: int, lo: int, hi: int) -> int:
        return int(np.bitwise_xor.reduce(self.key[self.perms[p][lo:hi]]))

    def _open_pass(self, p: int) -> None:
        k = self.block_sizes[p]
        starts = np.arange(0, self.n, k, dtype=np.int64)
        bounds = np.append(starts, self.n)
        n_blocks = len(starts)
        permuted = self.key[self.perms[p]]
        bob = np.bitwise_xor.reduceat(permuted, starts).astype(np.uint8)

        alice = np.zeros(n_blocks, dtype=np.uint8)
        known = np.zeros(n_blocks, dtype=bool)
        if p == 0 or self.total_parity is None:
            queries = np.column_stack(
                [np.full(n_blocks, p), bounds[:-1], bounds[1:]]
            )
            alice[:] = self._ask(queries)
            known[:] = True
        else:
            # total parity is pinned after pass 1, so the last block of a
            # full partition comes for free
            if n_blocks > 1:
                queries = np.column_stack(
                    [np.full(n_blocks - 1, p), bounds[:-2], bounds[1:-1]]
                )
                alice[:-1] = self._ask(queries)
            alice[-1] = self.total_parity ^ int(np.bitwise_xor.reduce(alice[:-1], initial=0))
            known[:] = True
        if p == 0:
            self.total_parity = int(np.bitwise_xor.reduce(alice))

        self.alice_par.append(alice)
        self.known.append(known)
        self.bob_par.append(bob)
        self.starts.append(bounds)

    def _odd_blocks(self) -> list[tuple[int, int]]:
        found = []
        for p in range(len(self.alice_par)):
            mism = self.known[p] & (self.alice_par[p] != self.bob_par[p])
            ids = np.nonzero(mism)[0]
            for b in ids:
                found.append((p, int(b)))
        return found

    def _flip(self, index: int) -> None:
        self.key[index] ^= 1
        self.flip_count += 1
        for p in range(len(self.alice_par)):
            pos = self.inv_pos[p][index]
            blk = int(np.searchsorted(self.starts[p], pos, side="right") - 1)
            self.bob_par[p][blk] ^= 1

    def _search_wave(self, p: int, blocks: list[int]) -> None:
        """Binary-search every listed odd block of pass ``p`` in lockstep.

        Blocks of one pass cover disjoint ranges, so their searches never
        interact and each step of every active search can share a single
        oracle call. The disclosed bits are exactly those a one-at-a-time
        search would use: ceil(log2(width)) per block.
        """
        lows = [int(self.starts[p][b]) for b in blocks]
        highs = [int(self.starts[p][b + 1]) for b in blocks]
        while True:
            active = [i for i in range(len(blocks)) if highs[i] - lows[i] > 1]
            if not active:
                break
            mids = [(lows[i] + highs[i]) // 2 for i in active]
            answers = self._ask([(p, lows[i], m) for i, m in zip(active, mids)])
            for i, mid, a_left in zip(active, mids, answers):
                if int(a_left) != self._segment_parity(p, lows[i], mid):
                    highs[i] = mid
                else:
                    lows[i] = mid
        for lo in lows:
            self._flip(int(self.perms[p][lo]))

    def run(self) -> np.ndarray:
        for p in range(len(self.block_sizes)):
            self._open_pass(p)
            while True:
                odd = self._odd_blocks()
                if not odd:
                    break
                if self.flip_count > self.n:
                    # honest answers let each flip fix one true mismatch, so
                    # more flips than bits means the parities are inconsistent
                    # with any key (corrupt or hostile sender); stop here and
                    # let the correctness tag reject the result
                    return self.key
                # cheapest first: the pass holding the smallest odd block
                # costs the fewest disclosures per defect
                p_sel, _ = min(
                    odd, key=lambda pb: self.starts[pb[0]][pb[1] + 1] - self.starts[pb[0]][pb[1]]
                )
                self._search_wave(p_sel, [b for pp, b in odd if pp == p_sel])
        return self.key


def cascade(
    alice_key: np.ndarray,
    bob_key: np.ndarray,
    qber_hint: float,
    rng_seed: int,
    passes: int = PASSES,
) -> ReconcileResult:
    """Reconcile ``bob_key`` against ``alice_key`` in-process.

    This is the two-party protocol with the wire collapsed to a function
    call; the session layer runs the same receiver over framed messages.
    ``verified`` reports whether the corrected key actually equals the
    sender's (checked directly here, by tag comparison in a session).
    """
    a = np.ascontiguousarray(alice_key, dtype=np.uint8)
    b = np.ascontiguousarray(bob_key, dtype=np.uint8)
    if a.size != b.size:
        raise ValueError(f"key length mismatch: {a.size} != {b.size}")
    perms_holder: dict[int, list[np.ndarray]] = {}

    def oracle(queries: np.ndarray) -> np.ndarray:
        if not perms_holder:
            perms_holder[0] = make_permutations(a.size, rng_seed, passes)
        return answer_parities(a, perms_holder[0], queries)

    receiver = CascadeReceiver(b, qber_hint, rng_seed, oracle, passes)
    corrected = receiver.run()
    return ReconcileResult(
        key=corrected,
        leak_bits=receiver.leak_bits,
        rounds=receiver.rounds,
        verified=bool(np.array_equal(corrected, a)),
    )


def hash_tag(key: np.ndarray, eps_cor: float, shared_seed: int) -> np.ndarray:
    """One party's correctness tag: a Toeplitz hash of the key under a
    seed expanded from ``shared_seed``."""
    k = np.ascontiguousarray(key, dtype=np.uint8)
    tag_len = verify_tag_length(eps_cor)
    if k.size < tag_len:
        raise ValueError(f"key too short to tag ({k.size} bits < {tag_len})")
    rng = np.random.Generator(np.random.Philox(shared_seed))
    seed_bits = random_seed(rng, k.size, tag_len)
    return toeplitz_hash(k, seed_bits, tag_len)


def verify(
    key_a: np.ndarray,
    key_b: np.ndarray,
    eps_cor: float,
    shared_seed: int,
) -> tuple[bool, np.ndarray]:
    """Compare universal-hash tags of the two keys.

    Equal keys always verify; unequal keys slip through with probability
    at most 2**-tag_len <= eps_cor/2 per the Toeplitz family bound.
    Returns (flag, tag of key_a).
    """
    a = np.ascontiguousarray(key_a, dtype=np.uint8)
    b = np.ascontiguousarray(key_b, dtype=np.uint8)
    if a.size != b.size:
        raise ValueError(f"key length mismatch: {a.size} != {b.size}")
    tag_a = hash_tag(a, eps_cor, shared_seed)
    tag_b = hash_tag(b, eps_cor, shared_seed)
    return bool(np.array_equal(tag_a, tag_b)), tag_a
