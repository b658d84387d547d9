"""Byte-exact wire format for the two-party protocol.

Frame layout: magic ``QKD1``, u8 message type, u8 flags (zero), u32
little-endian payload length, payload bytes, u32 little-endian CRC32 of
the payload. All multi-byte integers are little-endian. Bit strings are
packed LSB-first. Sorted index lists travel as unsigned LEB128 varints
of consecutive deltas (first value absolute).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

__all__ = [
    "WireError",
    "MessageType",
    "AbortReason",
    "PROTOCOL_VERSION",
    "Hello",
    "Detections",
    "BasisReveal",
    "XBitsReveal",
    "QberSample",
    "EcParity",
    "EcDone",
    "Verify",
    "PaSeed",
    "Abort",
    "pack_frame",
    "encode_message",
    "decode_message",
    "FrameDecoder",
    "pack_bits",
    "unpack_bits",
    "leb128_encode",
    "leb128_decode",
]

MAGIC = b"QKD1"
PROTOCOL_VERSION = 1
_HEADER_LEN = 4 + 1 + 1 + 4
_MAX_PAYLOAD = 1 << 28


class WireError(ValueError):
    """Malformed frame or payload."""


class MessageType(IntEnum):
    HELLO = 1
    DETECTIONS = 2
    BASIS_REVEAL = 3
    X_BITS_REVEAL = 4
    QBER_SAMPLE = 5
    EC_PARITY = 6
    EC_DONE = 7
    VERIFY = 8
    PA_SEED = 9
    ABORT = 10


class AbortReason(IntEnum):
    CONFIG = 1
    TIMEOUT = 2
    CORRECTNESS = 3
    INSUFFICIENT_KEY = 4
    PROTOCOL = 5


def pack_bits(bits) -> bytes:
    arr = np.ascontiguousarray(bits, dtype=np.uint8)
    return np.packbits(arr, bitorder="little").tobytes()


def unpack_bits(data: bytes, count: int) -> np.ndarray:
    need = (count + 7) // 8
    if len(data) < need:
        raise WireError("bit block shorter than declared count")
    arr = np.frombuffer(data[:need], dtype=np.uint8)
    return np.unpackbits(arr, count=count, bitorder="little").astype(np.uint8)


def leb128_encode(values) -> bytes:
    v = np.ascontiguousarray(values, dtype=np.uint64)
    if v.size == 0:
        return b""
    nbytes = np.ones(v.size, dtype=np.int64)
    tmp = v >> np.uint64(7)
    while tmp.any():
        nbytes += tmp > 0
        tmp = tmp >> np.uint64(7)
    ends = np.cumsum(nbytes)
    starts = ends - nbytes
    out = np.zeros(int(ends[-1]), dtype=np.uint8)
    for k in range(int(nbytes.max())):
        mask = nbytes > k
        chunk = (v[mask] >> np.uint64(7 * k)) & np.uint64(0x7F)
        cont = (nbytes[mask] > k + 1).astype(np.uint8) << 7
        out[starts[mask] + k] = chunk.astype(np.uint8) | cont
    return out.tobytes()


def leb128_decode(data: bytes, count: int) -> tuple[np.ndarray, int]:
    """Decode ``count`` varints; returns (values, bytes consumed)."""
    if count == 0:
        return np.zeros(0, dtype=np.uint64), 0
    buf = np.frombuffer(data, dtype=np.uint8)
    stops = np.nonzero((buf & 0x80) == 0)[0]
    if len(stops) < count:
        raise WireError("truncated varint block")
    ends = stops[:count]
    starts = np.empty(count, dtype=np.int64)
    starts[0] = 0
    starts[1:] = ends[:-1] + 1
    lengths = ends - starts + 1
    if int(lengths.max()) > 10:
        raise WireError("varint too long")
    values = np.zeros(count, dtype=np.uint64)
    for k in range(int(lengths.max())):
        mask = lengths > k
        part = buf[starts[mask] + k].astype(np.uint64) & np.uint64(0x7F)
        values[mask] |= part << np.uint64(7 * k)
    return values, int(ends[-1]) + 1


def _encode_indices(indices) -> bytes:
    idx = np.ascontiguousarray(indices, dtype=np.uint64)
    if idx.size and np.any(np.diff(idx.astype(np.int64)) <= 0):
        raise WireError("indices must be strictly increasing")
    deltas = np.empty_like(idx)
    if idx.size:
        deltas[0] = idx[0]
        deltas[1:] = idx[1:] - idx[:-1]
    return leb128_encode(deltas)


def _decode_indices(data: bytes, count: int) -> tuple[np.ndarray, int]:
    deltas, used = leb128_decode(data, count)
    values = np.cumsum(deltas.astype(np.uint64), dtype=np.uint64)
    if count > 1 and np.any(deltas[1:] == 0):
        raise WireError("indices must be strictly increasing")
    return values, used


def _u64(value: int) -> bytes:
    return int(value).to_bytes(8, "little")


def _read_u64(data: bytes, offset: int) -> tuple[int, int]:
    if len(data) < offset + 8:
        raise WireError("truncated integer field")
    return int.from_bytes(data[offset : offset + 8], "little"), offset + 8


@dataclass(frozen=True)
class Hello:
    version: int
    digest: bytes

    TYPE = MessageType.HELLO

    def encode(self) -> bytes:
        if len(self.digest) != 32:
            raise WireError("digest must be 32 bytes")
        return bytes([self.version]) + self.digest

    @classmethod
    def decode(cls, payload: bytes) -> "Hello":
        if len(payload) != 33:
            raise WireError("bad HELLO length")
        return cls(version=payload[0], digest=payload[1:])


@dataclass(frozen=True, eq=False)
class Detections:
    """Receiver's detected slot indices (sorted) and his basis per event."""

    slots: np.ndarray
    basis: np.ndarray

    TYPE = MessageType.DETECTIONS

    def encode(self) -> bytes:
        if self.slots.size != self.basis.size:
            raise WireError("slots/basis size mismatch")
        return _u64(self.slots.size) + _encode_indices(self.slots) + pack_bits(self.basis)

    @classmethod
    def decode(cls, payload: bytes) -> "Detections":
        count, off = _read_u64(payload, 0)
        slots, used = _decode_indices(payload[off:], count)
        off += used
        basis = unpack_bits(payload[off:], count)
        return cls(slots=slots, basis=basis)


@dataclass(frozen=True, eq=False)
class BasisReveal:
    """Sender's basis and intensity choice for each reported detection."""

    basis: np.ndarray
    intensity: np.ndarray

    TYPE = MessageType.BASIS_REVEAL

    def encode(self) -> bytes:
        if self.basis.size != self.intensity.size:
            raise WireError("basis/intensity size mismatch")
        return _u64(self.basis.size) + pack_bits(self.basis) + pack_bits(self.intensity)

    @classmethod
    def decode(cls, payload: bytes) -> "BasisReveal":
        count, off = _read_u64(payload, 0)
        span = (count + 7) // 8
        basis = unpack_bits(payload[off : off + span], count)
        intensity = unpack_bits(payload[off + span :], count)
        return cls(basis=basis, intensity=intensity)


@dataclass(frozen=True, eq=False)
class XBitsReveal:
    """Bit values at every monitor-basis sifted position, in sift order."""

    bits: np.ndarray

    TYPE = MessageType.X_BITS_REVEAL

    def encode(self) -> bytes:
        return _u64(self.bits.size) + pack_bits(self.bits)

    @classmethod
    def decode(cls, payload: bytes) -> "XBitsReveal":
        count, off = _read_u64(payload, 0)
        return cls(bits=unpack_bits(payload[off:], count))


@dataclass(frozen=True, eq=False)
class QberSample:
    """Sacrificial sample: positions in key-basis sift order plus values."""

    indices: np.ndarray
    bits: np.ndarray

    TYPE = MessageType.QBER_SAMPLE

    def encode(self) -> bytes:
        if self.indices.size != self.bits.size:
            raise WireError("indices/bits size mismatch")
        return _u64(self.indices.size) + _encode_indices(self.indices) + pack_bits(self.bits)

    @classmethod
    def decode(cls, payload: bytes) -> "QberSample":
        count, off = _read_u64(payload, 0)
        indices, used = _decode_indices(payload[off:], count)
        return cls(indices=indices, bits=unpack_bits(payload[off + used :], count))


@dataclass(frozen=True, eq=False)
class EcParity:
    """One error-correction exchange. A request carries (pass, lo, hi)
    query rows and no parities; the response echoes the round number and
    carries the parity bits."""

    round: int
    queries: np.ndarray
    parities: np.ndarray

    TYPE = MessageType.EC_PARITY

    def encode(self) -> bytes:
        q = np.ascontiguousarray(self.queries, dtype=np.int64).reshape(-1, 3)
        if np.any(q < 0):
            raise WireError("negative query field")
        head = _u64(self.round) + _u64(q.shape[0])
        body = leb128_encode(q.astype(np.uint64).ravel())
        tail = _u64(self.parities.size) + pack_bits(self.parities)
        return head + body + tail

    @classmethod
    def decode(cls, payload: bytes) -> "EcParity":
        rnd, off = _read_u64(payload, 0)
        n_q, off = _read_u64(payload, off)
        flat, used = leb128_decode(payload[off:], n_q * 3)
        off += used
        queries = flat.astype(np.int64).reshape(-1, 3)
        n_p, off = _read_u64(payload, off)
        parities = unpack_bits(payload[off:], n_p)
        return cls(round=rnd, queries=queries, parities=parities)


@dataclass(frozen=True)
class EcDone:
    """End of reconciliation: total parity bits disclosed plus the
    receiver's per-intensity correction counts (the measured key-basis
    error tally both reports carry)."""

    leak_bits: int
    m_z_mu1: int
    m_z_mu2: int

    TYPE = MessageType.EC_DONE

    def encode(self) -> bytes:
        return _u64(self.leak_bits) + _u64(self.m_z_mu1) + _u64(self.m_z_mu2)

    @classmethod
    def decode(cls, payload: bytes) -> "EcDone":
        leak, off = _read_u64(payload, 0)
        m1, off = _read_u64(payload, off)
        m2, off = _read_u64(payload, off)
        if off != len(payload):
            raise WireError("bad EC_DONE length")
        return cls(leak_bits=leak, m_z_mu1=m1, m_z_mu2=m2)


@dataclass(frozen=True, eq=False)
class Verify:
    """Correctness tag: hash seed plus the receiver's tag bits."""

    seed: int
    tag: np.ndarray

    TYPE = MessageType.VERIFY

    def encode(self) -> bytes:
        return _u64(self.seed) + _u64(self.tag.size) + pack_bits(self.tag)

    @classmethod
    def decode(cls, payload: bytes) -> "Verify":
        seed, off = _read_u64(payload, 0)
        count, off = _read_u64(payload, off)
        return cls(seed=seed, tag=unpack_bits(payload[off:], count))


@dataclass(frozen=True, eq=False)
class PaSeed:
    """Privacy-amplification parameters: output length and the full
    Toeplitz seed bit string (length n + out_len - 1), sent verbatim."""

    out_len: int
    seed_bits: np.ndarray

    TYPE = MessageType.PA_SEED

    def encode(self) -> bytes:
        return _u64(self.out_len) + _u64(self.seed_bits.size) + pack_bits(self.seed_bits)

    @classmethod
    def decode(cls, payload: bytes) -> "PaSeed":
        out_len, off = _read_u64(payload, 0)
        count, off = _read_u64(payload, off)
        return cls(out_len=out_len, seed_bits=unpack_bits(payload[off:], count))


@dataclass(frozen=True)
class Abort:
    reason: AbortReason

    TYPE = MessageType.ABORT

    def encode(self) -> bytes:
        return bytes([int(self.reason)])

    @classmethod
    def decode(cls, payload: bytes) -> "Abort":
        if len(payload) != 1:
            raise WireError("bad ABORT length")
        try:
            return cls(reason=AbortReason(payload[0]))
        except ValueError as exc:
            raise WireError(f"unknown abort reason {payload[0]}") from exc


_DECODERS = {
    cls.TYPE: cls
    for cls in (
        Hello, Detections, BasisReveal, XBitsReveal, QberSample,
        EcParity, EcDone, Verify, PaSeed, Abort,
    )
}

Message = (
    Hello | Detections | BasisReveal | XBitsReveal | QberSample
    | EcParity | EcDone | Verify | PaSeed | Abort
)


def encode_message(msg) -> bytes:
    return pack_frame(msg.TYPE, msg.encode())


def decode_message(mtype: int, payload: bytes):
    try:
        cls = _DECODERS[MessageType(mtype)]
    except (ValueError, KeyError):
        raise WireError(f"unknown message type {mtype}") from None
    return cls.decode(payload)


def pack_frame(mtype: int, payload: bytes) -> bytes:
    if len(payload) > _MAX_PAYLOAD:
        raise WireError("payload too large")
    header = MAGIC + bytes([int(mtype), 0]) + len(payload).to_bytes(4, "little")
    return header + payload + (zlib.crc32(payload) & 0xFFFFFFFF).to_bytes(4, "little")


class FrameDecoder:
    """Incremental frame parser for a reliable byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def next_frame(self):
        """Pop one (type, payload) if a full frame is buffered, else None."""
        if len(self._buf) < _HEADER_LEN:
            return None
        if bytes(self._buf[:4]) != MAGIC:
            raise WireError("bad frame magic")
        mtype = self._buf[4]
        flags = self._buf[5]
        if flags != 0:
            raise WireError("nonzero frame flags")
        length = int.from_bytes(self._buf[6:10], "little")
        if length > _MAX_PAYLOAD:
            raise WireError("frame payload too large")
        total = _HEADER_LEN + length + 4
        if len(self._buf) < total:
            return None
        payload = bytes(self._buf[_HEADER_LEN : _HEADER_LEN + length])
        crc = int.from_bytes(self._buf[_HEADER_LEN + length : total], "little")
        if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
            raise WireError("frame CRC mismatch")
        del self._buf[:total]
        return mtype, payload
