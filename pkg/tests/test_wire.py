import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timebinqkd import wire


class TestLeb128:
    def test_known_encodings(self):
        assert wire.leb128_encode([0]) == b"\x00"
        assert wire.leb128_encode([127]) == b"\x7f"
        assert wire.leb128_encode([128]) == b"\x80\x01"
        assert wire.leb128_encode([300]) == b"\xac\x02"
        assert wire.leb128_encode([]) == b""

    def test_decode_known(self):
        vals, used = wire.leb128_decode(b"\x7f\x80\x01\xac\x02", 3)
        assert vals.tolist() == [127, 128, 300]
        assert used == 5

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(min_value=0, max_value=2 ** 64 - 1), max_size=40))
    def test_round_trip(self, values):
        blob = wire.leb128_encode(values)
        out, used = wire.leb128_decode(blob + b"trailing", len(values))
        assert out.tolist() == values
        assert used == len(blob)

    def test_truncated_raises(self):
        with pytest.raises(wire.WireError):
            wire.leb128_decode(b"\x80\x80", 1)


class TestBits:
    def test_lsb_first(self):
        assert wire.pack_bits([1, 0, 0, 0, 0, 0, 0, 0]) == b"\x01"
        assert wire.pack_bits([0, 0, 0, 0, 0, 0, 0, 1]) == b"\x80"
        assert wire.pack_bits([1, 1, 0]) == b"\x03"

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        for n in (0, 1, 7, 8, 9, 63, 64, 1000):
            bits = rng.integers(0, 2, n, dtype=np.uint8)
            assert np.array_equal(wire.unpack_bits(wire.pack_bits(bits), n), bits)

    def test_short_block_raises(self):
        with pytest.raises(wire.WireError):
            wire.unpack_bits(b"\x00", 9)


class TestFrame:
    def test_golden_bytes(self):
        frame = wire.pack_frame(2, b"ab")
        expected = (
            b"QKD1"
            + bytes([2, 0])
            + (2).to_bytes(4, "little")
            + b"ab"
            + (zlib.crc32(b"ab") & 0xFFFFFFFF).to_bytes(4, "little")
        )
        assert frame == expected

    def test_incremental_decode(self):
        frame = wire.pack_frame(3, b"payload")
        dec = wire.FrameDecoder()
        for i in range(len(frame) - 1):
            dec.feed(frame[i : i + 1])
            assert dec.next_frame() is None
        dec.feed(frame[-1:])
        mtype, payload = dec.next_frame()
        assert mtype == 3
        assert payload == b"payload"
        assert dec.next_frame() is None

    def test_two_frames_one_feed(self):
        dec = wire.FrameDecoder()
        dec.feed(wire.pack_frame(1, b"x") + wire.pack_frame(2, b"y"))
        assert dec.next_frame() == (1, b"x")
        assert dec.next_frame() == (2, b"y")

    def test_bad_magic(self):
        dec = wire.FrameDecoder()
        dec.feed(b"NOPE" + bytes(20))
        with pytest.raises(wire.WireError):
            dec.next_frame()

    def test_crc_mismatch(self):
        frame = bytearray(wire.pack_frame(2, b"ab"))
        frame[-1] ^= 0xFF
        dec = wire.FrameDecoder()
        dec.feed(bytes(frame))
        with pytest.raises(wire.WireError):
            dec.next_frame()

    def test_nonzero_flags(self):
        frame = bytearray(wire.pack_frame(2, b"ab"))
        frame[5] = 1
        dec = wire.FrameDecoder()
        dec.feed(bytes(frame))
        with pytest.raises(wire.WireError):
            dec.next_frame()


def roundtrip(msg):
    frame = wire.encode_message(msg)
    dec = wire.FrameDecoder()
    dec.feed(frame)
    mtype, payload = dec.next_frame()
    return wire.decode_message(mtype, payload)


class TestMessages:
    def test_hello(self):
        msg = roundtrip(wire.Hello(version=1, digest=bytes(range(32))))
        assert msg.version == 1
        assert msg.digest == bytes(range(32))

    def test_hello_bad_digest_length(self):
        with pytest.raises(wire.WireError):
            wire.Hello(version=1, digest=b"short").encode()

    def test_detections(self):
        slots = np.array([3, 10, 11, 500, 100000], dtype=np.uint64)
        basis = np.array([0, 1, 1, 0, 1], dtype=np.uint8)
        msg = roundtrip(wire.Detections(slots=slots, basis=basis))
        assert np.array_equal(msg.slots, slots)
        assert np.array_equal(msg.basis, basis)

    def test_detections_must_increase(self):
        slots = np.array([5, 5], dtype=np.uint64)
        basis = np.zeros(2, dtype=np.uint8)
        with pytest.raises(wire.WireError):
            wire.Detections(slots=slots, basis=basis).encode()

    def test_detections_empty(self):
        msg = roundtrip(
            wire.Detections(slots=np.zeros(0, np.uint64), basis=np.zeros(0, np.uint8))
        )
        assert msg.slots.size == 0

    def test_basis_reveal(self):
        rng = np.random.default_rng(1)
        basis = rng.integers(0, 2, 37, dtype=np.uint8)
        intensity = rng.integers(0, 2, 37, dtype=np.uint8)
        msg = roundtrip(wire.BasisReveal(basis=basis, intensity=intensity))
        assert np.array_equal(msg.basis, basis)
        assert np.array_equal(msg.intensity, intensity)

    def test_x_bits(self):
        bits = np.array([1, 0, 1, 1], dtype=np.uint8)
        assert np.array_equal(roundtrip(wire.XBitsReveal(bits=bits)).bits, bits)

    def test_qber_sample(self):
        idx = np.array([2, 30, 31, 900], dtype=np.uint64)
        bits = np.array([1, 1, 0, 0], dtype=np.uint8)
        msg = roundtrip(wire.QberSample(indices=idx, bits=bits))
        assert np.array_equal(msg.indices, idx)
        assert np.array_equal(msg.bits, bits)

    def test_ec_parity(self):
        q = np.array([[0, 0, 64], [2, 128, 256]], dtype=np.int64)
        msg = roundtrip(wire.EcParity(round=7, queries=q, parities=np.zeros(0, np.uint8)))
        assert msg.round == 7
        assert np.array_equal(msg.queries, q)
        assert msg.parities.size == 0
        resp = roundtrip(
            wire.EcParity(
                round=7,
                queries=np.zeros((0, 3), np.int64),
                parities=np.array([1, 0, 1], np.uint8),
            )
        )
        assert resp.queries.shape == (0, 3)
        assert resp.parities.tolist() == [1, 0, 1]

    def test_ec_done(self):
        msg = roundtrip(wire.EcDone(leak_bits=1234, m_z_mu1=56, m_z_mu2=7))
        assert (msg.leak_bits, msg.m_z_mu1, msg.m_z_mu2) == (1234, 56, 7)

    def test_verify(self):
        tag = np.array([1] * 31, dtype=np.uint8)
        msg = roundtrip(wire.Verify(seed=2 ** 63 + 5, tag=tag))
        assert msg.seed == 2 ** 63 + 5
        assert np.array_equal(msg.tag, tag)

    def test_pa_seed(self):
        bits = np.random.default_rng(9).integers(0, 2, 257, dtype=np.uint8)
        msg = roundtrip(wire.PaSeed(out_len=99, seed_bits=bits))
        assert msg.out_len == 99
        assert np.array_equal(msg.seed_bits, bits)

    def test_abort(self):
        msg = roundtrip(wire.Abort(reason=wire.AbortReason.CORRECTNESS))
        assert msg.reason == wire.AbortReason.CORRECTNESS

    def test_abort_unknown_reason(self):
        with pytest.raises(wire.WireError):
            wire.Abort.decode(b"\x99")

    def test_unknown_type(self):
        with pytest.raises(wire.WireError):
            wire.decode_message(200, b"")
