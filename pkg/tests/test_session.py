import math
import socket
import threading
from pathlib import Path

import numpy as np
import pytest

from timebinqkd import finitekey, wire
from timebinqkd import model
from timebinqkd import reconcile as rc
from timebinqkd import session
from timebinqkd.simulate import AliceView, BobView, export_bitstreams, simulate_block_pulsewise
from timebinqkd.wire import AbortReason, MessageType

GOLDEN_DIR = Path(__file__).parent / "golden"

TOY_TEXT = """
protocol.mu1 = 0.5
protocol.mu2 = 0.15
protocol.p_mu1 = 0.5
protocol.p_z_alice = 0.5
channel.length_km = 0.001
security.eps_sec = 1e-9
security.eps_cor = 1e-9
block.n_z_target = 5000
"""


@pytest.fixture(scope="module")
def toy_config():
    return model.parse_config(TOY_TEXT, analysis=False)


def toy_views(n, seed, flip_prob=0.0):
    """Loss-free synthetic streams: every slot detected, optional BSC
    errors on the receiver's bits."""
    rng = np.random.default_rng(seed)
    basis = rng.integers(0, 2, n, dtype=np.uint8)
    bits = rng.integers(0, 2, n, dtype=np.uint8)
    intensity = rng.integers(0, 2, n, dtype=np.uint8)
    slots = np.arange(n, dtype=np.uint64)
    alice = AliceView(slot=slots.copy(), basis=basis, bit=bits, intensity=intensity)
    bob_bits = bits.copy()
    if flip_prob:
        flips = (rng.random(n) < flip_prob).astype(np.uint8)
        bob_bits ^= flips
    bob = BobView(slot=slots.copy(), basis=basis.copy(), bit=bob_bits)
    return alice, bob


class TestSift:
    def test_basic_split(self):
        slots = np.array([0, 2, 5, 7], dtype=np.int64)
        bob = np.array([0, 1, 0, 1], dtype=np.uint8)
        alice = np.array([0, 0, 1, 0, 0, 0, 0, 1], dtype=np.uint8)
        z_idx, x_idx = session.sift(slots, bob, alice)
        assert z_idx.tolist() == [0, 2]
        assert x_idx.tolist() == [1, 3]

    def test_zero_detections(self):
        z_idx, x_idx = session.sift([], [], np.zeros(10, np.uint8))
        assert z_idx.size == 0 and x_idx.size == 0

    def test_unknown_slot(self):
        with pytest.raises(session.SessionError):
            session.sift([10], [0], np.zeros(10, np.uint8))
        with pytest.raises(session.SessionError):
            session.sift([-1], [0], np.zeros(10, np.uint8))

    def test_length_mismatch(self):
        with pytest.raises(session.SessionError):
            session.sift([1, 2], [0], np.zeros(10, np.uint8))

    def test_uniform_bases_discard_half(self):
        n = 100_000
        rng = np.random.default_rng(17)
        slots = np.arange(n)
        bob = rng.integers(0, 2, n, dtype=np.uint8)
        alice = rng.integers(0, 2, n, dtype=np.uint8)
        z_idx, x_idx = session.sift(slots, bob, alice)
        kept = z_idx.size + x_idx.size
        assert abs(kept - n / 2) <= 3 * math.sqrt(n * 0.25)


class TestLosslessToy:
    def test_identical_keys_and_minimal_leak(self, toy_config):
        alice_view, bob_view = toy_views(10_000, seed=42)
        ra, rb = session.run_pair(toy_config, alice_view, bob_view, timeout_s=10.0)
        assert ra.ok and rb.ok
        assert ra.secret_key.size > 0
        assert np.array_equal(ra.secret_key, rb.secret_key)
        assert ra.secret_key.size == int(ra.breakdown.ell) == int(rb.breakdown.ell)
        # with no errors the sample is clean, the hint falls back to its
        # phantom-error bound, and the only disclosures are the whole-pass
        # block parities
        assert ra.sample_errors == 0
        n_kept = ra.tally.n_z
        hint = max(session._HINT_SHADE / (ra.sample_size + 2), session._HINT_MIN)
        k1 = rc.initial_block_size(hint)
        expected = math.ceil(n_kept / min(k1, n_kept))
        for i in range(1, rc.PASSES):
            expected += max(math.ceil(n_kept / min(k1 * 2 ** i, n_kept)) - 1, 0)
        assert ra.leak_bits == rb.leak_bits == expected

    def test_tally_excludes_disclosed_bits(self, toy_config):
        alice_view, bob_view = toy_views(10_000, seed=42)
        ra, rb = session.run_pair(toy_config, alice_view, bob_view, timeout_s=10.0)
        for rep in (ra, rb):
            assert rep.tally.n_z == rep.n_z_sifted - rep.sample_size
            assert rep.tally.n_x == rep.n_x_sifted

    def test_phase_sequence(self, toy_config):
        alice_view, bob_view = toy_views(10_000, seed=42)
        ra, rb = session.run_pair(toy_config, alice_view, bob_view, timeout_s=10.0)
        names = [p.name for p in ra.phases]
        assert names == [
            "hello", "detections", "basis_reveal", "disclosure",
            "reconcile", "verify", "amplify",
        ]
        assert all(p.bytes > 0 for p in ra.phases)
        assert [p.name for p in rb.phases] == names


class TestForcedErrors:
    @pytest.mark.parametrize("qber", [0.005, 0.01, 0.02])
    def test_accepted_sessions_agree_and_recompute(self, toy_config, qber):
        accepted = 0
        for seed in range(3):
            alice_view, bob_view = toy_views(24_000, seed=100 * seed + 9, flip_prob=qber)
            ra, rb = session.run_pair(toy_config, alice_view, bob_view, timeout_s=10.0)
            assert ra.abort_reason == rb.abort_reason
            if not ra.ok:
                continue
            accepted += 1
            assert np.array_equal(ra.secret_key, rb.secret_key)
            assert ra.secret_key.size == int(ra.breakdown.ell)
            # the report alone must reproduce the emitted length
            again = finitekey.secret_key_length(
                ra.tally, toy_config.security, lambda_ec=ra.leak_bits
            )
            assert int(again.ell) == ra.secret_key.size
            # measured reconciliation leak stays within the efficiency budget
            n_z = ra.tally.n_z
            measured = ra.tally.m_z / n_z if ra.tally.m_z else qber
            budget = 1.25 * n_z * finitekey.binary_entropy(max(measured, qber))
            assert ra.leak_bits <= budget
            assert ra.leak_bits == rb.leak_bits
        assert accepted >= 2

    def test_sample_estimate_tracks_rate(self, toy_config):
        alice_view, bob_view = toy_views(60_000, seed=5, flip_prob=0.02)
        ra, rb = session.run_pair(toy_config, alice_view, bob_view, timeout_s=10.0)
        assert ra.qber_estimate == rb.qber_estimate
        assert 0.0 <= ra.qber_estimate <= 0.08


class TestAborts:
    def test_config_digest_mismatch(self, toy_config):
        other = model.parse_config(TOY_TEXT.replace("0.15", "0.16"), analysis=False)
        alice_view, bob_view = toy_views(2_000, seed=1)
        t_alice, t_bob = session.make_inprocess_pair()
        reports = {}

        def go(role, transport, cfg, view):
            reports[role] = session.run_session(role, transport, cfg, view, timeout_s=5.0)

        threads = [
            threading.Thread(target=go, args=("alice", t_alice, toy_config, alice_view)),
            threading.Thread(target=go, args=("bob", t_bob, other, bob_view)),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert reports["alice"].abort_reason == AbortReason.CONFIG
        assert reports["bob"].abort_reason == AbortReason.CONFIG
        assert reports["alice"].secret_key.size == 0
        assert reports["bob"].secret_key.size == 0

    def test_insufficient_key_on_tiny_block(self, toy_config):
        alice_view, bob_view = toy_views(260, seed=3)
        ra, rb = session.run_pair(toy_config, alice_view, bob_view, timeout_s=5.0)
        assert ra.abort_reason == AbortReason.INSUFFICIENT_KEY
        assert rb.abort_reason == AbortReason.INSUFFICIENT_KEY
        assert ra.secret_key.size == rb.secret_key.size == 0

    def test_dropped_message_times_out(self, toy_config):
        class Dropping(session.InProcessTransport):
            def __init__(self, inbox, outbox, drop_nth):
                super().__init__(inbox, outbox)
                self.drop_nth = drop_nth
                self.sends = 0

            def send(self, data):
                self.sends += 1
                if self.sends == self.drop_nth:
                    return
                super().send(data)

        import queue as queue_mod

        a_to_b = queue_mod.Queue()
        b_to_a = queue_mod.Queue()
        t_alice = session.InProcessTransport(b_to_a, a_to_b)
        # bob's second frame is DETECTIONS; dropping it stalls both sides
        t_bob = Dropping(a_to_b, b_to_a, drop_nth=2)
        alice_view, bob_view = toy_views(4_000, seed=8)
        ra, rb = session.run_pair(
            toy_config, alice_view, bob_view,
            timeout_s=0.4, transports=(t_alice, t_bob),
        )
        assert ra.abort_reason == AbortReason.TIMEOUT
        assert rb.abort_reason == AbortReason.TIMEOUT
        assert ra.secret_key.size == rb.secret_key.size == 0

    def test_out_of_order_message_aborts(self, toy_config):
        import queue as queue_mod

        to_alice = queue_mod.Queue()
        from_alice = queue_mod.Queue()
        t_alice = session.InProcessTransport(to_alice, from_alice)
        alice_view, _ = toy_views(2_000, seed=2)
        digest = model.config_digest(toy_config)
        to_alice.put(wire.encode_message(wire.Hello(version=wire.PROTOCOL_VERSION, digest=digest)))
        to_alice.put(wire.encode_message(wire.XBitsReveal(bits=np.zeros(4, np.uint8))))
        report = session.run_session("alice", t_alice, toy_config, alice_view, timeout_s=2.0)
        assert report.abort_reason == AbortReason.PROTOCOL
        assert report.secret_key.size == 0
        # she must have told the peer: HELLO then ABORT(PROTOCOL)
        dec = wire.FrameDecoder()
        frames = []
        while not from_alice.empty():
            dec.feed(from_alice.get())
            while (got := dec.next_frame()) is not None:
                frames.append(got)
        types = [f[0] for f in frames]
        assert types == [MessageType.HELLO, MessageType.ABORT]
        assert wire.Abort.decode(frames[-1][1]).reason == AbortReason.PROTOCOL

    def test_tampered_parity_fails_verification(self, toy_config):
        class TamperParity(session.InProcessTransport):
            """Flip one bit in the first parity response on the way out."""

            def __init__(self, inbox, outbox):
                super().__init__(inbox, outbox)
                self.done = False

            def send(self, data):
                if not self.done:
                    dec = wire.FrameDecoder()
                    dec.feed(data)
                    mtype, payload = dec.next_frame()
                    msg = wire.decode_message(mtype, payload)
                    if isinstance(msg, wire.EcParity) and msg.parities.size:
                        bits = msg.parities.copy()
                        bits[0] ^= 1
                        data = wire.encode_message(
                            wire.EcParity(round=msg.round, queries=msg.queries, parities=bits)
                        )
                        self.done = True
                super().send(data)

        import queue as queue_mod

        a_to_b = queue_mod.Queue()
        b_to_a = queue_mod.Queue()
        t_alice = TamperParity(b_to_a, a_to_b)
        t_bob = session.InProcessTransport(a_to_b, b_to_a)
        alice_view, bob_view = toy_views(10_000, seed=21, flip_prob=0.01)
        ra, rb = session.run_pair(
            toy_config, alice_view, bob_view,
            timeout_s=5.0, transports=(t_alice, t_bob),
        )
        assert ra.abort_reason == AbortReason.CORRECTNESS
        assert rb.abort_reason == AbortReason.CORRECTNESS
        assert ra.secret_key.size == rb.secret_key.size == 0

    def test_shuffled_transcripts_never_yield_key(self, toy_config):
        import queue as queue_mod

        # capture a clean receiver-to-sender stream
        t_alice, t_bob = session.make_inprocess_pair(capture=True)
        alice_view, bob_view = toy_views(6_000, seed=31, flip_prob=0.01)
        ra, _ = session.run_pair(
            toy_config, alice_view, bob_view, timeout_s=5.0, transports=(t_alice, t_bob)
        )
        assert ra.ok
        dec = wire.FrameDecoder()
        dec.feed(bytes(t_bob.capture))
        frames = []
        while (got := dec.next_frame()) is not None:
            frames.append(got)
        type_seq = [f[0] for f in frames]
        rng = np.random.default_rng(77)
        tried = 0
        while tried < 8:
            order = rng.permutation(len(frames))
            if [type_seq[i] for i in order] == type_seq:
                continue
            tried += 1
            inbox = queue_mod.Queue()
            for i in order:
                inbox.put(wire.pack_frame(*frames[i]))
            transport = session.InProcessTransport(inbox, queue_mod.Queue())
            report = session.run_session(
                "alice", transport, toy_config, alice_view, timeout_s=0.4
            )
            assert report.abort_reason is not None
            assert report.secret_key.size == 0


class TestTransportEquivalence:
    def test_socket_and_queue_transcripts_match(self, toy_config):
        alice_view, bob_view = toy_views(12_000, seed=13, flip_prob=0.01)

        q_alice, q_bob = session.make_inprocess_pair(capture=True)
        ra_q, rb_q = session.run_pair(
            toy_config, alice_view, bob_view, timeout_s=10.0, transports=(q_alice, q_bob)
        )

        sock_a, sock_b = socket.socketpair()
        s_alice = session.SocketTransport(sock_a)
        s_bob = session.SocketTransport(sock_b)
        s_alice.capture = bytearray()
        s_bob.capture = bytearray()
        ra_s, rb_s = session.run_pair(
            toy_config, alice_view, bob_view, timeout_s=10.0, transports=(s_alice, s_bob)
        )
        s_alice.close()
        s_bob.close()

        assert ra_q.ok and ra_s.ok
        assert bytes(q_alice.capture) == bytes(s_alice.capture)
        assert bytes(q_bob.capture) == bytes(s_bob.capture)
        assert np.array_equal(ra_q.secret_key, ra_s.secret_key)
        assert np.array_equal(rb_q.secret_key, rb_s.secret_key)

    def test_golden_transcript(self, toy_config):
        alice_view, bob_view = toy_views(12_000, seed=2026, flip_prob=0.01)
        t_alice, t_bob = session.make_inprocess_pair(capture=True)
        ra, rb = session.run_pair(
            toy_config, alice_view, bob_view, timeout_s=10.0, transports=(t_alice, t_bob)
        )
        assert ra.ok and rb.ok
        a2b = (GOLDEN_DIR / "session_a2b.bin").read_bytes()
        b2a = (GOLDEN_DIR / "session_b2a.bin").read_bytes()
        assert bytes(t_alice.capture) == a2b
        assert bytes(t_bob.capture) == b2a


class TestSimulatedChannel:
    def test_end_to_end_over_simulated_block(self):
        cfg = model.parse_config(
            TOY_TEXT.replace("channel.length_km = 0.001", "channel.length_km = 1.0"),
            analysis=False,
        )
        _, _, records = simulate_block_pulsewise(cfg, seed=11, n_pulses=1_500_000)
        alice_view, bob_view = export_bitstreams(records)
        ra, rb = session.run_pair(cfg, alice_view, bob_view, timeout_s=30.0)
        assert ra.ok and rb.ok
        assert np.array_equal(ra.secret_key, rb.secret_key)
        assert ra.secret_key.size == int(ra.breakdown.ell) > 0
        fields = (
            "n_z_mu1", "n_z_mu2", "n_x_mu1", "n_x_mu2",
            "m_z_mu1", "m_z_mu2", "m_x_mu1", "m_x_mu2",
        )
        assert all(getattr(ra.tally, f) == getattr(rb.tally, f) for f in fields)


class TestApiValidation:
    def test_bad_role(self, toy_config):
        alice_view, _ = toy_views(100, seed=0)
        with pytest.raises(session.SessionError):
            session.run_session("carol", None, toy_config, alice_view)

    def test_wrong_view_type(self, toy_config):
        alice_view, bob_view = toy_views(100, seed=0)
        with pytest.raises(session.SessionError):
            session.run_session("alice", None, toy_config, bob_view)
        with pytest.raises(session.SessionError):
            session.run_session("bob", None, toy_config, alice_view)

    def test_bad_timeout(self, toy_config):
        alice_view, _ = toy_views(100, seed=0)
        with pytest.raises(session.SessionError):
            session.run_session("alice", None, toy_config, alice_view, timeout_s=0.0)
