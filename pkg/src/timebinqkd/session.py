"""Two-party post-processing session over a framed transport.

One endpoint plays the sender (``alice``, who knows every emitted pulse)
and one the receiver (``bob``, who knows his detections). The exchange
is strictly phase-ordered:

    HELLO -> DETECTIONS -> BASIS_REVEAL -> X_BITS_REVEAL / QBER_SAMPLE
          -> EC_PARITY* / EC_DONE -> VERIFY -> PA_SEED

Any out-of-order or malformed message aborts the session; aborts are
clean, symmetric, and carried in both reports. Monitor-basis detections
are disclosed in full and never enter the key. A seeded 1% sample of
key-basis bits is disclosed for the reconciliation hint and discarded;
the hint itself is shaded low and railed against the disclosed
monitor-basis error rate, since reconciliation pays far more for an
over-estimated rate than an under-estimated one.
Reconciliation leakage is counted identically on both sides and is the
measured lambda_EC fed to the key-length bound; the verification tag is
budgeted by the eps_cor term of that bound.

Shared randomness (pass permutations, tag seed, amplification seed) is
derived by hashing public protocol material, so two runs over identical
inputs produce byte-identical transcripts on any transport.
"""

from __future__ import annotations

import hashlib
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import reconcile
from .amplify import random_seed, toeplitz_hash
from .finitekey import KeyLengthBreakdown, Tally, secret_key_length
from .model import ExperimentConfig, config_digest
from .simulate import AliceView, BobView
from .wire import (
    Abort,
    AbortReason,
    BasisReveal,
    Detections,
    EcDone,
    EcParity,
    FrameDecoder,
    Hello,
    MessageType,
    PaSeed,
    PROTOCOL_VERSION,
    QberSample,
    Verify,
    WireError,
    XBitsReveal,
    decode_message,
    encode_message,
)

__all__ = [
    "SessionError",
    "PhaseStats",
    "SessionReport",
    "sift",
    "run_session",
    "run_pair",
    "InProcessTransport",
    "make_inprocess_pair",
    "SocketTransport",
    "SAMPLE_FRACTION",
    "DEFAULT_TIMEOUT_S",
]

SAMPLE_FRACTION = 0.01
DEFAULT_TIMEOUT_S = 30.0
_MIN_KEPT = 64
_HINT_MIN = 1e-3
_HINT_MAX = 0.249
_HINT_SHADE = 0.6
_RAIL_LO = 0.4
_RAIL_HI = 1.3
_RAIL_MIN_X = 200


class SessionError(RuntimeError):
    """Local misuse of the session API (not a wire-level abort)."""


def sift(slots, bob_basis, alice_basis) -> tuple[np.ndarray, np.ndarray]:
    """Split detections into key-basis and monitor-basis sifted sets.

    ``slots`` and ``bob_basis`` describe the detections; ``alice_basis``
    is the sender's announcement with one entry per emitted slot.
    Returns (key_idx, monitor_idx), each an index array into detection
    order. A detection slot outside the announced stream is a protocol
    violation.
    """
    slots = np.ascontiguousarray(slots, dtype=np.int64)
    bb = np.ascontiguousarray(bob_basis, dtype=np.uint8)
    ab = np.ascontiguousarray(alice_basis, dtype=np.uint8)
    if slots.size != bb.size:
        raise SessionError("slots and basis arrays differ in length")
    if slots.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    if int(slots.min()) < 0 or int(slots.max()) >= ab.size:
        raise SessionError("detection refers to a slot outside the announced stream")
    agree = bb == ab[slots]
    z_idx = np.nonzero(agree & (bb == 0))[0]
    x_idx = np.nonzero(agree & (bb == 1))[0]
    return z_idx, x_idx


@dataclass(frozen=True)
class PhaseStats:
    name: str
    seconds: float
    messages: int
    bytes: int


@dataclass(frozen=True, eq=False)
class SessionReport:
    """One endpoint's record of a session. On success ``secret_key``
    holds exactly ``breakdown.ell`` bits and both endpoints' keys are
    identical; on abort it is empty and ``abort_reason`` is set."""

    role: str
    abort_reason: AbortReason | None
    tally: Tally | None
    breakdown: KeyLengthBreakdown | None
    leak_bits: int
    secret_key: np.ndarray
    n_z_sifted: int
    n_x_sifted: int
    sample_size: int
    sample_errors: int
    qber_estimate: float | None
    phases: list[PhaseStats] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.abort_reason is None


class InProcessTransport:
    """Queue-backed duplex endpoint for same-process sessions."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self.capture: bytearray | None = None

    def send(self, data: bytes) -> None:
        if self.capture is not None:
            self.capture.extend(data)
        self._outbox.put(bytes(data))

    def recv(self, timeout_s: float) -> bytes:
        try:
            return self._inbox.get(timeout=max(timeout_s, 1e-3))
        except queue.Empty:
            raise TimeoutError("transport receive timed out") from None

    def close(self) -> None:
        pass


def make_inprocess_pair(capture: bool = False):
    """Two crossed queue transports; with ``capture`` each endpoint also
    accumulates every byte it sends (the directional transcript)."""
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    left = InProcessTransport(b_to_a, a_to_b)
    right = InProcessTransport(a_to_b, b_to_a)
    if capture:
        left.capture = bytearray()
        right.capture = bytearray()
    return left, right


class SocketTransport:
    """Frame stream over a connected TCP socket."""

    def __init__(self, sock):
        self._sock = sock
        self.capture: bytearray | None = None

    def send(self, data: bytes) -> None:
        if self.capture is not None:
            self.capture.extend(data)
        self._sock.sendall(data)

    def recv(self, timeout_s: float) -> bytes:
        self._sock.settimeout(max(timeout_s, 1e-3))
        return self._sock.recv(65536)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class _AbortSession(Exception):
    """Internal control flow: terminate with a reason. ``notified`` is
    True when the peer already knows (we received the abort or told it)."""

    def __init__(self, reason: AbortReason, notified: bool = False):
        super().__init__(reason.name)
        self.reason = reason
        self.notified = notified


def _derive_u64(tag: bytes, *parts: bytes) -> int:
    h = hashlib.sha256(tag)
    for part in parts:
        h.update(part)
    return int.from_bytes(h.digest()[:8], "little")


def _u64le(value: int) -> bytes:
    return int(value).to_bytes(8, "little")


def _pack(bits: np.ndarray) -> bytes:
    return np.packbits(np.ascontiguousarray(bits, dtype=np.uint8), bitorder="little").tobytes()


class _Link:
    """Message pump over a transport: framing, decode, traffic counters."""

    def __init__(self, transport, timeout_s: float):
        self.transport = transport
        self.timeout_s = timeout_s
        self.decoder = FrameDecoder()
        self.messages = 0
        self.traffic_bytes = 0

    def send(self, msg) -> None:
        frame = encode_message(msg)
        try:
            self.transport.send(frame)
        except OSError:
            raise _AbortSession(AbortReason.TIMEOUT, notified=True) from None
        self.messages += 1
        self.traffic_bytes += len(frame)

    def recv(self):
        deadline = time.monotonic() + self.timeout_s
        while True:
            got = self.decoder.next_frame()
            if got is not None:
                mtype, payload = got
                msg = decode_message(mtype, payload)
                self.messages += 1
                self.traffic_bytes += len(payload) + 14
                return msg
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("no frame before deadline")
            try:
                data = self.transport.recv(remaining)
            except OSError as exc:
                if isinstance(exc, TimeoutError):
                    raise
                raise TimeoutError("transport failed") from exc
            if not data:
                raise TimeoutError("transport closed")
            self.decoder.feed(data)


class _Session:
    def __init__(self, role, transport, config, view, timeout_s):
        self.role = role
        self.config = config
        self.view = view
        self.link = _Link(transport, timeout_s)
        self.digest = config_digest(config)
        self.tally: Tally | None = None
        self.breakdown: KeyLengthBreakdown | None = None
        self.leak_bits = 0
        self.secret = np.zeros(0, dtype=np.uint8)
        self.n_z_sifted = 0
        self.n_x_sifted = 0
        self.sample_size = 0
        self.sample_errors = 0
        self._x_size = 0
        self._x_errors = 0
        self.qber_estimate: float | None = None
        self.phases: list[PhaseStats] = []
        self._phase_mark: tuple[str, float, int, int] | None = None

    # -- phase bookkeeping ------------------------------------------------

    def _phase(self, name: str) -> None:
        self._close_phase()
        self._phase_mark = (name, time.monotonic(), self.link.messages, self.link.traffic_bytes)

    def _close_phase(self) -> None:
        if self._phase_mark is None:
            return
        name, t0, m0, b0 = self._phase_mark
        self.phases.append(
            PhaseStats(
                name=name,
                seconds=time.monotonic() - t0,
                messages=self.link.messages - m0,
                bytes=self.link.traffic_bytes - b0,
            )
        )
        self._phase_mark = None

    # -- message plumbing -------------------------------------------------

    def _abort(self, reason: AbortReason) -> None:
        raise _AbortSession(reason)

    def _expect(self, *types: MessageType):
        try:
            msg = self.link.recv()
        except TimeoutError:
            raise _AbortSession(AbortReason.TIMEOUT) from None
        except WireError:
            raise _AbortSession(AbortReason.PROTOCOL) from None
        if isinstance(msg, Abort):
            raise _AbortSession(msg.reason, notified=True)
        if msg.TYPE not in types:
            raise _AbortSession(AbortReason.PROTOCOL)
        return msg

    # -- shared steps -------------------------------------------------------

    def _hello(self) -> None:
        self._phase("hello")
        self.link.send(Hello(version=PROTOCOL_VERSION, digest=self.digest))
        peer = self._expect(MessageType.HELLO)
        if peer.version != PROTOCOL_VERSION or peer.digest != self.digest:
            self._abort(AbortReason.CONFIG)

    def _sample_indices(self, n_z: int) -> np.ndarray:
        count = max(1, math.ceil(SAMPLE_FRACTION * n_z))
        seed = _derive_u64(b"qkd-sample", self.digest, _u64le(n_z))
        rng = np.random.Generator(np.random.Philox(seed))
        picks = rng.choice(n_z, size=count, replace=False)
        return np.sort(picks).astype(np.int64)

    def _hint(self) -> float:
        if self.sample_errors:
            # Undershooting the rate merely grows the initial blocks, which
            # costs almost nothing; overshooting it shrinks them and inflates
            # the parity leakage sharply.  Shading the point estimate down
            # keeps a noisy sample from landing on the expensive side.
            observed = _HINT_SHADE * self.sample_errors / self.sample_size
        else:
            # a clean sample only bounds the rate; a shaded phantom error
            # in (m + 2) keeps the initial blocks conservatively sized
            observed = _HINT_SHADE / (self.sample_size + 2)
        # The sacrificial sample is a hundredth of the key, so its estimate
        # is noisy at small blocks.  The monitor-basis bits are disclosed in
        # full and their error rate tracks the key-basis rate to within a
        # small factor, so use it as a rail against sampling flukes.
        if self._x_size >= _RAIL_MIN_X and self._x_errors:
            x_rate = self._x_errors / self._x_size
            observed = min(max(observed, _RAIL_LO * x_rate), _RAIL_HI * x_rate)
        return min(max(observed, _HINT_MIN), _HINT_MAX)

    def _ec_seed(self, sample_idx, bob_bits, alice_bits) -> bytes:
        h = hashlib.sha256(b"qkd-ec")
        h.update(self.digest)
        h.update(np.ascontiguousarray(sample_idx, dtype=np.int64).tobytes())
        h.update(_pack(bob_bits))
        h.update(_pack(alice_bits))
        return h.digest()

    def _count_by_intensity(self, mask: np.ndarray, intensity: np.ndarray) -> tuple[int, int]:
        mu1 = int(np.count_nonzero(mask & (intensity == 0)))
        mu2 = int(np.count_nonzero(mask & (intensity == 1)))
        return mu1, mu2

    def _build_tally(self, kept_int, x_int, x_err_mask, m_z_mu1, m_z_mu2) -> Tally:
        n_z_mu1, n_z_mu2 = self._count_by_intensity(np.ones(kept_int.size, dtype=bool), kept_int)
        n_x_mu1, n_x_mu2 = self._count_by_intensity(np.ones(x_int.size, dtype=bool), x_int)
        m_x_mu1, m_x_mu2 = self._count_by_intensity(x_err_mask, x_int)
        return Tally(
            protocol=self.config.protocol,
            n_z_mu1=n_z_mu1,
            n_z_mu2=n_z_mu2,
            n_x_mu1=n_x_mu1,
            n_x_mu2=n_x_mu2,
            m_z_mu1=m_z_mu1,
            m_z_mu2=m_z_mu2,
            m_x_mu1=m_x_mu1,
            m_x_mu2=m_x_mu2,
        )

    def _finalize(self, ec_seed: bytes) -> tuple[KeyLengthBreakdown, int, int]:
        breakdown = secret_key_length(self.tally, self.config.security, lambda_ec=self.leak_bits)
        self.breakdown = breakdown
        ell = int(breakdown.ell)
        pa_seed_u64 = _derive_u64(b"qkd-pa", ec_seed, _u64le(ell), _u64le(self.leak_bits))
        return breakdown, ell, pa_seed_u64

    # -- sender -------------------------------------------------------------

    def _run_alice(self) -> None:
        view: AliceView = self.view
        self._hello()

        self._phase("detections")
        det = self._expect(MessageType.DETECTIONS)
        slots = det.slots.astype(np.int64)
        try:
            z_idx, x_idx = sift(slots, det.basis, view.basis)
        except SessionError:
            self._abort(AbortReason.PROTOCOL)
        self.n_z_sifted = int(z_idx.size)
        self.n_x_sifted = int(x_idx.size)

        self._phase("basis_reveal")
        self.link.send(BasisReveal(basis=view.basis[slots], intensity=view.intensity[slots]))

        my_bits = view.bit[slots]
        intensity = view.intensity[slots]

        self._phase("disclosure")
        their_x = self._expect(MessageType.X_BITS_REVEAL)
        if their_x.bits.size != x_idx.size:
            self._abort(AbortReason.PROTOCOL)
        self.link.send(XBitsReveal(bits=my_bits[x_idx]))
        x_err_mask = their_x.bits != my_bits[x_idx]

        sample = self._expect(MessageType.QBER_SAMPLE)
        expected_idx = self._sample_indices(self.n_z_sifted)
        if not np.array_equal(sample.indices.astype(np.int64), expected_idx):
            self._abort(AbortReason.PROTOCOL)
        my_sample_bits = my_bits[z_idx][expected_idx]
        self.link.send(QberSample(indices=expected_idx, bits=my_sample_bits))
        self.sample_size = int(expected_idx.size)
        self.sample_errors = int(np.count_nonzero(sample.bits != my_sample_bits))
        self.qber_estimate = self.sample_errors / self.sample_size

        kept_mask = np.ones(z_idx.size, dtype=bool)
        kept_mask[expected_idx] = False
        kept_idx = z_idx[kept_mask]
        my_key = my_bits[kept_idx].copy()
        kept_int = intensity[kept_idx]

        ec_seed = self._ec_seed(expected_idx, sample.bits, my_sample_bits)

        self._phase("reconcile")
        n = my_key.size
        perms = reconcile.make_permutations(n, _derive_u64(b"qkd-cascade", ec_seed), reconcile.PASSES)
        served = 0
        done: EcDone | None = None
        while done is None:
            msg = self._expect(MessageType.EC_PARITY, MessageType.EC_DONE)
            if isinstance(msg, EcDone):
                done = msg
                continue
            q = msg.queries
            if q.size and (
                int(q[:, 0].max()) >= reconcile.PASSES
                or int(q[:, 0].min()) < 0
                or np.any(q[:, 1] >= q[:, 2])
                or np.any(q[:, 1] < 0)
                or int(q[:, 2].max()) > n
            ):
                self._abort(AbortReason.PROTOCOL)
            parities = reconcile.answer_parities(my_key, perms, q)
            served += len(q)
            self.link.send(EcParity(round=msg.round, queries=np.zeros((0, 3), np.int64), parities=parities))
        if done.leak_bits != served:
            self._abort(AbortReason.PROTOCOL)
        self.leak_bits = served
        self.tally = self._build_tally(kept_int, intensity[x_idx], x_err_mask, done.m_z_mu1, done.m_z_mu2)

        self._phase("verify")
        ver = self._expect(MessageType.VERIFY)
        my_tag = reconcile.hash_tag(my_key, self.config.security.eps_cor, ver.seed)
        if not np.array_equal(my_tag, ver.tag):
            self._abort(AbortReason.CORRECTNESS)

        self._phase("amplify")
        breakdown, ell, pa_seed_u64 = self._finalize(ec_seed)
        if ell <= 0:
            self._abort(AbortReason.INSUFFICIENT_KEY)
        rng = np.random.Generator(np.random.Philox(pa_seed_u64))
        seed_bits = random_seed(rng, n, ell)
        self.link.send(PaSeed(out_len=ell, seed_bits=seed_bits))
        self.secret = toeplitz_hash(my_key, seed_bits, ell)

    # -- receiver -----------------------------------------------------------

    def _run_bob(self) -> None:
        view: BobView = self.view
        self._hello()

        self._phase("detections")
        slots = view.slot.astype(np.int64)
        self.link.send(Detections(slots=slots, basis=view.basis))

        self._phase("basis_reveal")
        reveal = self._expect(MessageType.BASIS_REVEAL)
        if reveal.basis.size != slots.size or reveal.intensity.size != slots.size:
            self._abort(AbortReason.PROTOCOL)
        agree = view.basis == reveal.basis
        z_idx = np.nonzero(agree & (view.basis == 0))[0]
        x_idx = np.nonzero(agree & (view.basis == 1))[0]
        self.n_z_sifted = int(z_idx.size)
        self.n_x_sifted = int(x_idx.size)
        intensity = reveal.intensity

        self._phase("disclosure")
        self.link.send(XBitsReveal(bits=view.bit[x_idx]))
        their_x = self._expect(MessageType.X_BITS_REVEAL)
        if their_x.bits.size != x_idx.size:
            self._abort(AbortReason.PROTOCOL)
        x_err_mask = view.bit[x_idx] != their_x.bits
        self._x_size = int(x_idx.size)
        self._x_errors = int(np.count_nonzero(x_err_mask))

        sample_budget = max(1, math.ceil(SAMPLE_FRACTION * self.n_z_sifted))
        if self.n_z_sifted - sample_budget < _MIN_KEPT:
            self._abort(AbortReason.INSUFFICIENT_KEY)
        sample_idx = self._sample_indices(self.n_z_sifted)
        my_sample_bits = view.bit[z_idx][sample_idx]
        self.link.send(QberSample(indices=sample_idx, bits=my_sample_bits))
        theirs = self._expect(MessageType.QBER_SAMPLE)
        if not np.array_equal(theirs.indices.astype(np.int64), sample_idx):
            self._abort(AbortReason.PROTOCOL)
        self.sample_size = int(sample_idx.size)
        self.sample_errors = int(np.count_nonzero(theirs.bits != my_sample_bits))
        self.qber_estimate = self.sample_errors / self.sample_size

        kept_mask = np.ones(z_idx.size, dtype=bool)
        kept_mask[sample_idx] = False
        kept_idx = z_idx[kept_mask]
        my_key = view.bit[kept_idx].copy()
        kept_int = intensity[kept_idx]

        ec_seed = self._ec_seed(sample_idx, my_sample_bits, theirs.bits)

        self._phase("reconcile")
        rounds = {"n": 0}

        def oracle(queries: np.ndarray) -> np.ndarray:
            rounds["n"] += 1
            self.link.send(
                EcParity(round=rounds["n"], queries=queries, parities=np.zeros(0, np.uint8))
            )
            resp = self._expect(MessageType.EC_PARITY)
            if resp.round != rounds["n"] or resp.parities.size != len(queries):
                self._abort(AbortReason.PROTOCOL)
            return resp.parities

        receiver = reconcile.CascadeReceiver(
            my_key,
            self._hint(),
            _derive_u64(b"qkd-cascade", ec_seed),
            oracle,
            reconcile.PASSES,
        )
        corrected = receiver.run()
        self.leak_bits = receiver.leak_bits
        flips = (corrected ^ my_key).astype(bool)
        m_z_mu1, m_z_mu2 = self._count_by_intensity(flips, kept_int)
        self.link.send(EcDone(leak_bits=self.leak_bits, m_z_mu1=m_z_mu1, m_z_mu2=m_z_mu2))
        self.tally = self._build_tally(kept_int, intensity[x_idx], x_err_mask, m_z_mu1, m_z_mu2)

        self._phase("verify")
        verify_seed = _derive_u64(b"qkd-verify", ec_seed)
        tag = reconcile.hash_tag(corrected, self.config.security.eps_cor, verify_seed)
        self.link.send(Verify(seed=verify_seed, tag=tag))

        self._phase("amplify")
        breakdown, ell, _ = self._finalize(ec_seed)
        msg = self._expect(MessageType.PA_SEED)
        if msg.out_len != ell or msg.seed_bits.size != corrected.size + ell - 1:
            self._abort(AbortReason.PROTOCOL)
        self.secret = toeplitz_hash(corrected, msg.seed_bits, ell)

    # -- driver ---------------------------------------------------------------

    def run(self) -> SessionReport:
        abort_reason: AbortReason | None = None
        try:
            if self.role == "alice":
                self._run_alice()
            else:
                self._run_bob()
        except _AbortSession as ab:
            abort_reason = ab.reason
            if not ab.notified:
                try:
                    self.link.send(Abort(reason=ab.reason))
                except (_AbortSession, OSError):
                    pass
            self.secret = np.zeros(0, dtype=np.uint8)
        finally:
            self._close_phase()
        return SessionReport(
            role=self.role,
            abort_reason=abort_reason,
            tally=self.tally,
            breakdown=self.breakdown,
            leak_bits=self.leak_bits,
            secret_key=self.secret,
            n_z_sifted=self.n_z_sifted,
            n_x_sifted=self.n_x_sifted,
            sample_size=self.sample_size,
            sample_errors=self.sample_errors,
            qber_estimate=self.qber_estimate,
            phases=self.phases,
        )


def run_session(
    role: str,
    transport,
    config: ExperimentConfig,
    view,
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
) -> SessionReport:
    """Run one endpoint to completion and return its report.

    ``role`` is ``"alice"`` (sender, takes an AliceView) or ``"bob"``
    (receiver, takes a BobView). The transport must deliver bytes
    reliably and in order; ``timeout_s`` bounds each receive.
    """
    if role not in ("alice", "bob"):
        raise SessionError(f"role must be 'alice' or 'bob', got {role!r}")
    expected = AliceView if role == "alice" else BobView
    if not isinstance(view, expected):
        raise SessionError(f"{role} endpoint needs a {expected.__name__}")
    if timeout_s <= 0:
        raise SessionError("timeout_s must be positive")
    return _Session(role, transport, config, view, timeout_s).run()


def run_pair(
    config: ExperimentConfig,
    alice_view: AliceView,
    bob_view: BobView,
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    transports=None,
) -> tuple[SessionReport, SessionReport]:
    """Run both endpoints on threads over an in-process transport pair
    (or the pair supplied) and return (alice report, bob report)."""
    if transports is None:
        transports = make_inprocess_pair()
    t_alice, t_bob = transports
    results: dict[str, SessionReport] = {}
    errors: dict[str, BaseException] = {}

    def work(role, transport, view):
        try:
            results[role] = run_session(role, transport, config, view, timeout_s=timeout_s)
        except BaseException as exc:
            errors[role] = exc

    threads = [
        threading.Thread(target=work, args=("alice", t_alice, alice_view)),
        threading.Thread(target=work, args=("bob", t_bob, bob_view)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for role in ("alice", "bob"):
        if role in errors:
            raise errors[role]
    return results["alice"], results["bob"]
