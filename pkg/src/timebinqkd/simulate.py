"""Monte Carlo block generation.

Two samplers share one physical model (the closed forms in ``channel``):

  - ``simulate_block_aggregate`` draws whole-block counts category by
    category (basis, intensity, emitted photon number). It is fast enough
    to run thousands of realistic blocks and is the workhorse for bound
    validity studies.
  - ``simulate_block_pulsewise`` walks individual pulses and emits a
    record per slot, which feeds the interactive session layer. It is
    capped at desk scale.

Both return the public :class:`~timebinqkd.finitekey.Tally` alongside a
:class:`TrueTally` that keeps the per-photon-number ground truth the
estimator is never allowed to see. Everything is a deterministic function
of (config, seed); the generator is counter-based (Philox) so streams are
stable across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import channel
from .finitekey import Tally
from .model import ExperimentConfig, ProtocolParams

__all__ = [
    "N_MAX",
    "PULSE_DTYPE",
    "SimulationError",
    "TrueTally",
    "AliceView",
    "BobView",
    "simulate_block_aggregate",
    "simulate_block_pulsewise",
    "export_bitstreams",
    "save_records",
    "load_records",
]

# Poisson truncation for the photon-number ledger. P(n > 10) < 1e-10 for
# mu <= 1, so the folded tail is invisible at any feasible sample size.
N_MAX = 10

MAX_PULSEWISE = 10_000_000
_CHUNK = 1 << 20

_BASES = ("z", "x")

PULSE_DTYPE = np.dtype(
    [
        ("slot", "<u8"),
        ("alice_basis", "u1"),  # 0 = key basis, 1 = monitor basis
        ("alice_bit", "u1"),
        ("intensity", "u1"),  # 0 = mu1, 1 = mu2
        ("photons", "u1"),
        ("bob_basis", "u1"),
        ("detected", "u1"),
        ("error", "u1"),
    ]
)


class SimulationError(RuntimeError):
    """Raised when a block can never accumulate (zero detection probability)."""


@dataclass(frozen=True, eq=False)
class TrueTally:
    """Ground-truth counts binned by (basis, intensity, emitted photon
    number). Axis order: basis (0=key, 1=monitor), intensity (0=mu1,
    1=mu2), photon number 0..N_MAX (tail folded into the last bin).

    ``pulses`` records how many pulses landed in each bin, detected or
    not. Marginalizing ``detections``/``errors`` over photon number
    reproduces the public Tally exactly; the estimator side of the
    package never imports this type.
    """

    pulses: np.ndarray
    detections: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        assert self.pulses.shape == (2, 2, N_MAX + 1)
        assert self.detections.shape == (2, 2, N_MAX + 1)
        assert self.errors.shape == (2, 2, N_MAX + 1)

    def to_tally(self, protocol: ProtocolParams) -> Tally:
        d, e = self.detections, self.errors
        return Tally(
            protocol=protocol,
            n_z_mu1=float(d[0, 0].sum()),
            n_z_mu2=float(d[0, 1].sum()),
            n_x_mu1=float(d[1, 0].sum()),
            n_x_mu2=float(d[1, 1].sum()),
            m_z_mu1=float(e[0, 0].sum()),
            m_z_mu2=float(e[0, 1].sum()),
            m_x_mu1=float(e[1, 0].sum()),
            m_x_mu2=float(e[1, 1].sum()),
        )

    @property
    def vacuum_z(self) -> float:
        """Key-basis detections from pulses that left the source empty."""
        return float(self.detections[0, :, 0].sum())

    @property
    def single_z(self) -> float:
        """Key-basis detections from single-photon emissions."""
        return float(self.detections[0, :, 1].sum())

    @property
    def single_x_error_ratio(self) -> float:
        """Error ratio among monitor-basis single-photon detections."""
        det = self.errors[1, :, 1].sum(), self.detections[1, :, 1].sum()
        return float(det[0] / det[1]) if det[1] > 0 else 0.0


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _truncated_poisson(mu: float) -> np.ndarray:
    ns = np.arange(N_MAX + 1)
    probs = np.exp(-mu) * mu ** ns / np.array([math.factorial(int(n)) for n in ns])
    probs[N_MAX] = max(1.0 - probs[:N_MAX].sum(), 0.0)
    return probs


def _cell_probs(config: ExperimentConfig, basis: str, n: np.ndarray):
    """Per-photon-number detection and error-given-detection probabilities
    for one receiver basis."""
    det = config.detector
    t = channel.transmittance(config.channel)
    t_eta = t * channel.basis_efficiency(det, config.protocol.p_z_bob, basis)
    p_dc = channel.dark_click_prob(det)
    e_base = channel.error_floor(det, basis)
    d_n = channel.detection_prob_given_photons(n, t_eta, p_dc)
    e_n = channel.error_prob_given_photons(n, t_eta, p_dc, e_base)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(d_n > 0, e_n / np.where(d_n > 0, d_n, 1.0), 0.0)
    return d_n, ratio


def _sifted_per_pulse(config: ExperimentConfig) -> float:
    p = config.protocol
    et = channel.expected_tally(config)
    return float(p.p_z_alice * (p.p_mu1 * et.d_z_mu1 + (1.0 - p.p_mu1) * et.d_z_mu2))


def simulate_block_aggregate(
    config: ExperimentConfig,
    seed: int,
    n_pulses: int | None = None,
) -> tuple[Tally, TrueTally]:
    """Sample one block's counts without touching individual pulses.

    With ``n_pulses`` omitted, the block length is sized so the key-basis
    count hits ``block.n_z_target`` in expectation; a configuration whose
    detection probability is zero then raises :class:`SimulationError`
    instead of hanging. An explicit ``n_pulses`` bypasses the sizing.
    """
    p = config.protocol
    if n_pulses is None:
        sifted = _sifted_per_pulse(config)
        if not sifted > 0.0:
            raise SimulationError(
                "key-basis detection probability is zero; the block would never fill"
            )
        pulses = config.block.n_z_target / sifted
        if not np.isfinite(pulses):
            raise SimulationError("block length overflows at this detection probability")
        n_pulses = int(round(pulses))

    rng = _rng(seed)
    cat_probs = np.array(
        [
            p.p_z_alice * p.p_mu1,
            p.p_z_alice * (1.0 - p.p_mu1),
            (1.0 - p.p_z_alice) * p.p_mu1,
            (1.0 - p.p_z_alice) * (1.0 - p.p_mu1),
        ]
    )
    n_cat = rng.multinomial(n_pulses, cat_probs)

    ns = np.arange(N_MAX + 1)
    pulse_counts = np.zeros((2, 2, N_MAX + 1), dtype=np.int64)
    det_counts = np.zeros((2, 2, N_MAX + 1), dtype=np.int64)
    err_counts = np.zeros((2, 2, N_MAX + 1), dtype=np.int64)
    mus = (p.mu1, p.mu2)
    for bi, basis in enumerate(_BASES):
        d_n, e_ratio = _cell_probs(config, basis, ns)
        for ki in (0, 1):
            pulses_by_n = rng.multinomial(int(n_cat[2 * bi + ki]), _truncated_poisson(mus[ki]))
            det = rng.binomial(pulses_by_n, d_n)
            err = rng.binomial(det, e_ratio)
            pulse_counts[bi, ki] = pulses_by_n
            det_counts[bi, ki] = det
            err_counts[bi, ki] = err

    true_tally = TrueTally(pulses=pulse_counts, detections=det_counts, errors=err_counts)
    return true_tally.to_tally(p), true_tally


def simulate_block_pulsewise(
    config: ExperimentConfig,
    seed: int,
    n_pulses: int,
    *,
    modulation_depth: float = 0.0,
    modulation_period_s: float = 60.0,
) -> tuple[Tally, TrueTally, np.ndarray]:
    """Walk ``n_pulses`` slots one by one (vectorized in chunks) and emit a
    PulseRecord stream alongside the tallies.

    ``modulation_depth`` > 0 turns on a slow sinusoidal efficiency factor
    1 + depth*sin(2*pi*t/period), a stand-in for polarization drift. It is
    off by default and the aggregate sampler never applies it.

    Clicks in the detector that does not match Alice's basis are sifting
    losses with no effect on any tally, so they are dropped at the source;
    a record with the detection flag set therefore always has matching
    basis fields.
    """
    if n_pulses < 0 or n_pulses > MAX_PULSEWISE:
        raise ValueError(f"n_pulses must be in [0, {MAX_PULSEWISE}], got {n_pulses}")
    if not 0.0 <= modulation_depth < 1.0:
        raise ValueError("modulation_depth must be in [0, 1)")

    p = config.protocol
    det_params = config.detector
    t = channel.transmittance(config.channel)
    p_dc = channel.dark_click_prob(det_params)
    t_eta = np.array(
        [
            t * channel.basis_efficiency(det_params, p.p_z_bob, "z"),
            t * channel.basis_efficiency(det_params, p.p_z_bob, "x"),
        ]
    )
    e_base = np.array(
        [channel.error_floor(det_params, "z"), channel.error_floor(det_params, "x")]
    )
    mus = np.array([p.mu1, p.mu2])

    rng = _rng(seed)
    records = np.zeros(n_pulses, dtype=PULSE_DTYPE)
    pulse_counts = np.zeros((2, 2, N_MAX + 1), dtype=np.int64)
    det_counts = np.zeros((2, 2, N_MAX + 1), dtype=np.int64)
    err_counts = np.zeros((2, 2, N_MAX + 1), dtype=np.int64)

    for start in range(0, n_pulses, _CHUNK):
        stop = min(start + _CHUNK, n_pulses)
        m = stop - start
        basis = (rng.random(m) >= p.p_z_alice).astype(np.uint8)
        intensity = (rng.random(m) >= p.p_mu1).astype(np.uint8)
        bits = rng.integers(0, 2, size=m, dtype=np.uint8)
        photons = rng.poisson(mus[intensity])

        eff = t_eta[basis]
        if modulation_depth > 0.0:
            slot_t = np.arange(start, stop, dtype=np.float64) / p.pulse_rate_hz
            factor = 1.0 + modulation_depth * np.sin(
                2.0 * np.pi * slot_t / modulation_period_s
            )
            eff = np.minimum(eff * factor, 1.0)

        p_signal = 1.0 - (1.0 - eff) ** photons
        p_det = p_signal + (1.0 - p_signal) * p_dc
        with np.errstate(invalid="ignore", divide="ignore"):
            e_ratio = np.where(
                p_det > 0,
                (e_base[basis] * p_signal + 0.5 * p_dc * (1.0 - p_signal))
                / np.where(p_det > 0, p_det, 1.0),
                0.0,
            )
        detected = rng.random(m) < p_det
        error = detected & (rng.random(m) < e_ratio)
        bob_flip = (rng.random(m) >= p.p_z_bob).astype(np.uint8)
        bob_basis = np.where(detected, basis, bob_flip).astype(np.uint8)

        chunk = records[start:stop]
        chunk["slot"] = np.arange(start, stop, dtype=np.uint64)
        chunk["alice_basis"] = basis
        chunk["alice_bit"] = bits
        chunk["intensity"] = intensity
        chunk["photons"] = np.minimum(photons, 255)
        chunk["bob_basis"] = bob_basis
        chunk["detected"] = detected
        chunk["error"] = error

        n_bin = np.minimum(photons, N_MAX)
        np.add.at(pulse_counts, (basis, intensity, n_bin), 1)
        np.add.at(det_counts, (basis, intensity, n_bin), detected)
        np.add.at(err_counts, (basis, intensity, n_bin), error)

    true_tally = TrueTally(pulses=pulse_counts, detections=det_counts, errors=err_counts)
    return true_tally.to_tally(p), true_tally, records


@dataclass(frozen=True, eq=False)
class AliceView:
    """Sender-side bitstream: everything Alice knows about what she sent."""

    slot: np.ndarray
    basis: np.ndarray
    bit: np.ndarray
    intensity: np.ndarray


@dataclass(frozen=True, eq=False)
class BobView:
    """Receiver-side detection events. Deliberately excludes intensity and
    emitted photon number; Bob learns those from no physical observable."""

    slot: np.ndarray
    basis: np.ndarray
    bit: np.ndarray


def export_bitstreams(records: np.ndarray) -> tuple[AliceView, BobView]:
    """Split a pulse-record stream into the two parties' private views."""
    alice = AliceView(
        slot=records["slot"].copy(),
        basis=records["alice_basis"].copy(),
        bit=records["alice_bit"].copy(),
        intensity=records["intensity"].copy(),
    )
    det = records["detected"] == 1
    bob = BobView(
        slot=records["slot"][det].copy(),
        basis=records["bob_basis"][det].copy(),
        bit=(records["alice_bit"][det] ^ records["error"][det]).astype(np.uint8),
    )
    return alice, bob


_RECORD_MAGIC = b"QKDR"
_RECORD_VERSION = 1


def save_records(records: np.ndarray, path) -> None:
    """Write a pulse-record stream: 4-byte magic, 1-byte version, 8-byte
    little-endian count, then the fixed-width records."""
    with open(path, "wb") as fh:
        fh.write(_RECORD_MAGIC)
        fh.write(bytes([_RECORD_VERSION]))
        fh.write(len(records).to_bytes(8, "little"))
        fh.write(records.astype(PULSE_DTYPE, copy=False).tobytes())


def load_records(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _RECORD_MAGIC:
            raise ValueError("not a pulse-record file")
        version = fh.read(1)[0]
        if version != _RECORD_VERSION:
            raise ValueError(f"unsupported record version {version}")
        count = int.from_bytes(fh.read(8), "little")
        data = fh.read(count * PULSE_DTYPE.itemsize)
    if len(data) != count * PULSE_DTYPE.itemsize:
        raise ValueError("truncated pulse-record file")
    return np.frombuffer(data, dtype=PULSE_DTYPE).copy()
