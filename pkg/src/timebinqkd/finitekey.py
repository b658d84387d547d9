"""Finite-key secret fraction for one-decoy BB84 with time-bin encoding.

Everything here is pure arithmetic on observed (or expected) detection
tallies: sifted counts and error counts per basis and per intensity. With
exactly two intensities the decoy-state linear programs reduce to closed
forms, giving lower bounds on the vacuum and single-photon contributions in
the key basis and an upper bound on the single-photon phase error rate, all
at finite statistics via Hoeffding deviations.

All functions accept numpy arrays in place of scalars and broadcast; the
optimizer relies on this to score whole parameter grids in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .model import ProtocolParams, SecurityParams

__all__ = [
    "Tally",
    "AdjustedBounds",
    "KeyLengthBreakdown",
    "binary_entropy",
    "hoeffding_delta",
    "tau_n",
    "adjusted_count_bounds",
    "vacuum_lower",
    "vacuum_upper",
    "single_photon_lower",
    "single_photon_errors_upper",
    "gamma_correction",
    "phase_error_upper",
    "ec_leakage",
    "security_overhead",
    "secret_key_length",
    "secret_key_rate",
]

# The security failure budget is split uniformly across the concentration
# bounds and correction terms entering the key-length formula; this is the
# single place to change if a different budget split is ever needed.
EPS_SPLIT = 19


@dataclass(frozen=True, eq=False)
class Tally:
    """Sifted detection and error counts, split by basis and intensity.

    Counts are kept as floats so that expected-value tallies (and whole
    arrays of them) flow through the same bound arithmetic as integer
    Monte Carlo counts. ``m_*`` are error counts among the corresponding
    ``n_*``.
    """

    protocol: ProtocolParams
    n_z_mu1: Any
    n_z_mu2: Any
    n_x_mu1: Any
    n_x_mu2: Any
    m_z_mu1: Any
    m_z_mu2: Any
    m_x_mu1: Any
    m_x_mu2: Any

    @property
    def n_z(self):
        return self.n_z_mu1 + self.n_z_mu2

    @property
    def n_x(self):
        return self.n_x_mu1 + self.n_x_mu2

    @property
    def m_z(self):
        return self.m_z_mu1 + self.m_z_mu2

    @property
    def m_x(self):
        return self.m_x_mu1 + self.m_x_mu2

    @property
    def qber_z(self):
        return _safe_ratio(self.m_z, self.n_z)

    @property
    def qber_x(self):
        return _safe_ratio(self.m_x, self.n_x)

    def counts(self, basis: str):
        """(count_mu1, count_mu2) for basis 'z' or 'x'."""
        if basis == "z":
            return self.n_z_mu1, self.n_z_mu2
        if basis == "x":
            return self.n_x_mu1, self.n_x_mu2
        raise ValueError(f"basis must be 'z' or 'x', got {basis!r}")

    def errors(self, basis: str):
        if basis == "z":
            return self.m_z_mu1, self.m_z_mu2
        if basis == "x":
            return self.m_x_mu1, self.m_x_mu2
        raise ValueError(f"basis must be 'z' or 'x', got {basis!r}")


@dataclass(frozen=True, eq=False)
class AdjustedBounds:
    """Per-intensity count envelopes rescaled to the common Poisson frame,
    (e^mu / p_mu)(count +- delta), lower variants clamped at 0."""

    n_z_mu1_low: Any
    n_z_mu1_high: Any
    n_z_mu2_low: Any
    n_z_mu2_high: Any
    n_x_mu1_low: Any
    n_x_mu1_high: Any
    n_x_mu2_low: Any
    n_x_mu2_high: Any
    m_z_mu1_low: Any
    m_z_mu1_high: Any
    m_z_mu2_low: Any
    m_z_mu2_high: Any
    m_x_mu1_low: Any
    m_x_mu1_high: Any
    m_x_mu2_low: Any
    m_x_mu2_high: Any


@dataclass(frozen=True, eq=False)
class KeyLengthBreakdown:
    """Every intermediate behind a key-length evaluation.

    ``ell`` is the final nonnegative secret length in bits (integer-valued,
    stored as float so array evaluations stay uniform); ``ell_real`` is the
    unclamped, unfloored value, useful for diagnosing negative budgets.
    """

    n_z: Any
    qber_z: Any
    s_z0_lower: Any
    s_z1_lower: Any
    s_x1_lower: Any
    vx1_upper: Any
    phi_z_upper: Any
    lambda_ec: Any
    eps_terms: Any
    ell_real: Any
    ell: Any


def _safe_ratio(num, den):
    den_arr = np.asarray(den, dtype=float)
    safe = np.where(den_arr > 0, den_arr, 1.0)
    out = np.asarray(num, dtype=float) / safe
    return np.where(den_arr > 0, out, 0.0)


def binary_entropy(x):
    """Shannon entropy of a bit with bias x, in bits. 0 at x in {0, 1}."""
    x = np.asarray(x, dtype=float)
    if np.any((x < 0.0) | (x > 1.0)):
        raise ValueError("binary_entropy argument must lie in [0, 1]")
    y = 1.0 - x
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = -x * np.log2(np.where(x > 0, x, 1.0)) - y * np.log2(np.where(y > 0, y, 1.0))
    out = np.where((x > 0) & (x < 1), terms, 0.0)
    return out if out.ndim else float(out)


def hoeffding_delta(n, eps):
    """Two-sided Hoeffding deviation for n Bernoulli trials at failure
    probability eps: sqrt(n ln(1/eps) / 2)."""
    eps = np.asarray(eps, dtype=float)
    if np.any((eps <= 0.0) | (eps >= 1.0)):
        raise ValueError("hoeffding_delta failure probability must lie in (0, 1)")
    return np.sqrt(np.asarray(n, dtype=float) * np.log(1.0 / eps) / 2.0)


def tau_n(n: int, protocol: ProtocolParams):
    """Probability that an emitted pulse carries exactly n photons under
    the two-intensity Poisson mixture."""
    mu1 = np.asarray(protocol.mu1, dtype=float)
    mu2 = np.asarray(protocol.mu2, dtype=float)
    p1 = np.asarray(protocol.p_mu1, dtype=float)
    return (
        p1 * np.exp(-mu1) * mu1**n + (1.0 - p1) * np.exp(-mu2) * mu2**n
    ) / math.factorial(n)


def _envelopes(count_mu1, count_mu2, delta, protocol):
    """Rescaled envelopes (low1, high1, low2, high2) for one count family,
    lower variants clamped at 0."""
    scale1 = np.exp(protocol.mu1) / protocol.p_mu1
    scale2 = np.exp(protocol.mu2) / (1.0 - protocol.p_mu1)
    return (
        np.maximum(0.0, scale1 * (count_mu1 - delta)),
        scale1 * (count_mu1 + delta),
        np.maximum(0.0, scale2 * (count_mu2 - delta)),
        scale2 * (count_mu2 + delta),
    )


def adjusted_count_bounds(tally: Tally, eps1) -> AdjustedBounds:
    """All sixteen rescaled envelopes for a tally. The deviation for each
    family uses that family's basis total (counts and errors separately)."""
    p = tally.protocol
    nz = _envelopes(tally.n_z_mu1, tally.n_z_mu2, hoeffding_delta(tally.n_z, eps1), p)
    nx = _envelopes(tally.n_x_mu1, tally.n_x_mu2, hoeffding_delta(tally.n_x, eps1), p)
    mz = _envelopes(tally.m_z_mu1, tally.m_z_mu2, hoeffding_delta(tally.m_z, eps1), p)
    mx = _envelopes(tally.m_x_mu1, tally.m_x_mu2, hoeffding_delta(tally.m_x, eps1), p)
    return AdjustedBounds(*nz, *nx, *mz, *mx)


def _vacuum_lower_from(env, protocol):
    low1, high1, low2, high2 = env
    mu1, mu2 = protocol.mu1, protocol.mu2
    tau0 = tau_n(0, protocol)
    return np.maximum(0.0, tau0 * (mu1 * low2 - mu2 * high1) / (mu1 - mu2))


def vacuum_lower(tally: Tally, eps1):
    """Lower bound on Z-basis detections caused by vacuum pulses."""
    p = tally.protocol
    env = _envelopes(tally.n_z_mu1, tally.n_z_mu2, hoeffding_delta(tally.n_z, eps1), p)
    return _vacuum_lower_from(env, p)


def vacuum_upper(tally: Tally, eps1, basis: str = "z"):
    """Upper bound on vacuum detections in a basis: vacuum clicks land on a
    random outcome, so they number at most twice the (deviated) errors."""
    c1, c2 = tally.counts(basis)
    e1, e2 = tally.errors(basis)
    n_total = c1 + c2
    delta = hoeffding_delta(n_total, eps1)
    return np.minimum(2.0 * (e1 + e2 + delta), n_total)


def _single_lower_from(env, vacuum_up, protocol):
    low1, high1, low2, high2 = env
    mu1, mu2 = protocol.mu1, protocol.mu2
    tau0 = tau_n(0, protocol)
    tau1 = tau_n(1, protocol)
    ratio = mu2**2 / mu1**2
    bound = (
        tau1
        * mu1
        / (mu2 * (mu1 - mu2))
        * (low2 - ratio * high1 - (1.0 - ratio) * vacuum_up / tau0)
    )
    return np.maximum(0.0, bound)


def single_photon_lower(tally: Tally, basis: str, eps1):
    """Lower bound on detections in the given basis caused by single-photon
    pulses."""
    p = tally.protocol
    c1, c2 = tally.counts(basis)
    env = _envelopes(c1, c2, hoeffding_delta(c1 + c2, eps1), p)
    return _single_lower_from(env, vacuum_upper(tally, eps1, basis), p)


def _errors_upper_from(env, protocol):
    low1, high1, low2, high2 = env
    mu1, mu2 = protocol.mu1, protocol.mu2
    tau1 = tau_n(1, protocol)
    return tau1 * (high1 - low2) / (mu1 - mu2)


def single_photon_errors_upper(tally: Tally, eps1, *, cap=None):
    """Upper bound on errors among single-photon monitor-basis detections,
    clamped to [0, cap] when a cap (the single-photon population bound of
    the same basis) is supplied."""
    p = tally.protocol
    env = _envelopes(tally.m_x_mu1, tally.m_x_mu2, hoeffding_delta(tally.m_x, eps1), p)
    bound = np.maximum(0.0, _errors_upper_from(env, p))
    if cap is not None:
        bound = np.minimum(bound, np.maximum(cap, 0.0))
    return bound


def gamma_correction(a, b, c, d):
    """Random-sampling-without-replacement penalty when transferring an
    error rate b observed on d events to a disjoint set of c events, at
    failure probability a. Zero at b in {0, 1} (the limit value)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(c <= 0.0) or np.any(d <= 0.0):
        raise ValueError("gamma_correction population sizes must be positive")
    interior = (b > 0.0) & (b < 1.0)
    b_s = np.where(interior, b, 0.5)
    front = (c + d) * (1.0 - b_s) * b_s / (c * d * np.log(2.0))
    log_arg = (c + d) / (c * d * (1.0 - b_s) * b_s) * (21.0 / a) ** 2
    out = np.sqrt(front * np.log2(log_arg))
    result = np.where(interior, out, 0.0)
    return result if result.ndim else float(result)


def _phi_from(vx1_up, s_x1, s_z1, eps, asymptotic):
    sx = np.asarray(s_x1, dtype=float)
    sz = np.asarray(s_z1, dtype=float)
    usable = (sx > 0.0) & (sz > 0.0)
    rate = np.asarray(vx1_up, dtype=float) / np.where(usable, sx, 1.0)
    rate = np.clip(rate, 0.0, 1.0)
    if asymptotic:
        corr = 0.0
    else:
        corr = gamma_correction(
            eps, rate, np.where(usable, sz, 1.0), np.where(usable, sx, 1.0)
        )
    phi = np.minimum(0.5, rate + corr)
    return np.where(usable, phi, 0.5)


def phase_error_upper(tally: Tally, eps):
    """Upper bound on the single-photon phase error rate in the key basis,
    by transfer from the monitor basis. Collapses to the vacuous 1/2 when
    either single-photon population bound is empty."""
    s_z1 = single_photon_lower(tally, "z", eps)
    s_x1 = single_photon_lower(tally, "x", eps)
    vx1 = single_photon_errors_upper(tally, eps, cap=s_x1)
    out = _phi_from(vx1, s_x1, s_z1, eps, asymptotic=False)
    return out if np.ndim(out) else float(out)


def ec_leakage(n_z, qber_z, efficiency=1.16, *, measured=None):
    """Bits disclosed during error correction: the measured transcript
    leakage when available, otherwise efficiency * n_Z * h(QBER_Z)."""
    if measured is not None:
        return measured
    return efficiency * np.asarray(n_z, dtype=float) * binary_entropy(qber_z)


def security_overhead(eps_sec, eps_cor):
    """Fixed bit cost of composable security: the concentration/correction
    budget split plus the correctness-verification term."""
    return 6.0 * np.log2(EPS_SPLIT / np.asarray(eps_sec, dtype=float)) + np.log2(
        2.0 / np.asarray(eps_cor, dtype=float)
    )


def secret_key_length(
    tally: Tally,
    security: SecurityParams,
    *,
    lambda_ec=None,
    asymptotic: bool = False,
) -> KeyLengthBreakdown:
    """Extractable secret length for one block, with the full breakdown.

    ``lambda_ec`` overrides the error-correction leakage with a measured
    value (in bits). ``asymptotic`` drops all finite-statistics deviations
    and the fixed overhead, leaving the infinite-key limit.
    """
    p = tally.protocol
    eps1 = security.eps_sec / EPS_SPLIT

    n_z = np.asarray(tally.n_z, dtype=float)
    n_x = np.asarray(tally.n_x, dtype=float)
    qber_z = tally.qber_z

    if asymptotic:
        d_nz = d_nx = d_mz = d_mx = 0.0
    else:
        d_nz = hoeffding_delta(n_z, eps1)
        d_nx = hoeffding_delta(n_x, eps1)
        d_mz = hoeffding_delta(tally.m_z, eps1)
        d_mx = hoeffding_delta(tally.m_x, eps1)

    env_nz = _envelopes(tally.n_z_mu1, tally.n_z_mu2, d_nz, p)
    env_nx = _envelopes(tally.n_x_mu1, tally.n_x_mu2, d_nx, p)
    env_mx = _envelopes(tally.m_x_mu1, tally.m_x_mu2, d_mx, p)

    vac_up_z = np.minimum(2.0 * (tally.m_z + d_nz), n_z)
    vac_up_x = np.minimum(2.0 * (tally.m_x + d_nx), n_x)

    s_z0 = _vacuum_lower_from(env_nz, p)
    s_z1 = _single_lower_from(env_nz, vac_up_z, p)
    s_x1 = _single_lower_from(env_nx, vac_up_x, p)
    vx1 = np.maximum(0.0, _errors_upper_from(env_mx, p))
    vx1 = np.minimum(vx1, np.maximum(s_x1, 0.0))
    phi = _phi_from(vx1, s_x1, s_z1, eps1, asymptotic)

    leak = ec_leakage(n_z, qber_z, security.ec_efficiency, measured=lambda_ec)
    eps_terms = 0.0 if asymptotic else security_overhead(security.eps_sec, security.eps_cor)

    ell_real = s_z0 + s_z1 * (1.0 - binary_entropy(phi)) - leak - eps_terms
    ell = np.maximum(0.0, np.floor(np.minimum(ell_real, n_z)))

    return KeyLengthBreakdown(
        n_z=n_z,
        qber_z=qber_z,
        s_z0_lower=s_z0,
        s_z1_lower=s_z1,
        s_x1_lower=s_x1,
        vx1_upper=vx1,
        phi_z_upper=phi,
        lambda_ec=leak,
        eps_terms=eps_terms,
        ell_real=ell_real,
        ell=ell,
    )


def secret_key_rate(breakdown: KeyLengthBreakdown, block_time_s):
    """Secret bits per second for a block accumulated over block_time_s."""
    t = np.asarray(block_time_s, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("block_time_s must be positive")
    return breakdown.ell / t
