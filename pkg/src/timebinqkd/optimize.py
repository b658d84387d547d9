"""Protocol-parameter search.

Finds the source-side settings (the two decoy intensities and the
basis/intensity biases) that maximize the expected secret key rate for
a fixed channel, detector, block size and security target. The
receiver's basis split is not searched: a passive 50/50 coupler is
assumed throughout, so ``p_z_bob`` stays at one half.

The search runs independent Nelder-Mead simplexes from a short
scrambled-Sobol sequence of interior starts and keeps the best point.
Each bounded coordinate is driven through a log-odds transform, so the
simplex moves in an unconstrained space and every candidate decodes to
a point strictly inside the box; the coupling ``mu2 <= mu1 - gap`` is
folded into the transform instead of being penalized. The objective is
the analytic rate (expected tally, then the finite-key bound) and is a
pure function of the decoded point, which makes whole runs reproducible
from the seed alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize as _sciopt
from scipy.stats import qmc

from .channel import evaluate_config
from .finitekey import KeyLengthBreakdown
from .model import (
    DEFAULTS,
    BlockConfig,
    ChannelParams,
    DetectorParams,
    ExperimentConfig,
    ProtocolParams,
    SecurityParams,
)

__all__ = [
    "SearchBounds",
    "OptimizationResult",
    "optimize",
    "optimize_config",
]

DEFAULT_STARTS = 16
DEFAULT_MAX_EVALS = 2000

# Relative spread of the rate across the simplex below which a start is
# considered converged. The objective is -log(rate), so an absolute
# f-tolerance is a relative rate tolerance.
_REL_TOL = 1e-6

# Objective value assigned to points with no positive rate. Finite so
# the simplex can still rank vertices against feasible ones.
_PENALTY = 1e9

_CLIP = 40.0


@dataclass(frozen=True)
class SearchBounds:
    """Box for the four searched parameters.

    ``mu2`` has a coupled upper bound ``mu1 - mu_gap`` so the decoy
    state always stays a fixed margin below the signal state. Both
    probabilities share one interval.
    """

    mu1_lo: float = 0.05
    mu1_hi: float = 1.0
    mu2_lo: float = 0.01
    mu_gap: float = 0.02
    p_lo: float = 0.05
    p_hi: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.mu1_lo < self.mu1_hi:
            raise ValueError("need 0 < mu1_lo < mu1_hi")
        if not 0.0 < self.mu2_lo < self.mu1_lo - self.mu_gap:
            raise ValueError("need 0 < mu2_lo < mu1_lo - mu_gap")
        if not 0.0 < self.p_lo < self.p_hi < 1.0:
            raise ValueError("need 0 < p_lo < p_hi < 1")


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    """Outcome of a search.

    ``skr_bps`` is recomputed from ``best`` after the search, so it can
    never drift from what the returned parameters actually achieve.
    ``trace`` lists every objective evaluation in order as
    ``(params, skr)`` pairs. A search where no evaluated point produced
    a positive rate reports ``feasible == False`` with ``skr_bps == 0``
    and the breakdown of the (zero-length) best candidate.
    """

    best: ProtocolParams
    skr_bps: float
    breakdown: KeyLengthBreakdown
    evaluations: int
    trace: tuple[tuple[ProtocolParams, float], ...]

    @property
    def feasible(self) -> bool:
        return self.skr_bps > 0.0


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_CLIP, _CLIP)))


def _logit(u):
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return np.log(u / (1.0 - u))


class _Space:
    """Maps unconstrained simplex coordinates to protocol parameters.

    With ``fixed_intensities`` the intensities are pinned and only the
    two probabilities are searched (dimension 2 instead of 4).
    """

    def __init__(self, bounds: SearchBounds, fixed_intensities=None):
        self.bounds = bounds
        self.fixed = fixed_intensities
        if fixed_intensities is not None:
            mu1, mu2 = fixed_intensities
            if not bounds.mu1_lo <= mu1 <= bounds.mu1_hi:
                raise ValueError(f"fixed mu1 {mu1} outside bounds")
            if not bounds.mu2_lo <= mu2 <= mu1 - bounds.mu_gap:
                raise ValueError(f"fixed mu2 {mu2} outside bounds")
        self.ndim = 2 if fixed_intensities is not None else 4

    def decode(self, z) -> tuple[float, float, float, float]:
        b = self.bounds
        u = _logistic(np.asarray(z, dtype=float))
        if self.fixed is not None:
            mu1, mu2 = self.fixed
            pu = u
        else:
            mu1 = b.mu1_lo + (b.mu1_hi - b.mu1_lo) * u[0]
            mu2 = b.mu2_lo + (mu1 - b.mu_gap - b.mu2_lo) * u[1]
            pu = u[2:]
        p_mu1 = b.p_lo + (b.p_hi - b.p_lo) * pu[0]
        p_z_alice = b.p_lo + (b.p_hi - b.p_lo) * pu[1]
        return float(mu1), float(mu2), float(p_mu1), float(p_z_alice)


class _Objective:
    """Callable negative-log-rate objective with an evaluation trace."""

    def __init__(self, space, channel, detector, block, security, pulse_rate_hz):
        self.space = space
        self.channel = channel
        self.detector = detector
        self.block = block
        self.security = security
        self.pulse_rate_hz = pulse_rate_hz
        self.trace: list[tuple[ProtocolParams, float]] = []

    def params_at(self, z) -> ProtocolParams:
        mu1, mu2, p_mu1, p_z_alice = self.space.decode(z)
        return ProtocolParams(
            mu1=mu1,
            mu2=mu2,
            p_mu1=p_mu1,
            p_z_alice=p_z_alice,
            p_z_bob=0.5,
            pulse_rate_hz=self.pulse_rate_hz,
        )

    def rate(self, params: ProtocolParams) -> tuple[float, KeyLengthBreakdown]:
        config = ExperimentConfig(
            protocol=params,
            channel=self.channel,
            detector=self.detector,
            security=self.security,
            block=self.block,
        )
        breakdown, block_time = evaluate_config(config)
        return float(breakdown.ell / block_time), breakdown

    def __call__(self, z) -> float:
        params = self.params_at(z)
        skr, _ = self.rate(params)
        self.trace.append((params, skr))
        if skr <= 0.0:
            return _PENALTY
        return -math.log(skr)


def _tie_key(params: ProtocolParams, skr: float):
    # Max by rate; among equal rates prefer the smaller signal
    # intensity, then the smaller remaining coordinates.
    return (skr, -params.mu1, -params.mu2, -params.p_mu1, -params.p_z_alice)


def optimize(
    channel: ChannelParams,
    detector: DetectorParams,
    block: BlockConfig,
    security: SecurityParams,
    bounds: SearchBounds | None = None,
    *,
    pulse_rate_hz: float | None = None,
    fixed_intensities: tuple[float, float] | None = None,
    starts: int = DEFAULT_STARTS,
    max_evals: int = DEFAULT_MAX_EVALS,
    seed: int = 0,
) -> OptimizationResult:
    """Search for the rate-maximizing protocol parameters.

    ``starts`` scrambled-Sobol points seed independent simplex runs;
    each run stops once the relative rate spread across its simplex
    drops below 1e-6 or after ``max_evals`` objective evaluations.
    ``fixed_intensities=(mu1, mu2)`` restricts the search to the two
    probabilities. The result is deterministic for a given ``seed``.
    """
    if bounds is None:
        bounds = SearchBounds()
    if pulse_rate_hz is None:
        pulse_rate_hz = DEFAULTS["protocol.pulse_rate_hz"]
    if starts < 1:
        raise ValueError("need at least one start")

    space = _Space(bounds, fixed_intensities)
    objective = _Objective(space, channel, detector, block, security, pulse_rate_hz)

    sampler = qmc.Sobol(d=space.ndim, scramble=True, seed=seed)
    start_points = _logit(sampler.random(starts))

    candidates: list[np.ndarray] = []
    for z0 in start_points:
        res = _sciopt.minimize(
            objective,
            z0,
            method="Nelder-Mead",
            options={
                "fatol": _REL_TOL,
                "xatol": 1e9,  # terminate on the rate spread alone
                "maxfev": max_evals,
                "disp": False,
            },
        )
        candidates.append(np.asarray(res.x, dtype=float))

    best_params = None
    best_breakdown = None
    best_skr = -1.0
    best_key = None
    for z in candidates:
        params = objective.params_at(z)
        skr, breakdown = objective.rate(params)
        key = _tie_key(params, skr)
        if best_key is None or key > best_key:
            best_params, best_breakdown, best_skr, best_key = (
                params,
                breakdown,
                skr,
                key,
            )

    return OptimizationResult(
        best=best_params,
        skr_bps=max(best_skr, 0.0),
        breakdown=best_breakdown,
        evaluations=len(objective.trace),
        trace=tuple(objective.trace),
    )


def optimize_config(config: ExperimentConfig, **kwargs) -> OptimizationResult:
    """Run the search on the channel/detector/block/security of an
    existing config, keeping its pulse rate."""
    kwargs.setdefault("pulse_rate_hz", config.protocol.pulse_rate_hz)
    return optimize(
        config.channel,
        config.detector,
        config.block,
        config.security,
        **kwargs,
    )
