"""Experiment configuration: typed parameter groups, the text config format,
validation, and the canonical digest used to pair two session endpoints.

The config format is plain UTF-8 ``key = value`` lines. Keys are dotted
(section.field, e.g. ``protocol.mu1 = 0.49``), ``#`` starts a comment, blank
lines are ignored, and values are floats (scientific notation accepted).
Unknown keys are rejected; required keys must be present; every other key has
a documented default. Serialization emits keys in a fixed order with
round-trip-exact float reprs, so parse(serialize(cfg)) == cfg.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace

__all__ = [
    "ProtocolParams",
    "ChannelParams",
    "DetectorParams",
    "SecurityParams",
    "BlockConfig",
    "ExperimentConfig",
    "ConfigError",
    "ValidationError",
    "parse_config",
    "serialize_config",
    "config_digest",
    "validate",
    "ensure_valid",
    "DEFAULTS",
    "REQUIRED_KEYS",
]


class ConfigError(Exception):
    """Raised for malformed config text. Carries the 1-based line number
    when the problem is tied to a specific line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(Exception):
    """Raised when a structurally well-formed config violates invariants.

    ``violations`` lists every failed check, not just the first one.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ProtocolParams:
    """Source-side protocol choices: signal/decoy intensities and the
    basis/intensity biases. ``p_z_bob`` is the receiver's passive
    beamsplitter ratio."""

    mu1: float
    mu2: float
    p_mu1: float
    p_z_alice: float
    p_z_bob: float
    pulse_rate_hz: float


@dataclass(frozen=True)
class ChannelParams:
    length_km: float
    atten_db_per_km: float
    extra_loss_db: float


@dataclass(frozen=True)
class DetectorParams:
    """Receiver properties. ``gate_window_s`` converts the dark rate to a
    per-slot dark-click probability; the jitter fields feed the timing
    error tail; ``intrinsic_error`` and ``phase_misalignment`` are the
    Z- and X-basis error floors."""

    efficiency: float
    dark_rate_hz: float
    gate_window_s: float
    intrinsic_error: float
    phase_misalignment: float
    jitter_sigma_s: float
    bin_halfwidth_s: float


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float
    eps_cor: float
    ec_efficiency: float


@dataclass(frozen=True)
class BlockConfig:
    n_z_target: float


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: ProtocolParams
    channel: ChannelParams
    detector: DetectorParams
    security: SecurityParams
    block: BlockConfig


# Section name -> (dataclass, config attribute).
_SECTIONS = {
    "protocol": ProtocolParams,
    "channel": ChannelParams,
    "detector": DetectorParams,
    "security": SecurityParams,
    "block": BlockConfig,
}

REQUIRED_KEYS = (
    "protocol.mu1",
    "protocol.mu2",
    "channel.length_km",
    "security.eps_sec",
    "security.eps_cor",
    "block.n_z_target",
)

DEFAULTS: dict[str, float] = {
    "protocol.p_mu1": 0.7,
    "protocol.p_z_alice": 0.9,
    "protocol.p_z_bob": 0.5,
    "protocol.pulse_rate_hz": 2.5e9,
    "channel.atten_db_per_km": 0.17,
    "channel.extra_loss_db": 0.0,
    "detector.efficiency": 0.5,
    "detector.dark_rate_hz": 0.1,
    "detector.gate_window_s": 100e-12,
    "detector.intrinsic_error": 0.005,
    "detector.phase_misalignment": 0.011,
    "detector.jitter_sigma_s": 40e-12,
    "detector.bin_halfwidth_s": 150e-12,
    "security.ec_efficiency": 1.16,
}

# Canonical key order for serialization and digesting.
_KEY_ORDER = tuple(
    f"{section}.{f.name}"
    for section, cls in _SECTIONS.items()
    for f in fields(cls)
)

_KNOWN_KEYS = frozenset(_KEY_ORDER)


def parse_config(text: str, *, analysis: bool = True) -> ExperimentConfig:
    """Parse config text and validate it.

    ``analysis`` selects the block-size floor: analytic key-rate work
    requires n_z_target >= 1e4, while simulation/session toys only need
    >= 64.
    """
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, value_text = line.partition("=")
        key = key.strip()
        value_text = value_text.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        try:
            value = float(value_text)
        except ValueError:
            raise ConfigError(
                f"value for {key!r} is not a number: {value_text!r}", line=lineno
            ) from None
        if not math.isfinite(value):
            raise ConfigError(f"value for {key!r} must be finite", line=lineno)
        values[key] = value

    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    for key, default in DEFAULTS.items():
        values.setdefault(key, default)

    sections = {}
    for section, cls in _SECTIONS.items():
        kwargs = {f.name: values[f"{section}.{f.name}"] for f in fields(cls)}
        sections[section] = cls(**kwargs)
    config = ExperimentConfig(**sections)
    ensure_valid(config, analysis=analysis)
    return config


def serialize_config(config: ExperimentConfig) -> str:
    """Emit the canonical text form (fixed key order, exact float reprs)."""
    lines = []
    for key in _KEY_ORDER:
        section, field = key.split(".")
        value = getattr(getattr(config, section), field)
        lines.append(f"{key} = {float(value)!r}")
    return "\n".join(lines) + "\n"


def config_digest(config: ExperimentConfig) -> bytes:
    """SHA-256 of the canonical serialization. Both session endpoints must
    agree on this before any quantum-side data is exchanged."""
    return hashlib.sha256(serialize_config(config).encode("utf-8")).digest()


def _check_prob(violations: list[str], name: str, value: float) -> None:
    if not (0.0 < value < 1.0):
        violations.append(f"{name} must lie strictly in (0, 1), got {value!r}")


def validate(config: ExperimentConfig, *, analysis: bool = True) -> list[str]:
    """Return a list of invariant violations (empty when the config is sound).

    Never raises on any field values; total over whatever parse_config
    produces.
    """
    v: list[str] = []
    p = config.protocol
    if not (0.0 < p.mu2 < p.mu1 <= 1.0):
        v.append(
            "protocol intensities must satisfy 0 < mu2 < mu1 <= 1, "
            f"got mu1={p.mu1!r}, mu2={p.mu2!r}"
        )
    _check_prob(v, "protocol.p_mu1", p.p_mu1)
    _check_prob(v, "protocol.p_z_alice", p.p_z_alice)
    _check_prob(v, "protocol.p_z_bob", p.p_z_bob)
    if not p.pulse_rate_hz > 0:
        v.append(f"protocol.pulse_rate_hz must be positive, got {p.pulse_rate_hz!r}")

    c = config.channel
    if c.length_km < 0:
        v.append(f"channel.length_km must be nonnegative, got {c.length_km!r}")
    if c.atten_db_per_km < 0:
        v.append(f"channel.atten_db_per_km must be nonnegative, got {c.atten_db_per_km!r}")
    if c.extra_loss_db < 0:
        v.append(f"channel.extra_loss_db must be nonnegative, got {c.extra_loss_db!r}")

    d = config.detector
    if not (0.0 < d.efficiency <= 1.0):
        v.append(f"detector.efficiency must lie in (0, 1], got {d.efficiency!r}")
    if d.dark_rate_hz < 0:
        v.append(f"detector.dark_rate_hz must be nonnegative, got {d.dark_rate_hz!r}")
    if not d.gate_window_s > 0:
        v.append(f"detector.gate_window_s must be positive, got {d.gate_window_s!r}")
    if not (0.0 <= d.intrinsic_error < 0.5):
        v.append(f"detector.intrinsic_error must lie in [0, 0.5), got {d.intrinsic_error!r}")
    if not (0.0 <= d.phase_misalignment < 0.5):
        v.append(
            f"detector.phase_misalignment must lie in [0, 0.5), got {d.phase_misalignment!r}"
        )
    if d.jitter_sigma_s < 0:
        v.append(f"detector.jitter_sigma_s must be nonnegative, got {d.jitter_sigma_s!r}")
    if not d.bin_halfwidth_s > 0:
        v.append(f"detector.bin_halfwidth_s must be positive, got {d.bin_halfwidth_s!r}")
    if d.dark_rate_hz * d.gate_window_s >= 1.0:
        v.append("detector dark click probability per slot must be below 1")

    s = config.security
    _check_prob(v, "security.eps_sec", s.eps_sec)
    _check_prob(v, "security.eps_cor", s.eps_cor)
    if s.ec_efficiency < 1.0:
        v.append(f"security.ec_efficiency must be >= 1.0, got {s.ec_efficiency!r}")

    floor = 1e4 if analysis else 64
    if not config.block.n_z_target >= floor:
        kind = "analysis" if analysis else "simulation"
        v.append(
            f"block.n_z_target must be >= {floor:g} for {kind} use, "
            f"got {config.block.n_z_target!r}"
        )
    return v


def ensure_valid(config: ExperimentConfig, *, analysis: bool = True) -> ExperimentConfig:
    """Raise ValidationError listing every violation; return config unchanged
    when it is sound."""
    violations = validate(config, analysis=analysis)
    if violations:
        raise ValidationError(violations)
    return config


def with_overrides(config: ExperimentConfig, **dotted: float) -> ExperimentConfig:
    """Functional update by dotted key, e.g. with_overrides(cfg, **{'protocol.mu1': 0.3}).

    Convenience for sweeps; performs no validation on its own.
    """
    grouped: dict[str, dict[str, float]] = {}
    for key, value in dotted.items():
        if key not in _KNOWN_KEYS:
            raise KeyError(f"unknown config key {key!r}")
        section, field = key.split(".")
        grouped.setdefault(section, {})[field] = value
    updates = {
        section: replace(getattr(config, section), **kwargs)
        for section, kwargs in grouped.items()
    }
    return replace(config, **updates)
