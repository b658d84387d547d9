"""Command-line front end.

Subcommands cover the analytic rate for one configuration (``keyrate``),
Monte Carlo block sampling (``simulate``), running the two-party
protocol in-process or over TCP (``session``), the per-distance summary
built from the shipped operating profiles (``table``), a rate-versus-
distance sweep (``curve``), and the protocol-parameter search
(``optimize``).

Output conventions
  Single results are JSON on stdout (or ``--output``); sweeps are CSV.
  Every document embeds a manifest (tool version, subcommand, config
  digest, seed, output paths), as a ``manifest`` object in JSON and as
  a leading ``# manifest: {...}`` comment line in CSV. Outputs carry no
  timestamps, so a rerun with the same arguments is byte-identical.

Exit codes
  0  success
  2  configuration or argument problem
  3  no positive key rate (the result is still printed)
  4  resource guard tripped (pulse-by-pulse run too large)
  5  session aborted (the reason is in the report)
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import math
import os
import socket
import sys
import time
from importlib import resources

import numpy as np

from . import __version__
from .channel import (
    evaluate_config,
    expected_tally,
    idealized_bb84_skr,
    raw_key_rate,
    transmittance,
)
from .finitekey import KeyLengthBreakdown, Tally, secret_key_length
from .model import (
    ConfigError,
    ExperimentConfig,
    ValidationError,
    config_digest,
    parse_config,
)
from .optimize import optimize_config
from .session import (
    DEFAULT_TIMEOUT_S,
    SessionReport,
    SocketTransport,
    make_inprocess_pair,
    run_pair,
    run_session,
)
from .simulate import (
    MAX_PULSEWISE,
    SimulationError,
    _sifted_per_pulse,
    export_bitstreams,
    simulate_block_aggregate,
    simulate_block_pulsewise,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_KEY = 3
EXIT_RESOURCE = 4
EXIT_ABORT = 5

# Shipped per-distance operating profiles, with the reference secret key
# rate each one is compared against in the summary table. The 421.1 km
# reference is the rate over acquisition time alone; the headline figure
# for that span also counts duty-cycle dead time, which the analytic
# model does not represent.
BUNDLED_PROFILES = (
    ("251.7km.conf", 4.9e3),
    ("302.1km.conf", 0.79e3),
    ("354.5km.conf", 62.0),
    ("404.9km.conf", 6.5),
    ("421.1km.conf", 0.49),
)


class CliError(Exception):
    """Fatal command error carrying its exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def bundled_profile_text(name: str) -> str:
    """Return the text of a shipped config bundle by file name."""
    ref = resources.files("timebinqkd").joinpath("configs", name)
    return ref.read_text(encoding="utf-8")


def _load_config_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config {path!r}: {exc}") from exc


def _parse(text: str, *, analysis: bool = True) -> ExperimentConfig:
    try:
        return parse_config(text, analysis=analysis)
    except (ConfigError, ValidationError) as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from exc


def _manifest(subcommand: str, *, digest=None, seed=None, outputs=("-",)) -> dict:
    return {
        "tool": f"timebinqkd {__version__}",
        "subcommand": subcommand,
        "config_digest": digest,
        "seed": seed,
        "outputs": list(outputs),
    }


def _breakdown_dict(bd: KeyLengthBreakdown) -> dict:
    return {f.name: float(getattr(bd, f.name)) for f in dataclasses.fields(bd)}


def _tally_dict(tally: Tally) -> dict:
    keys = (
        "n_z_mu1", "n_z_mu2", "n_x_mu1", "n_x_mu2",
        "m_z_mu1", "m_z_mu2", "m_x_mu1", "m_x_mu2",
    )
    return {k: float(getattr(tally, k)) for k in keys}


def _write_text(path: str | None, text: str) -> None:
    """Write to stdout for ``None``/``-``, else atomically to ``path``."""
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _emit_json(document: dict, path: str | None) -> None:
    _write_text(path, json.dumps(document, indent=2) + "\n")


def _emit_csv(manifest: dict, header: list[str], rows: list[list], path) -> None:
    buf = io.StringIO()
    buf.write("# manifest: " + json.dumps(manifest) + "\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_csv_cell(v) for v in row) + "\n")
    _write_text(path, buf.getvalue())


def _csv_cell(value) -> str:
    if isinstance(value, float):
        # plain-float repr is the shortest round-trip form; numpy
        # subclasses would otherwise print their type name
        return repr(float(value))
    return str(value)


# ---------------------------------------------------------------------------
# keyrate


def cmd_keyrate(args) -> int:
    config = _parse(_load_config_text(args.config))
    digest = config_digest(config).hex()
    manifest = _manifest(
        "keyrate", digest=digest, outputs=[args.output or "-"]
    )
    if args.idealized:
        skr = idealized_bb84_skr(config.channel.length_km)
        document = {
            "manifest": manifest,
            "mode": "idealized",
            "length_km": config.channel.length_km,
            "skr_bps": float(skr),
        }
        _emit_json(document, args.output)
        return EXIT_OK if skr > 0.0 else EXIT_NO_KEY

    breakdown, block_time = evaluate_config(config)
    skr = float(breakdown.ell) / block_time
    document = {
        "manifest": manifest,
        "mode": "expected",
        "length_km": config.channel.length_km,
        "total_loss_db": -10.0 * math.log10(transmittance(config.channel)),
        "block_time_s": float(block_time),
        "skr_bps": skr,
        "breakdown": _breakdown_dict(breakdown),
    }
    _emit_json(document, args.output)
    return EXIT_OK if breakdown.ell > 0 else EXIT_NO_KEY


# ---------------------------------------------------------------------------
# simulate


def _default_pulses(config: ExperimentConfig) -> int:
    sifted = _sifted_per_pulse(config)
    if not sifted > 0.0:
        raise CliError(EXIT_CONFIG, "detection probability is zero; block never fills")
    return int(round(config.block.n_z_target / sifted))


def cmd_simulate(args) -> int:
    config = _parse(_load_config_text(args.config))
    digest = config_digest(config).hex()
    pulses = args.pulses
    if args.mode == "pulsewise":
        if pulses is None:
            pulses = _default_pulses(config)
        if pulses > MAX_PULSEWISE:
            raise CliError(
                EXIT_RESOURCE,
                f"pulse-by-pulse run of {pulses} slots exceeds the "
                f"{MAX_PULSEWISE} limit; lower block.n_z_target or --pulses",
            )

    header = [
        "seed", "n_pulses",
        "n_z_mu1", "n_z_mu2", "n_x_mu1", "n_x_mu2",
        "m_z_mu1", "m_z_mu2", "m_x_mu1", "m_x_mu2",
        "qber_z", "phi_z_upper", "lambda_ec", "ell", "skr_bps",
    ]
    rows = []
    for seed in range(args.seed, args.seed + args.seeds):
        if args.mode == "aggregate":
            tally, true_tally = simulate_block_aggregate(config, seed, n_pulses=pulses)
            n_pulses = int(true_tally.pulses.sum())
        else:
            tally, _, _ = simulate_block_pulsewise(config, seed, pulses)
            n_pulses = pulses
        breakdown = secret_key_length(tally, config.security)
        block_time = n_pulses / config.protocol.pulse_rate_hz
        rows.append(
            [seed, n_pulses]
            + [int(v) for v in _tally_dict(tally).values()]
            + [
                float(tally.qber_z),
                float(breakdown.phi_z_upper),
                float(breakdown.lambda_ec),
                float(breakdown.ell),
                float(breakdown.ell) / block_time,
            ]
        )

    manifest = _manifest(
        "simulate",
        digest=digest,
        seed=args.seed,
        outputs=[args.output or "-"],
    )
    manifest["mode"] = args.mode
    manifest["seeds"] = args.seeds
    _emit_csv(manifest, header, rows, args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# session


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise CliError(EXIT_CONFIG, f"address must be HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad port in {text!r}") from None


def _listen_socket(addr: tuple[str, int], timeout_s: float) -> socket.socket:
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind(addr)
    server.listen(1)
    server.settimeout(timeout_s)
    try:
        conn, _ = server.accept()
    except socket.timeout:
        raise CliError(EXIT_ABORT, "timed out waiting for the peer to connect") from None
    finally:
        server.close()
    return conn


def _connect_socket(addr: tuple[str, int], timeout_s: float) -> socket.socket:
    # The peer may still be starting up; retry until the deadline.
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            return socket.create_connection(addr, timeout=1.0)
        except OSError:
            if time.monotonic() >= deadline:
                raise CliError(EXIT_ABORT, f"cannot connect to {addr[0]}:{addr[1]}") from None
            time.sleep(0.05)


def _session_views(config: ExperimentConfig, seed: int, pulses: int):
    _, _, records = simulate_block_pulsewise(config, seed, pulses)
    return export_bitstreams(records)


def _report_document(
    report: SessionReport, manifest: dict, key_file: str | None
) -> dict:
    document = {
        "manifest": manifest,
        "role": report.role,
        "ok": report.ok,
        "abort_reason": report.abort_reason.name if report.abort_reason else None,
        "key_bits": int(report.secret_key.size),
        "key_file": key_file,
        "n_z_sifted": report.n_z_sifted,
        "n_x_sifted": report.n_x_sifted,
        "sample_size": report.sample_size,
        "sample_errors": report.sample_errors,
        "qber_estimate": report.qber_estimate,
        "leak_bits": report.leak_bits,
        "phases": [
            {
                "name": ph.name,
                "seconds": ph.seconds,
                "messages": ph.messages,
                "bytes": ph.bytes,
            }
            for ph in report.phases
        ],
    }
    if report.tally is not None:
        document["tally"] = _tally_dict(report.tally)
    if report.breakdown is not None:
        document["breakdown"] = _breakdown_dict(report.breakdown)
    return document


def _write_key(path: str, key: np.ndarray) -> None:
    data = np.packbits(key, bitorder="little").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _emit_session_report(report, out_dir, manifest, role) -> None:
    key_file = None
    if report.ok and report.secret_key.size:
        key_file = os.path.join(out_dir, f"{role}.key")
        _write_key(key_file, report.secret_key)
    document = _report_document(report, manifest, key_file)
    _emit_json(document, os.path.join(out_dir, f"{role}.report.json"))


def cmd_session(args) -> int:
    config = _parse(_load_config_text(args.config), analysis=False)
    digest = config_digest(config).hex()
    pulses = args.pulses if args.pulses is not None else _default_pulses(config)
    if pulses > MAX_PULSEWISE:
        raise CliError(
            EXIT_RESOURCE,
            f"session needs a pulse-by-pulse run of {pulses} slots, over the "
            f"{MAX_PULSEWISE} limit; lower block.n_z_target or --pulses",
        )
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = _manifest(
        "session", digest=digest, seed=args.seed, outputs=[args.out_dir]
    )

    alice_view, bob_view = _session_views(config, args.seed, pulses)

    if args.role == "both":
        ta, tb = make_inprocess_pair()
        alice_report, bob_report = run_pair(
            config, alice_view, bob_view,
            timeout_s=args.timeout, transports=(ta, tb),
        )
        _emit_session_report(alice_report, args.out_dir, manifest, "alice")
        _emit_session_report(bob_report, args.out_dir, manifest, "bob")
        if alice_report.ok and bob_report.ok:
            return EXIT_OK
        reason = (alice_report.abort_reason or bob_report.abort_reason).name
        print(f"session aborted: {reason}", file=sys.stderr)
        return EXIT_ABORT

    if (args.listen is None) == (args.connect is None):
        raise CliError(EXIT_CONFIG, "split roles need exactly one of --listen/--connect")
    if args.listen is not None:
        sock = _listen_socket(_parse_addr(args.listen), args.timeout)
    else:
        sock = _connect_socket(_parse_addr(args.connect), args.timeout)
    view = alice_view if args.role == "alice" else bob_view
    try:
        report = run_session(
            args.role, SocketTransport(sock), config, view, timeout_s=args.timeout
        )
    finally:
        sock.close()
    _emit_session_report(report, args.out_dir, manifest, args.role)
    if report.ok:
        return EXIT_OK
    print(f"session aborted: {report.abort_reason.name}", file=sys.stderr)
    return EXIT_ABORT


# ---------------------------------------------------------------------------
# table


def cmd_table(args) -> int:
    header = [
        "length_km", "total_loss_db", "mu1", "mu2", "n_z_target",
        "qber_z", "phi_z_upper", "raw_rate_bps",
        "skr_bps", "skr_reference_bps", "ratio",
    ]
    rows = []
    for name, reference in BUNDLED_PROFILES:
        config = _parse(bundled_profile_text(name))
        et = expected_tally(config)
        breakdown, block_time = evaluate_config(config)
        skr = float(breakdown.ell) / block_time
        rows.append([
            config.channel.length_km,
            -10.0 * math.log10(transmittance(config.channel)),
            config.protocol.mu1,
            config.protocol.mu2,
            config.block.n_z_target,
            float(et.qber_z),
            float(breakdown.phi_z_upper),
            float(raw_key_rate(config)),
            skr,
            reference,
            skr / reference,
        ])
    manifest = _manifest("table", outputs=[args.output or "-"])
    manifest["profiles"] = [name for name, _ in BUNDLED_PROFILES]
    _emit_csv(manifest, header, rows, args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# curve


def cmd_curve(args) -> int:
    if args.step <= 0:
        raise CliError(EXIT_CONFIG, "--step must be positive")
    if args.stop < args.start or args.start < 0:
        raise CliError(EXIT_CONFIG, "need 0 <= start <= stop")
    if args.template is not None:
        template = _parse(_load_config_text(args.template))
    else:
        template = _parse(bundled_profile_text("421.1km.conf"))
    digest = config_digest(template).hex()

    header = ["length_km", "skr_bps", "idealized_skr_bps"]
    rows = []
    km = args.start
    while km <= args.stop + 1e-9:
        channel_at = dataclasses.replace(template.channel, length_km=km)
        config = dataclasses.replace(template, channel=channel_at)
        breakdown, block_time = evaluate_config(config)
        rows.append([
            km,
            float(breakdown.ell) / block_time,
            float(idealized_bb84_skr(km)),
        ])
        km = round(km + args.step, 9)
    manifest = _manifest("curve", digest=digest, outputs=[args.output or "-"])
    _emit_csv(manifest, header, rows, args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# optimize


def cmd_optimize(args) -> int:
    config = _parse(_load_config_text(args.config))
    digest = config_digest(config).hex()
    fixed = None
    if args.fix_intensities:
        fixed = (config.protocol.mu1, config.protocol.mu2)
    result = optimize_config(config, seed=args.seed, fixed_intensities=fixed)
    best = result.best
    skrs = [skr for _, skr in result.trace]
    document = {
        "manifest": _manifest(
            "optimize", digest=digest, seed=args.seed, outputs=[args.output or "-"]
        ),
        "feasible": result.feasible,
        "skr_bps": result.skr_bps,
        "best": {
            "mu1": best.mu1,
            "mu2": best.mu2,
            "p_mu1": best.p_mu1,
            "p_z_alice": best.p_z_alice,
            "p_z_bob": best.p_z_bob,
            "pulse_rate_hz": best.pulse_rate_hz,
        },
        "breakdown": _breakdown_dict(result.breakdown),
        "trace_summary": {
            "evaluations": result.evaluations,
            "feasible_points": sum(1 for s in skrs if s > 0.0),
            "best_seen_bps": max(skrs, default=0.0),
        },
    }
    _emit_json(document, args.output)
    return EXIT_OK if result.feasible else EXIT_NO_KEY


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="timebinqkd",
        description="Decoy-state time-bin QKD: rates, simulation, and the "
        "two-party protocol.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keyrate", help="analytic key rate for one config")
    p.add_argument("config")
    p.add_argument("--idealized", action="store_true",
                   help="loss-limited reference system at the config's distance")
    p.add_argument("-o", "--output", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_keyrate)

    p = sub.add_parser("simulate", help="Monte Carlo blocks, one CSV row per seed")
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=1, help="number of blocks")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--mode", choices=("aggregate", "pulsewise"), default="aggregate")
    p.add_argument("--pulses", type=int, help="override the block length in pulses")
    p.add_argument("-o", "--output", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("session", help="run the two-party protocol")
    p.add_argument("role", choices=("both", "alice", "bob"))
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the simulated quantum phase (must match the peer)")
    p.add_argument("--pulses", type=int, help="length of the simulated pulse stream")
    p.add_argument("--listen", metavar="HOST:PORT", help="wait for the peer here")
    p.add_argument("--connect", metavar="HOST:PORT", help="reach the peer here")
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT_S)
    p.add_argument("-d", "--out-dir", default=".",
                   help="directory for key files and report JSON")
    p.set_defaults(func=cmd_session)

    p = sub.add_parser("table", help="per-distance summary of the shipped profiles")
    p.add_argument("-o", "--output", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("curve", help="rate versus distance sweep")
    p.add_argument("--start", type=float, required=True, metavar="KM")
    p.add_argument("--stop", type=float, required=True, metavar="KM")
    p.add_argument("--step", type=float, default=10.0, metavar="KM")
    p.add_argument("--template", help="config supplying everything but the length "
                   "(default: the longest shipped profile)")
    p.add_argument("-o", "--output", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("optimize", help="search source parameters for one config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fix-intensities", action="store_true",
                   help="keep the config's mu1/mu2, search only the biases")
    p.add_argument("-o", "--output", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_optimize)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
