"""Operator CLI: reproducible experiments emitting CSV/JSON artifacts.

Subcommands
-----------
rate     optimized SKR over a loss sweep or preset (CSV)
session  two-party sift/reconcile/amplify run over TCP or in-process
polar    polarization-compensation trace (CSV)
bounds   offline decoy-bound and key-length evaluation (JSON)

Exit codes: 0 success, 2 no positive key, 3 protocol abort, 4 config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

EXIT_OK = 0
EXIT_NO_KEY = 2
EXIT_PROTOCOL = 3
EXIT_CONFIG = 4


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_rate(args) -> int:
    from qkdf.optimizer import rate_distance_curve
    from qkdf.channel import ChannelDetectorModel
    from qkdf.presets import get_preset

    if args.preset:
        preset = get_preset(args.preset)
        model, losses = preset.model, [preset.model.total_loss_db]
    else:
        model = ChannelDetectorModel()
        losses = args.loss_db or []
    rows = rate_distance_curve(model, losses, n_z_target=args.n_z, f=args.f)
    lines = ["loss_db,skr_bps,p_z,mu1,mu2,p_mu1"]
    for loss, skr, params in rows:
        if params is None:
            lines.append(f"{loss:.6g},0,,,,")
        else:
            lines.append(f"{loss:.6g},{skr:.6g},{params.p_z:.6g},"
                         f"{params.mu1:.6g},{params.mu2:.6g},{params.p_mu1:.6g}")
    _write(args.out, "\n".join(lines) + "\n")
    if rows and all(r[1] <= 0 for r in rows):
        return EXIT_NO_KEY
    return EXIT_OK


def _session_config(args):
    from qkdf.presets import get_preset
    from qkdf.session import SessionConfig
    import dataclasses as dc

    preset = get_preset(args.preset)
    params = preset.params
    overrides = {k: getattr(args, k) for k in ("p_z", "mu1", "mu2", "p_mu1")
                 if getattr(args, k) is not None}
    if overrides:
        if "p_z" in overrides:
            overrides["q_z"] = overrides["p_z"]
        params = dc.replace(params, **overrides)
    return SessionConfig(
        params=params, model=preset.model, n_pulses=int(args.pulses),
        seed_alice=args.seed * 4 + 1, seed_channel=args.seed * 4 + 2,
        seed_bob=args.seed * 4 + 3, seed_shared=args.seed * 4 + 4)


def _report_dict(result):
    rep = result.reconcile_report
    out = {
        "role": result.role,
        "sifted_len": result.sifted_len,
        "reconciled_len": result.reconciled_len,
        "secret_len": len(result.secret.bits),
        "leak_bits": result.secret.leak_bits,
        "crc_ok": result.secret.crc_ok,
    }
    if result.qber_realized is not None:
        out["qber"] = result.qber_realized
    if result.f_realized is not None:
        out["f_realized"] = result.f_realized
    if rep is not None:
        out["cascade"] = {
            "frames": rep.frames, "corrected_bits": rep.corrected_bits,
            "disclosed_parities": rep.disclosed_parities,
            "frame_error_rate": rep.frame_error_rate,
            "crc_failures": rep.crc_failures,
        }
    if result.tallies is not None:
        out["tallies"] = result.tallies.to_dict()
    return out


def cmd_session(args) -> int:
    from qkdf import wire
    from qkdf.session import (run_loopback_session, run_session_alice,
                              run_session_bob, write_key_file)
    from pathlib import Path

    cfg = _session_config(args)
    try:
        if args.role == "both":
            alice, bob = run_loopback_session(cfg)
            results = [alice, bob]
        else:
            if args.listen:
                host, _, port = args.listen.rpartition(":")
                link = wire.tcp_listen(host or "127.0.0.1", int(port))
            elif args.connect:
                host, _, port = args.connect.rpartition(":")
                link = wire.tcp_connect(host or "127.0.0.1", int(port))
            else:
                print("session: need --listen or --connect (or --role both)",
                      file=sys.stderr)
                return EXIT_CONFIG
            runner = run_session_alice if args.role == "alice" else run_session_bob
            results = [runner(link, cfg)]
            link.close()
    except (wire.ProtocolError, wire.LinkClosed) as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL

    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        for res in results:
            write_key_file(outdir / f"{res.role}_secret.key", res.secret)
            (outdir / f"{res.role}_report.json").write_text(
                json.dumps(_report_dict(res), indent=2) + "\n")
    for res in results:
        print(f"{res.role}: sifted={res.sifted_len} secret={len(res.secret.bits)} "
              f"leak={res.secret.leak_bits}")
    if all(len(res.secret.bits) == 0 for res in results):
        return EXIT_NO_KEY
    return EXIT_OK


def cmd_polar(args) -> int:
    from qkdf.polar import run_compensation, scenario_preset

    try:
        scenario = scenario_preset(args.scenario, seed=args.seed, steps=args.steps,
                                   strong_pulse=args.strong or None)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    trace = run_compensation(scenario)
    lines = ["t_s,e_z,e_x,v1,v2,v3"]
    lines += [",".join(f"{v:.8g}" for v in row) for row in trace]
    _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_bounds(args) -> int:
    from qkdf.finitekey import (InsufficientStatistics, ObservedTallies,
                                estimate_decoy_bounds, secret_key_length)
    from qkdf.presets import _params_from_dict

    try:
        with open(args.tallies) as fh:
            data = json.load(fh)
        tallies = ObservedTallies.from_dict(data["tallies"])
        params = _params_from_dict(data["params"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"bad tallies file: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        bounds = estimate_decoy_bounds(tallies, params)
    except InsufficientStatistics as exc:
        _write(args.out, json.dumps({"feasible": False, "reason": str(exc)},
                                    indent=2) + "\n")
        return EXIT_NO_KEY
    out = dataclasses.asdict(bounds)
    if bounds.feasible:
        result = secret_key_length(tallies, bounds, args.f, params)
        out["secret_len"] = result.secret_len
        out["skr_bps"] = result.skr
        out["term_breakdown"] = result.term_breakdown
    _write(args.out, json.dumps(out, indent=2) + "\n")
    if not bounds.feasible or out.get("secret_len", 0) == 0:
        return EXIT_NO_KEY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdf",
                                     description="decoy-state BB84 QKD toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rate", help="optimized SKR at given losses")
    p.add_argument("--preset")
    p.add_argument("--loss-db", type=float, nargs="*")
    p.add_argument("--n-z", type=float, default=1e8)
    p.add_argument("--f", type=float, default=1.053)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("session", help="two-party post-processing run")
    p.add_argument("--role", choices=("alice", "bob", "both"), required=True)
    p.add_argument("--listen")
    p.add_argument("--connect")
    p.add_argument("--preset", default="50km")
    p.add_argument("--pulses", type=float, default=1e7)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out")
    for name in ("p_z", "mu1", "mu2", "p_mu1"):
        p.add_argument(f"--{name.replace('_', '-')}", type=float, default=None,
                       dest=name)
    p.set_defaults(func=cmd_session)

    p = sub.add_parser("polar", help="polarization compensation trace")
    p.add_argument("--scenario", default="metro")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strong", action="store_true")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_polar)

    p = sub.add_parser("bounds", help="offline finite-key evaluation")
    p.add_argument("--tallies", required=True)
    p.add_argument("--f", type=float, default=1.053)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
