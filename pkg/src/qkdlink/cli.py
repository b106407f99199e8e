"""Command-line entry point.

    qkdlink run --role loopback --preset lab --sessions 10 --seed 7 --out run1
    qkdlink run --role bob --address 0.0.0.0:7741 --config bob.conf
    qkdlink gen-code --n 4096 --rate 0.75 --seed 7 --out code.txt

Exit status: 0 success, 2 eavesdropping alarm, 3 transport or protocol
failure, 4 configuration error.

Outputs of ``run`` (in --out):
  <role>_key.bin       final key bits packed MSB first, zero padded
  <role>_key.manifest  key length, sessions, mean QBER and, per epoch, the
                       inputs of the secret-length formula
  <role>_report.csv    one summary line: sifted_bits, verified_bits,
                       secret_bits, mean_qber, qber_stddev, alarm_flag,
                       extrapolated_sifted_rate_bps,
                       extrapolated_secret_rate_bps
  qber.csv             (Bob) cumulative_bytes,window_qber per window
  capture.bin          (with capture = path) length-prefixed frame log
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from qkdlink import config as cfgmod
from qkdlink import endpoint, net
from qkdlink.postproc import ldpc

EXIT_OK, EXIT_ALARM, EXIT_TRANSPORT, EXIT_CONFIG = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not the alarm status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qkdlink", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an endpoint or a loopback pair")
    run.add_argument("--role", choices=cfgmod.ROLES)
    run.add_argument("--config", type=Path, help="key = value file; '#' starts a comment")
    run.add_argument("--preset", choices=cfgmod.PRESET_NAMES)
    run.add_argument("--sessions", type=int)
    run.add_argument("--trains", type=int, dest="trains_per_session")
    run.add_argument("--pulses", type=int, dest="pulses_per_train")
    run.add_argument("--seed", type=int, help="master seed; runs with equal seeds are identical")
    run.add_argument("--out", help="output directory")
    run.add_argument("--address", help="host:port; Bob listens, Alice dials")
    run.add_argument("--inject-qber", type=float, dest="inject_qber", help="raise the expected QBER to this value")
    run.add_argument("--capture", help="write a frame log of the public channel")
    run.add_argument("-v", "--verbose", action="store_true", default=None)

    gen = sub.add_parser("gen-code", help="build an LDPC code file")
    gen.add_argument("--n", type=int, default=ldpc.SHIPPED_N)
    gen.add_argument("--rate", type=float, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--profile", choices=("quasi-regular", "optimized"), default="quasi-regular", help="column degrees 3-4, or the tuned irregular profile of a shipped rate")
    gen.add_argument("--out", type=Path, required=True)
    return p


def _run(args) -> int:
    try:
        file_values = cfgmod.load_config(args.config) if args.config else {}
        flags = {k: getattr(args, k) for k in ("role", "preset", "sessions", "trains_per_session", "pulses_per_train", "seed", "out", "address", "inject_qber", "capture", "verbose")}
        cfg = cfgmod.build_config(None, file_values, flags)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING, format="%(threadName)s %(message)s")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    capture = open(cfg.capture, "wb") if cfg.capture else None
    try:
        if cfg.role == "loopback":
            results = list(endpoint.run_loopback(cfg, capture))
        else:
            results = [endpoint.run_networked(cfg, capture)]
    except net.NetError as exc:
        print(f"transport failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    finally:
        if capture is not None:
            capture.close()
    alarm = False
    for res in results:
        endpoint.write_key_files(res, out, cfg)
        report = endpoint.write_reports(res, out, cfg)
        alarm |= res.alarm
        print(
            f"{res.role}: sifted {report.sifted_bits} bits, secret {report.secret_bits} bits, "
            f"mean QBER {report.mean_qber:.4f}, secret rate {report.extrapolated_secret_rate_bps:.1f} bit/s"
            + (" ALARM" if res.alarm else "")
        )
    return EXIT_ALARM if alarm else EXIT_OK


def _gen_code(args) -> int:
    profile = None
    if args.profile == "optimized":
        if args.rate not in ldpc.DEGREE_PROFILES:
            print(f"config error: no tuned profile for rate {args.rate}", file=sys.stderr)
            return EXIT_CONFIG
        profile = ldpc.DEGREE_PROFILES[args.rate]
    try:
        code = ldpc.generate_code(args.n, args.rate, args.seed, profile)
    except ldpc.InfeasibleCodeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ldpc.save_code(code, args.out)
    print(f"wrote {args.out}: n={code.n} m={code.m} rate={code.rate_label}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        return _run(args)
    return _gen_code(args)


if __name__ == "__main__":
    sys.exit(main())
