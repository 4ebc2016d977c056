"""Command-line entry point: simulate, attack, audit, serve, send, keys."""

from __future__ import annotations

import argparse
import sys
import threading
from importlib import resources
from pathlib import Path
from typing import Optional

from vsig import attacks
from vsig.archive import ArchiveService, RecordRejected, SessionSink, SocketSink, serve
from vsig.audit import AuditOptions, audit, render_report
from vsig.bilateral import run_bilateral
from vsig.codec import DecodeError
from vsig.crypto import SCHEME_BY_NAME, KeyRing, load_trust_store
from vsig.model import PolicyAction
from vsig.multilateral import ConferenceScenario, run_conference
from vsig.scenario import Scenario, ScenarioError, load_scenario, parse_scenario

EXIT_ERROR = 3


def bundled_scenarios() -> list[str]:
    folder = resources.files("vsig") / "scenarios"
    return sorted(p.name[:-4] for p in folder.iterdir() if p.name.endswith(".scn"))


def _scenario(args) -> Scenario:
    defaults = {
        "seed": args.seed,
        "duration_ms": args.duration_ms,
        "interval_ms": args.interval_ms,
        "participants": args.participants,
        "channel.media.loss": args.loss,
        "policy.action": PolicyAction(args.policy) if args.policy else None,
    }
    if args.scenario is None:
        kind = "conference" if (args.participants or 2) > 2 else "bilateral"
        scenario = parse_scenario(f"kind = {kind}\n", "<flags>")
    elif Path(args.scenario).exists():
        scenario = load_scenario(args.scenario)
    elif args.scenario in bundled_scenarios():
        text = (resources.files("vsig") / "scenarios" / f"{args.scenario}.scn").read_text(encoding="utf-8")
        scenario = parse_scenario(text, args.scenario)
    else:
        raise ScenarioError(0, f"no scenario file or bundled scenario named {args.scenario!r}")
    if args.policy is not None and "policy" not in scenario.sections:
        defaults["policy.threshold"] = 0.3
    scenario = scenario.with_defaults(defaults)
    if args.seed is not None:
        # The seed flag wins over the file so one scenario can be replayed
        # under many seeds.
        scenario.sections[""]["seed"] = (args.seed, 0)
    return scenario


def _participants_needed(config) -> int:
    if isinstance(config, ConferenceScenario):
        return max([config.participants] + [c.participant + 1 for c in config.changes])
    return 2


def _keyring(args, needed: int) -> KeyRing:
    scheme = SCHEME_BY_NAME[args.scheme]
    if args.keys is None:
        return KeyRing.generate(args.seed or 0, needed, scheme)
    folder = Path(args.keys)
    if args.gen_keys or not (folder / "root.pem").exists():
        ring = KeyRing.generate(args.seed or 0, needed, scheme)
        ring.save(folder)
        return ring
    ring = KeyRing.load(folder)
    if len(ring.identities) < needed:
        raise SystemExit(f"key directory {folder} holds {len(ring.identities)} participants, scenario needs {needed}")
    return ring


def _run(config, keys: KeyRing, sink):
    if isinstance(config, ConferenceScenario):
        return run_conference(config, keys, sink=sink)
    return run_bilateral(config, keys, sink=sink)


def cmd_simulate(args) -> int:
    scenario = _scenario(args)
    config = scenario.config()
    keys = _keyring(args, _participants_needed(config))
    out = Path(args.output)
    service = ArchiveService(out, keys.trust_store())
    sink = SessionSink(service)
    result = _run(config, keys, sink)
    path = sink.close()
    if path is None:
        print("session aborted before the archive opened", file=sys.stderr)
        return EXIT_ERROR
    report = audit(path.read_bytes(), keys.trust_store(), archive_id=path.name)
    print(f"archive {path}")
    print(f"verdict {report.overall.value}")
    phase = getattr(result, "phase", None)
    if phase is not None:
        print(f"phase   {phase.value}")
    return report.exit_code


def cmd_attack(args) -> int:
    data = Path(args.archive).read_bytes()
    options = {}
    if args.donor:
        options["donor"] = Path(args.donor).read_bytes()
    if args.index is not None:
        options["count" if args.attack == "truncate" else "link"] = args.index
    result = attacks.apply(args.attack, data, args.seed or 0, **options)
    Path(args.output).write_bytes(result.data)
    print(result.description)
    return 0


def cmd_audit(args) -> int:
    trust = load_trust_store(Path(args.keys))
    data = Path(args.archive).read_bytes()
    options = AuditOptions(loss_threshold=args.loss_threshold)
    report = audit(data, trust, options, archive_id=Path(args.archive).name)
    text = render_report(report, args.format)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return report.exit_code


def cmd_keys(args) -> int:
    ring = KeyRing.generate(args.seed or 0, args.participants or 2, SCHEME_BY_NAME[args.scheme])
    ring.save(Path(args.directory))
    print(f"wrote {len(ring.identities)} participant keys to {args.directory}")
    return 0


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_serve(args) -> int:
    trust = load_trust_store(Path(args.keys))
    done = threading.Event()
    closed = []

    def on_close(sid: str, path: Path) -> None:
        print(f"closed {path.name}", flush=True)
        closed.append(sid)
        if args.sessions and len(closed) >= args.sessions:
            done.set()

    service = ArchiveService(Path(args.storage), trust, on_close=on_close)
    server = serve(_address(args.address), service)
    host, port = server.server_address[:2]
    print(f"listening {host}:{port}", flush=True)
    if args.sessions:
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        done.wait()
        server.shutdown()
    else:
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    server.server_close()
    service.close_all()
    return 0


def cmd_send(args) -> int:
    scenario = _scenario(args)
    config = scenario.config()
    keys = _keyring(args, _participants_needed(config))
    sink = SocketSink(_address(args.address))
    _run(config, keys, sink)
    sink.close()
    if sink.broken:
        print(f"channel broken: {sink.broken}", file=sys.stderr)
        return 1
    print(f"archived as {sink.archive_name}")
    return 1 if sink.naks else 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="single seed for all randomness")
    p.add_argument("--keys", help="key directory (created when missing)")
    p.add_argument("--gen-keys", action="store_true", help="regenerate the key directory from the seed")
    p.add_argument("--scheme", choices=sorted(SCHEME_BY_NAME), default="rsa-pss")


def _session_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("scenario", nargs="?", help="scenario file or bundled scenario name")
    p.add_argument("--duration-ms", type=int)
    p.add_argument("--interval-ms", type=int, help="interval duration D")
    p.add_argument("--loss", type=float, help="media loss probability")
    p.add_argument("--policy", choices=["ignore", "notify", "abort-signing", "terminate-call"])
    p.add_argument("--participants", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsig", description="Signed VoIP call archives: simulate, attack, audit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a call and archive it")
    _session_flags(p)
    _common(p)
    p.add_argument("-o", "--output", default="archives", help="archive directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="mutate an archive")
    p.add_argument("archive")
    p.add_argument("attack", choices=attacks.ATTACKS)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index", type=int, help="which link to hit (count of links for truncate)")
    p.add_argument("--donor", help="second archive for replay-splice")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("audit", help="verify an archive")
    p.add_argument("archive")
    p.add_argument("--keys", required=True, help="directory holding root.pem and the TSA certificates")
    p.add_argument("--format", choices=["text", "kv"], default="text")
    p.add_argument("--report", help="write the report here instead of standard output")
    p.add_argument("--loss-threshold", type=float, default=0.3)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("serve", help="run the archive service on a TCP socket")
    p.add_argument("--keys", required=True)
    p.add_argument("--storage", default="archives")
    p.add_argument("--address", default="127.0.0.1:0")
    p.add_argument("--sessions", type=int, help="exit after this many sessions closed")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("send", help="run a call and stream it to a serving archive")
    _session_flags(p)
    _common(p)
    p.add_argument("--address", required=True)
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("keys", help="generate a seeded key directory")
    p.add_argument("directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--participants", type=int, default=2)
    p.add_argument("--scheme", choices=sorted(SCHEME_BY_NAME), default="rsa-pss")
    p.set_defaults(func=cmd_keys)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (DecodeError, RecordRejected, attacks.UnknownAttack, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
