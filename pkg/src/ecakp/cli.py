"""Command line front end.

Subcommands cover the whole lifecycle: ``pack`` seals media, ``serve``
runs the activation server, ``register`` adds a product to it,
``activate`` obtains a license for this machine, ``play`` renders a
container under the guard, ``guard scan`` sweeps on its own and
``license inspect`` prints a license without unwrapping anything.

Exit codes: 0 success, 2 denied or invalid input, 3 tampering or
corruption, 4 guard or network-gate refusal, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Final, Sequence

from . import client as client_mod
from .container import (
    CONTAINER_SUFFIX,
    ContentId,
    PackagingSecret,
    pack,
    read_container,
    write_container,
)
from .crypto import (
    generate_signing_key,
    public_key_from_bytes,
    signing_key_bytes,
    signing_key_from_bytes,
)
from .errors import (
    CorruptionError,
    EcakpError,
    FramingError,
    GuardRefusalError,
    InputError,
    LicenseParseError,
    LicenseVerificationError,
    NetworkBlockedError,
    NotAContainerError,
    ResponseVerificationError,
    TamperedPayloadError,
    TransportError,
    UnprotectedGzipError,
    WrongMachineError,
)
from .guard import (
    DEFAULT_ALLOWLIST,
    GuardPolicy,
    GuardReport,
    HostExecutor,
    NetworkGate,
    RecordingExecutor,
    host_processes,
    load_snapshot_file,
    require_clean_enforcement,
    run_guard,
)
from .identity import DEFAULT_TOLERANCE, SystemProbe, load_probe_file
from .licensing import load_license, verify_license
from .server.http import ADMIN_TOKEN_ENV, ActivationHttpServer
from .server.ledger import ActivationLedger
from .server.policy import PolicyMode
from .server.service import ActivationService

EXIT_OK: Final = 0
EXIT_FAILURE: Final = 1
EXIT_DENIED: Final = 2
EXIT_TAMPERED: Final = 3
EXIT_GUARD: Final = 4

LIVE_ACK_ENV: Final = "ECAKP_GUARD_LIVE_ACK"
_LIVE_ACK_VALUE: Final = "yes"

_DENIED_ERRORS: Final = (InputError, WrongMachineError)
_TAMPER_ERRORS: Final = (
    NotAContainerError,
    UnprotectedGzipError,
    FramingError,
    TamperedPayloadError,
    CorruptionError,
    LicenseParseError,
    LicenseVerificationError,
    ResponseVerificationError,
)
_GUARD_ERRORS: Final = (GuardRefusalError, NetworkBlockedError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except _DENIED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DENIED
    except _TAMPER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TAMPERED
    except _GUARD_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except EcakpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        return EXIT_FAILURE


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecakp",
        description="Seal, license and play protected media containers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="seal a file into a protected container")
    p.add_argument("input", help="file to protect")
    p.add_argument("-o", "--out", help=f"output path (default: input + {CONTAINER_SUFFIX})")
    p.add_argument("--id", dest="content_id", help="32-hex content id (default: random)")
    p.add_argument("--keyfile", help="where to write the product key JSON")
    p.set_defaults(handler=_cmd_pack)

    p = sub.add_parser("register", help="register a packed product with a server")
    p.add_argument("--server", required=True, help="activation server base URL")
    p.add_argument("--keyfile", help="product key JSON written by pack")
    p.add_argument("--id", dest="content_id", help="32-hex content id")
    p.add_argument("--master-key", help="64-hex content master key")
    p.add_argument("--policy", default="strict", help="monitor | strict | fairuse[:E] | fraud[:T]")
    p.add_argument(
        "--admin-token",
        default=None,
        help=f"admin bearer token (default: ${ADMIN_TOKEN_ENV})",
    )
    p.set_defaults(handler=_cmd_register)

    p = sub.add_parser("serve", help="run the activation server")
    p.add_argument("--ledger", required=True, help="ledger directory (created if missing)")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port (port 0 picks one)")
    p.set_defaults(handler=_cmd_serve)

    p = sub.add_parser("activate", help="request a license for this machine")
    p.add_argument("--server", required=True, help="activation server base URL")
    p.add_argument("--id", dest="content_id", required=True, help="32-hex content id")
    p.add_argument("--email", required=True, help="purchaser email address")
    p.add_argument("--home", help="client state directory (default: $ECAKP_HOME)")
    p.add_argument("--probe", help="attribute probe file (fake:<file> accepted)")
    p.set_defaults(handler=_cmd_activate)

    p = sub.add_parser("play", help="decrypt and render a container")
    p.add_argument("container", help="protected container file")
    p.add_argument("--license", dest="license_path", help="license file (default: per-id path)")
    p.add_argument("--home", help="client state directory (default: $ECAKP_HOME)")
    p.add_argument("--server-key", help="server public key file (default: stored at activation)")
    p.add_argument("--probe", help="attribute probe file (fake:<file> accepted)")
    p.add_argument("--tolerance", type=int, default=DEFAULT_TOLERANCE, help="attribute drift allowance")
    p.add_argument("--temp-file", action="store_true", help="stage plaintext via a temp file")
    _add_guard_options(p)
    p.set_defaults(handler=_cmd_play)

    p = sub.add_parser("guard", help="process sweep utilities")
    guard_sub = p.add_subparsers(dest="guard_command", required=True)
    g = guard_sub.add_parser("scan", help="compute (and optionally enforce) the kill set")
    _add_guard_options(g)
    g.set_defaults(handler=_cmd_guard_scan)

    p = sub.add_parser("license", help="license file utilities")
    lic_sub = p.add_subparsers(dest="license_command", required=True)
    li = lic_sub.add_parser("inspect", help="print license fields and signature validity")
    li.add_argument("license_path", help="license file")
    li.add_argument("--server-key", help="server public key file for signature checking")
    li.set_defaults(handler=_cmd_license_inspect)

    return parser


def _add_guard_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--processes", help="process snapshot file (name,pid lines) instead of the live table")
    p.add_argument("--allowlist-file", help="replace the built-in allowlist (one name per line)")
    p.add_argument(
        "--flag-pattern",
        action="append",
        default=[],
        help="annotate matching kill-set names in the report (repeatable)",
    )
    p.add_argument("--self-name", default="ecakp", help="own process name to spare")
    p.add_argument(
        "--live",
        action="store_true",
        help="actually terminate processes (default is dry-run)",
    )
    p.add_argument(
        "--i-understand",
        action="store_true",
        help=f"required with --live, together with {LIVE_ACK_ENV}={_LIVE_ACK_VALUE}",
    )


# -- command handlers ------------------------------------------------


def _cmd_pack(args: argparse.Namespace) -> int:
    source = Path(args.input)
    try:
        plaintext = source.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {source}: {exc}") from exc
    content_id = (
        _parse_content_id(args.content_id) if args.content_id else ContentId.generate()
    )
    secret = PackagingSecret.generate()
    container = pack(plaintext, content_id, secret)
    out = Path(args.out) if args.out else source.with_name(source.name + CONTAINER_SUFFIX)
    write_container(container, out)
    keyfile = Path(args.keyfile) if args.keyfile else out.with_name(out.name + ".product.json")
    keyfile.write_text(
        json.dumps(
            {
                "content_id": content_id.hex,
                "master_key": secret.master_key(content_id).hex(),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"container={out}")
    print(f"content_id={content_id.hex}")
    print(f"keyfile={keyfile}")
    return EXIT_OK


def _parse_content_id(text: str) -> ContentId:
    try:
        return ContentId.from_hex(text)
    except ValueError:
        raise InputError(f"content id must be 32 hex characters, got {text!r}") from None


def _cmd_register(args: argparse.Namespace) -> int:
    if args.keyfile:
        try:
            doc = json.loads(Path(args.keyfile).read_text(encoding="utf-8"))
            content_id = ContentId.from_hex(doc["content_id"])
            master_key = bytes.fromhex(doc["master_key"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise InputError(f"cannot read product keyfile {args.keyfile}: {exc}") from exc
    elif args.content_id and args.master_key:
        content_id = _parse_content_id(args.content_id)
        try:
            master_key = bytes.fromhex(args.master_key)
        except ValueError:
            raise InputError("master key must be 64 hex characters") from None
    else:
        raise InputError("pass --keyfile or both --id and --master-key")
    if len(master_key) != 32:
        raise InputError("master key must be 32 bytes")
    policy = PolicyMode.parse(args.policy)
    token = args.admin_token if args.admin_token is not None else os.environ.get(ADMIN_TOKEN_ENV)
    if not token:
        raise InputError(f"no admin token; pass --admin-token or set {ADMIN_TOKEN_ENV}")
    client_mod.admin_call(
        args.server,
        "POST",
        "/v1/products",
        token,
        {
            "content_id": content_id.hex,
            "master_key": master_key.hex(),
            "policy": policy.to_json(),
        },
    )
    print(f"registered {content_id.hex} with policy {policy.spec()}")
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    host, _, port_text = args.listen.rpartition(":")
    if not host or not port_text.isdigit():
        raise InputError(f"--listen must be host:port, got {args.listen!r}")
    ledger_dir = Path(args.ledger)
    ledger = ActivationLedger(ledger_dir)
    signing_key = _load_or_create_signing_key(ledger_dir / "server.key")
    service = ActivationService(ledger, signing_key)
    if not os.environ.get(ADMIN_TOKEN_ENV):
        print(
            f"warning: {ADMIN_TOKEN_ENV} is not set; admin endpoints are disabled",
            file=sys.stderr,
        )
    try:
        server = ActivationHttpServer(service, host=host, port=int(port_text))
    except OSError as exc:
        ledger.close()
        raise TransportError(f"cannot listen on {args.listen}: {exc}") from exc
    print(f"listening on {server.endpoint}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        ledger.close()
    return EXIT_OK


def _load_or_create_signing_key(path: Path):
    if path.exists():
        try:
            return signing_key_from_bytes(bytes.fromhex(path.read_text().strip()))
        except ValueError as exc:
            raise InputError(f"invalid signing key file {path}: {exc}") from exc
    key = generate_signing_key()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(signing_key_bytes(key).hex() + "\n", encoding="utf-8")
    path.chmod(0o600)
    return key


def _resolve_probe(text: str | None) -> SystemProbe | None:
    if text is None:
        return None
    if text.startswith("fake:"):
        text = text[len("fake:") :]
    return load_probe_file(text)


def _cmd_activate(args: argparse.Namespace) -> int:
    request = client_mod.build_request(
        args.content_id, args.email, probe=_resolve_probe(args.probe)
    )
    outcome = client_mod.request_activation(args.server, request, home=args.home)
    print(outcome.describe())
    return EXIT_OK if outcome.granted else EXIT_DENIED


def _guard_inputs(args: argparse.Namespace):
    processes = (
        load_snapshot_file(args.processes) if args.processes else host_processes()
    )
    allowlist = (
        _load_allowlist(args.allowlist_file) if args.allowlist_file else DEFAULT_ALLOWLIST
    )
    policy = GuardPolicy(allowlist=allowlist, denylist_patterns=tuple(args.flag_pattern))
    live = _live_requested(args)
    # Snapshots name processes this machine never ran; never kill from one.
    if args.processes:
        executor = RecordingExecutor()
    else:
        executor = HostExecutor()
    return processes, policy, executor, live


def _load_allowlist(path: str) -> frozenset[str]:
    names = {
        line.strip()
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.strip().startswith("#")
    }
    if not names:
        raise InputError(f"allowlist file {path} names no processes")
    return frozenset(names)


def _live_requested(args: argparse.Namespace) -> bool:
    if not args.live:
        return False
    if not args.i_understand or os.environ.get(LIVE_ACK_ENV) != _LIVE_ACK_VALUE:
        raise InputError(
            f"--live terminates processes; add --i-understand and set {LIVE_ACK_ENV}={_LIVE_ACK_VALUE}"
        )
    return True


def _print_guard_report(report: GuardReport) -> None:
    print(f"guard_scanned={report.scanned}")
    print(f"guard_kill_set={len(report.kill_set)}")
    print(f"guard_dry_run={str(report.dry_run).lower()}")
    flagged = {p for p in report.flagged}
    for execution in report.executed:
        marker = " flagged" if execution.process in flagged else ""
        error = f" error={execution.error}" if execution.error else ""
        print(
            f"guard: {execution.process.name},{execution.process.pid}"
            f" -> {execution.outcome.value}{marker}{error}"
        )


def _cmd_guard_scan(args: argparse.Namespace) -> int:
    processes, policy, executor, live = _guard_inputs(args)
    report = run_guard(
        processes, policy, args.self_name, executor, dry_run=not live
    )
    _print_guard_report(report)
    require_clean_enforcement(report)
    return EXIT_OK


def _cmd_play(args: argparse.Namespace) -> int:
    processes, policy, executor, live = _guard_inputs(args)
    session = client_mod.play(
        args.container,
        license_path=args.license_path,
        home=args.home,
        server_key_file=args.server_key,
        probe=_resolve_probe(args.probe),
        tolerance=args.tolerance,
        mode=client_mod.PlaybackMode.TEMP_FILE if args.temp_file else client_mod.PlaybackMode.IN_MEMORY,
        guard_policy=policy,
        processes=processes,
        executor=executor,
        dry_run=not live,
        self_name=args.self_name,
    )
    print(f"content_id={session.content_id.hex}")
    print(f"mode={session.mode.value}")
    print(f"bytes_played={session.bytes_played}")
    print(f"crc_ok={str(session.crc_ok).lower()}")
    if session.temp_path is not None:
        print(f"temp_file={session.temp_path} removed={str(not session.temp_path.exists()).lower()}")
    _print_guard_report(session.guard_report)
    return EXIT_OK


def _cmd_license_inspect(args: argparse.Namespace) -> int:
    license_file = load_license(args.license_path)
    print(f"content_id={license_file.content_id.hex}")
    print(f"fingerprint_digest={license_file.fingerprint_digest.hex()}")
    issued = datetime.fromtimestamp(license_file.issued_at, tz=timezone.utc)
    print(f"issued_at={issued.isoformat()}")
    print(f"attributes={','.join(name for name, _ in license_file.attribute_digests)}")
    print(f"wrapped_key_bytes={len(license_file.wrapped_key)}")
    if args.server_key:
        try:
            raw = bytes.fromhex(Path(args.server_key).read_text().strip())
            public_key = public_key_from_bytes(raw)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read server key {args.server_key}: {exc}") from exc
        if verify_license(license_file, public_key):
            print("signature=valid")
        else:
            print("signature=INVALID")
            return EXIT_TAMPERED
    else:
        print("signature=unverified (no server key given)")
    return EXIT_OK


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
