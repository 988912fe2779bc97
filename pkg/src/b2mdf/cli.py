"""``b2mdf`` command line: one JSON object on stdout per invocation.

Exit status: 0 success, 1 domain error (or failed verification), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .consensus import load_scenario
from .errors import B2mdfError, ConfigError
from .ledger import ChainStore, Registry, Role
from .pipeline import (
    STORE_ENV,
    DeploymentConfig,
    decide_round,
    export_features,
    ingest,
    scan,
    load_registry,
    verify_store,
)


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _store_path(args) -> Path:
    if getattr(args, "store", None):
        return Path(args.store)
    if os.environ.get(STORE_ENV):
        return Path(os.environ[STORE_ENV])
    if getattr(args, "config", None):
        return DeploymentConfig.load(args.config).store_path
    raise ConfigError(f"no store given: pass --store, --config, or set {STORE_ENV}")


def _registry(args, store: Path) -> Registry:
    if getattr(args, "registry", None):
        return load_registry(args.registry)
    if getattr(args, "config", None):
        return DeploymentConfig.load(args.config).registry()
    snapshot = store / "registry.json"
    if snapshot.is_file():
        return load_registry(snapshot)
    raise ConfigError("no registry given: pass --registry or --config")


def cmd_ingest(args) -> int:
    result = ingest(args.apk, args.trace, args.samples, DeploymentConfig.load(args.config))
    _emit(result.to_json())
    return 0


def cmd_scan(args) -> int:
    result = scan(args.app, args.version, DeploymentConfig.load(args.config))
    _emit(result.to_json())
    return 0


def cmd_decide(args) -> int:
    cfg = DeploymentConfig.load(args.config)
    scenario_path = args.scenario or cfg.scenario_path
    scenario = None
    if scenario_path:
        scenario, engines = load_scenario(scenario_path)
        registered = sorted(p.id for p in cfg.registry().with_role(Role.DETECTION_ENGINE))
        if engines is not None and sorted(engines) != registered:
            raise ConfigError(f"scenario engines {sorted(engines)} differ from registered engines {registered}")
    verdict, outcome = decide_round(args.app, args.version, scenario, cfg)
    out = verdict.to_json()
    if outcome is not None:
        out["round"] = {"status": outcome.status.value, "signatures": outcome.signatures_obtained,
                        "quorum": outcome.quorum}
        if args.transcript:
            Path(args.transcript).write_bytes(outcome.transcript_jsonl())
    _emit(out)
    return 0


def cmd_verify(args) -> int:
    store = _store_path(args)
    report = verify_store(store, _registry(args, store))
    _emit(report.to_json())
    return 0 if report.ok else 1


def cmd_export(args) -> int:
    store = _store_path(args)
    out = export_features(args.app, args.version, args.out, ChainStore(store))
    _emit({"app_id": args.app, "version_code": args.version, "export": str(out)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="b2mdf", description="Blockchain-backed malware detection for app stores.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="extract features from an APK onto its DIPB")
    p.add_argument("--apk", required=True)
    p.add_argument("--trace")
    p.add_argument("--samples")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("scan", help="run every detection engine, appending scores to the DEPB")
    p.add_argument("--app", required=True)
    p.add_argument("--version", required=True, type=int)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("decide", help="run a consensus round and report the final verdict")
    p.add_argument("--app", required=True)
    p.add_argument("--version", required=True, type=int)
    p.add_argument("--scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--transcript", help="write the round transcript as JSON Lines")
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("verify", help="audit every chain in a store")
    p.add_argument("--store")
    p.add_argument("--registry")
    p.add_argument("--config")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export", help="write a DIPB export for third parties")
    p.add_argument("--app", required=True)
    p.add_argument("--version", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--store")
    p.add_argument("--config")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except B2mdfError as exc:
        _emit({"error": type(exc).__name__, **exc.detail()})
        return 1
    except OSError as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return 1


if __name__ == "__main__":
    sys.exit(main())
