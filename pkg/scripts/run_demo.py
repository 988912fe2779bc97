"""Run ingest, scan, decide and export over the demo corpus, then audit the store."""
import argparse
import json
from pathlib import Path

from b2mdf.ledger import ChainStore
from b2mdf.pipeline import DeploymentConfig, decide_round, export_features, ingest, scan, verify_store
from b2mdf.synth import write_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("workdir", help="directory for the corpus and store (created if missing)")
    args = ap.parse_args()
    root = Path(args.workdir)
    if not (root / "config.json").exists():
        write_corpus(root)
    cfg = DeploymentConfig.load(root / "config.json")
    apps = json.loads((root / "index.json").read_text())["apps"]

    for app in apps:
        res = ingest(root / app["apk"], root / app["trace"], root / app["samples"], cfg)
        print("ingest", json.dumps(res.to_json(), sort_keys=True))
    for app in apps:
        res = scan(app["app_id"], app["version_code"], cfg)
        print("scan  ", json.dumps(res.to_json(), sort_keys=True))
    for app in apps:
        verdict, outcome = decide_round(app["app_id"], app["version_code"], None, cfg)
        status = outcome.status.value if outcome else "existing"
        print(f"decide {app['app_id']}@{app['version_code']}: {verdict.verdict} ({status})")
    exports = root / "exports"
    exports.mkdir(exist_ok=True)
    for app in apps:
        export_features(app["app_id"], app["version_code"],
                        exports / f"{app['app_id']}-{app['version_code']}.json", ChainStore(cfg.store_path))
    report = verify_store(cfg.store_path, cfg.registry())
    print("verify", "ok" if report.ok else "FAILED", json.dumps(report.to_json(), sort_keys=True))


if __name__ == "__main__":
    main()
