import json
import shutil
import subprocess
import sys

import pytest

from b2mdf.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert len(lines) == 1, out
    return code, json.loads(lines[0])


def test_lifecycle(corpus, capsys, tmp_path):
    c = str(corpus / "config.json")
    code, res = run(capsys, "ingest", "--apk", str(corpus / "apks/com.example.torch-1.apk"),
                    "--trace", str(corpus / "traces/com.example.torch-1.txt"),
                    "--samples", str(corpus / "samples/com.example.torch-1.csv"), "--config", c)
    assert code == 0 and len(res["appended"]) == 6
    code, res = run(capsys, "scan", "--app", "com.example.torch", "--version", "1", "--config", c)
    assert code == 0 and len(res["appended"]) == 3
    transcript = tmp_path / "t.jsonl"
    code, res = run(capsys, "decide", "--app", "com.example.torch", "--version", "1",
                    "--scenario", str(corpus / "scenario.json"), "--config", c, "--transcript", str(transcript))
    assert code == 0 and res["verdict"] == "Malicious" and res["round"]["status"] == "Committed"
    assert all(json.loads(line)["event"] for line in transcript.read_text().splitlines())
    code, res = run(capsys, "verify", "--store", str(corpus / "store"))
    assert code == 0 and res["ok"]
    code, res = run(capsys, "export", "--app", "com.example.torch", "--version", "1",
                    "--out", str(tmp_path / "e.json"), "--store", str(corpus / "store"))
    assert code == 0 and (tmp_path / "e.json").is_file()


def test_domain_error_exit_1(corpus, capsys):
    code, res = run(capsys, "scan", "--app", "com.example.notes", "--version", "1",
                    "--config", str(corpus / "config.json"))
    assert code == 1 and res["error"] == "MissingFeatures"


def test_verify_failure_exit_1(corpus, capsys):
    c = str(corpus / "config.json")
    run(capsys, "ingest", "--apk", str(corpus / "apks/com.example.notes-1.apk"), "--config", c)
    path = corpus / "store" / "com.example.notes" / "DIPB.chain"
    data = bytearray(path.read_bytes())
    data[100] ^= 0x01
    path.write_bytes(bytes(data))
    code, res = run(capsys, "verify", "--store", str(corpus / "store"), "--registry", str(corpus / "registry.json"))
    assert code == 1 and not res["ok"]


def test_export_uses_env_store(corpus, capsys, tmp_path, monkeypatch):
    c = str(corpus / "config.json")
    run(capsys, "ingest", "--apk", str(corpus / "apks/com.example.notes-1.apk"), "--config", c)
    monkeypatch.setenv("B2MDF_STORE", str(corpus / "store"))
    code, _ = run(capsys, "export", "--app", "com.example.notes", "--version", "1", "--out", str(tmp_path / "x.json"))
    assert code == 0


def test_usage_error_exit_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["scan", "--app", "x"])
    assert err.value.code == 2


def test_scenario_engine_mismatch(corpus, capsys):
    doc = json.loads((corpus / "scenario.json").read_text())
    doc["engines"] = ["de-sig"]
    (corpus / "scenario.json").write_text(json.dumps(doc))
    code, res = run(capsys, "decide", "--app", "a", "--version", "1", "--scenario", str(corpus / "scenario.json"),
                    "--config", str(corpus / "config.json"))
    assert code == 1 and res["error"] == "ConfigError"


@pytest.mark.skipif(shutil.which("b2mdf") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["b2mdf", "verify", "--store", str(tmp_path), "--registry", "/nonexistent"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and json.loads(proc.stdout)["error"]


def test_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "b2mdf.cli", "verify"], capture_output=True, text=True,
                          env={"PATH": "", "B2MDF_STORE": str(tmp_path)})
    assert proc.returncode == 1 and json.loads(proc.stdout)["error"] == "ConfigError"
