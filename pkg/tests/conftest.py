import hashlib
import os
import shutil
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from b2mdf.ledger import Participant, Registry, Role, public_key_bytes, signing_key_from_seed
from b2mdf.synth import write_corpus

settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("dev", max_examples=50, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))


def make_identity(pid: str, role: Role):
    key = signing_key_from_seed(hashlib.sha256(b"test-key:" + pid.encode()).digest())
    return Participant(pid, role, public_key_bytes(key)), key


@pytest.fixture
def cast():
    """One identity per role plus two extra detection engines."""
    ids = {
        "fe": ("fe-1", Role.FEATURE_EXTRACTOR),
        "de": ("de-a", Role.DETECTION_ENGINE),
        "de2": ("de-b", Role.DETECTION_ENGINE),
        "de3": ("de-c", Role.DETECTION_ENGINE),
        "tp": ("tp-1", Role.THIRD_PARTY),
        "da": ("da-1", Role.DETERMINANT_AGENT),
    }
    people = {k: make_identity(pid, role) for k, (pid, role) in ids.items()}
    registry = Registry(p for p, _ in people.values())
    return people, registry


@pytest.fixture(scope="session")
def corpus_template(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("corpus-template")
    write_corpus(root)
    return root


@pytest.fixture
def corpus(corpus_template, tmp_path, monkeypatch) -> Path:
    """A fresh copy of the demo corpus with an empty store."""
    monkeypatch.delenv("B2MDF_STORE", raising=False)
    dst = tmp_path / "corpus"
    shutil.copytree(corpus_template, dst)
    return dst


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
