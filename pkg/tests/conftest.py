import json
from pathlib import Path

import pytest

from sopbench.ingest import load_corpus
from sopbench.model import UiElement
from sopbench.sop import RuleSet

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
GOLDEN = TESTS / "golden"


def read_golden(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def aitw():
    return RuleSet.load("aitw")


@pytest.fixture(scope="session")
def medical_rules():
    return RuleSet.load("aia_medical")


@pytest.fixture(scope="session")
def amazon():
    return load_corpus(str(FIXTURES / "amazon_episode.jsonl")).episodes[0]


@pytest.fixture(scope="session")
def medical():
    return load_corpus(str(FIXTURES / "medical_popup.jsonl")).episodes[0]


@pytest.fixture(scope="session")
def star_screen():
    doc = json.loads((FIXTURES / "star_screen.json").read_text(encoding="utf-8"))
    return tuple(UiElement(el["id"], el["text"], el["ui_type"], tuple(el["bbox"])) for el in doc["elements"])


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
