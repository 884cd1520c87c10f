from pathlib import Path

import pytest

from promptcal.backend import format_fields
from promptcal.dataset import Record


@pytest.fixture(autouse=True)
def _pinned_date(monkeypatch):
    # bundles embed the execution date; pin it so byte comparisons are stable
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


@pytest.fixture
def demo_dir(tmp_path) -> Path:
    from promptcal.demo import write_demo

    paths = write_demo(tmp_path / "demo")
    return paths["config"].parent


def answer(label: str, checks: str = "- defect prediction study\n- empirical evaluation reported") -> str:
    return format_fields({"checks": checks, "label": label}, ["checks", "label"])


def make_record(rid: str, label: str, title: str | None = None, abstract: str = "An abstract.") -> Record:
    return Record(rid, title or f"Title {rid}", abstract, "", label)
