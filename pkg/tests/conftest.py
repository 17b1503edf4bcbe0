from __future__ import annotations

import json
from pathlib import Path

import pytest

from parc import gateway

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def write_jsonl(path: Path, records: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def _fresh_backend_handles():
    # HTTP handles are cached per descriptor; drop them between tests
    gateway._handles.clear()
    yield
    gateway._handles.clear()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, title = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {title}")
