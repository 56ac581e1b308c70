from __future__ import annotations

import textwrap
from pathlib import Path

import pytest

from fedimpress.scenario import parse_scenario

TINY = textwrap.dedent(
    """
    name: tiny
    num_users: 2
    num_iterations: 3
    master_seed: 5
    corpus:
      feature_dim: 12
      separation: 5.0
      spread: 1.0
      public_frames_per_label: 40
      pool_frames_per_label: 200
    labels:
      universe: ["A", "B", "C", "D", "E"]
      public: ["A", "B", "C", "D"]
      frames_per_label: [20, 30]
    users:
      - {labels: ["A", "B", "C"], hidden: [8], activation: relu}
      - {labels: ["B", "C", "D"], hidden: [], activation: identity}
    injections:
      - {user: 1, iteration: 2, label: "E", count: 60}
      - {user: 2, iteration: 2, label: "E", count: 60}
    training: {epochs: 5, learning_rate: 0.05, batch_size: 16}
    synthesis: {samples_per_class: 20, max_steps: 100, init_range: [-0.1, 0.1]}
    clustering: {k_max: 2, min_separation: 1.1}
    """
)


@pytest.fixture
def tiny_text() -> str:
    return TINY


@pytest.fixture
def tiny_scenario():
    return parse_scenario(TINY, "tiny.yaml")


@pytest.fixture
def tiny_path(tmp_path: Path) -> Path:
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY, encoding="utf-8")
    return p


# one line per acceptance criterion, echoed after the test session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
