"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from gpje.config import RunConfig
from gpje.domains import DomainSpec

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def unit_disc():
    return DomainSpec("disc", (0.0, 0.0), (1.0, 1.0))


def load_config(name: str, out_dir: Path, **overrides) -> RunConfig:
    """Shipped config with its output redirected; overrides are 'block.key' -> value."""
    cfg = RunConfig.load(CONFIGS / f"{name}.toml")
    cfg.output_dir = str(out_dir)
    for key, val in overrides.items():
        block, attr = key.split("__")
        setattr(getattr(cfg, block), attr, val)
    return cfg


def write_config(cfg: RunConfig, path: Path) -> Path:
    path.write_text(cfg.dumps())
    return path
