"""Shared fixtures for the end-to-end checks.

The full-scale runs are expensive, so every experiment is computed at most
once per session and shared through a single Workspace. Set
``DEMOSCORE_ACCEPTANCE_CACHE`` to a directory to keep the stage artifacts
(demos, checkpoints, rollout pools) between sessions.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import pytest

from demoscore.pipeline import ExperimentConfig, Workspace, run_experiment, variant_config

VERDICTS: list[str] = []

BASELINE_METHODS = ["auto_il", "rcp", "loss_weighting"]


def record_verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


class Experiments:
    """Lazily computed reports keyed by (mixture label, variant, method set)."""

    def __init__(self, root: Path):
        self.root = root
        self.ws = Workspace(root)
        self.reports: dict = {}
        self.elapsed: dict = {}

    def config(self, mixture=None) -> ExperimentConfig:
        cfg = ExperimentConfig(output_dir=str(self.root))
        if mixture is not None:
            cfg = ExperimentConfig(mixture=mixture, output_dir=str(self.root))
        return cfg

    def get(self, methods, variant: str = "original", mixture=None):
        cfg = self.config(mixture)
        if variant != "original":
            cfg = variant_config(cfg, variant)
        key = (cfg.label, variant, tuple(methods))
        if key not in self.reports:
            t0 = time.perf_counter()
            self.reports[key] = run_experiment(cfg, list(methods), variant=variant, ws=self.ws)
            self.elapsed[key] = time.perf_counter() - t0
        return self.reports[key], self.elapsed[key]

    def all_reports(self):
        return list(self.reports.values())


@pytest.fixture(scope="session")
def experiments(tmp_path_factory) -> Experiments:
    cache = os.environ.get("DEMOSCORE_ACCEPTANCE_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("acceptance")
    return Experiments(root)
