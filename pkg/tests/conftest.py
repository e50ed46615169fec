"""Shared fixtures.

Small problems (8 subdivisions per block side, no refinement) keep the unit
and property tests fast. The production studies used by the acceptance
suite are session fixtures so that several tests can share one run.
"""
from __future__ import annotations

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from porohomog.blayer import compute_boundary_layer
from porohomog.cellprob import compute_cell
from porohomog.geometry import PRESET_SHAPES
from porohomog.mesh import MeshParams
from porohomog.study import Study, StudyConfig

settings.register_profile(
    "porohomog", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("porohomog")

SMALL = MeshParams(8, 2.0, False, 0)
SMALL_SYM = MeshParams(8, 2.0, True, 0)

# acceptance lines collected for the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def ellipse():
    return PRESET_SHAPES["ellipse"]


@pytest.fixture(scope="session")
def circle():
    return PRESET_SHAPES["circle"]


@pytest.fixture(scope="session")
def ellipse_cell(ellipse):
    return compute_cell(ellipse, SMALL)


@pytest.fixture(scope="session")
def circle_cell(circle):
    return compute_cell(circle, SMALL_SYM)


@pytest.fixture(scope="session")
def ellipse_bl(ellipse_cell):
    return compute_boundary_layer(ellipse_cell, (4, 4))


@pytest.fixture(scope="session")
def ellipse_bl6(ellipse_cell):
    return compute_boundary_layer(ellipse_cell, (6, 6))


@pytest.fixture(scope="session")
def circle_bl(circle_cell):
    return compute_boundary_layer(circle_cell, (4, 4))


@dataclasses.dataclass
class StudyRun:
    study: Study
    constants: dict
    fits: dict
    seconds: float

    @property
    def out(self) -> Path:
        return self.study.out


def run_preset(name, out, reproducible=True) -> StudyRun:
    cfg = dataclasses.replace(StudyConfig.preset(name), out=str(out), reproducible=reproducible).validate()
    study = Study(cfg)
    t0 = time.perf_counter()
    constants, fits = study.run()
    return StudyRun(study, constants, fits, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def ellipse_study(tmp_path_factory):
    """Full preset ellipse study (reproducible mode)."""
    return run_preset("ellipse", tmp_path_factory.mktemp("ellipse_study"))


@pytest.fixture(scope="session")
def circle_study(tmp_path_factory):
    """Full preset circle study on mirror-symmetric meshes (reproducible mode)."""
    return run_preset("circle", tmp_path_factory.mktemp("circle_study"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
