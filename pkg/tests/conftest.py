"""Shared fixtures: the standard acceptance profile is reduced once per session."""

from __future__ import annotations

import time

import pytest

from qtkam.geometry import GeometryParams, MomentumMap
from qtkam.kam import KamSchedule, run_reduction
from qtkam.operators import TruncationBox, site_box
from qtkam.oracle import compare_to_oracle, spectrum_oracle
from qtkam.potentials import random_potential

PROFILE = {
    "kmap": MomentumMap.identity(),
    "geometry": GeometryParams(0.3),
    "truncation": TruncationBox(8, 16),
    "omega": ((5**0.5 - 1) / 2, 1 - 2**0.5),
    "epsilon": 1e-3,
    "potential_seed": 7,
    "support_radius": 6,
    "schedule": KamSchedule(0.25, 2, 1e-3, 2.5, 6),
    "gamma": 1e-2,
    "interior_margin": 4,
}

VERDICTS: list = []


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def profile():
    return PROFILE


@pytest.fixture(scope="session")
def profile_box():
    return site_box(PROFILE["truncation"], PROFILE["kmap"], PROFILE["geometry"])


@pytest.fixture(scope="session")
def profile_potential():
    return random_potential(PROFILE["potential_seed"], PROFILE["epsilon"], PROFILE["support_radius"],
                            PROFILE["kmap"])


@pytest.fixture(scope="session")
def profile_run(profile_box, profile_potential):
    t0 = time.perf_counter()
    spec, state, status = run_reduction(profile_potential, PROFILE["omega"], PROFILE["schedule"],
                                        PROFILE["gamma"], profile_box)
    return spec, state, status, time.perf_counter() - t0


@pytest.fixture(scope="session")
def profile_oracle(profile_run, profile_box, profile_potential):
    t0 = time.perf_counter()
    orc = spectrum_oracle(profile_potential, PROFILE["omega"], profile_box)
    rep = compare_to_oracle(profile_run[0], orc, PROFILE["interior_margin"])
    return rep, time.perf_counter() - t0
