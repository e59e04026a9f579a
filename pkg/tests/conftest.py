import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class ScriptedRng:
    """Stand-in generator that replays fixed uniforms (and normals)."""

    def __init__(self, uniforms, normals=None):
        self._u = [np.asarray(u, float) for u in uniforms]
        self._z = [np.asarray(z, float) for z in (normals or [])]

    def random(self, size=None):
        u = self._u.pop(0)
        return float(u) if size is None else u

    def standard_normal(self, size=None):
        z = self._z.pop(0)
        return float(z) if size is None else z


@pytest.fixture
def scripted():
    return ScriptedRng


CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
