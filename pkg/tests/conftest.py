import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nirflow import synth

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@functools.lru_cache(maxsize=None)
def scene(width=96, height=72, motion="translation:2,0", seed=0, **kw):
    """Cached synthetic sequence; keyword values must be hashable."""
    cfg = synth.SceneConfig(width=width, height=height, motion=synth.parse_motion(motion),
                            seed=seed, **kw)
    return synth.generate(cfg)


def mean_ee(flow, truth, margin=0):
    du = flow.u - truth.u
    dv = flow.v - truth.v
    if margin:
        du = du[margin:-margin, margin:-margin]
        dv = dv[margin:-margin, margin:-margin]
    return float(np.hypot(du, dv).mean())
