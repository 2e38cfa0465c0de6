import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from effconf.attention import AttentionParams
from effconf.autodiff import DTensor

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_params(rng, d, heads, bias_scale=0.1):
    """Attention params with non-zero biases so every bias path is exercised."""
    p = AttentionParams.init(d, heads, rng)
    for _, t in p.tensors():
        if t.data.ndim == 1:
            t.data[:] = rng.normal(size=t.shape) * bias_scale
    return p


def leaf(rng, *shape, scale=1.0):
    return DTensor(rng.normal(size=shape) * scale, requires_grad=True)


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
