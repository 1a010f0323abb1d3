import numpy as np
import pytest

from attention_geometry.transformer import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_params():
    cfg = ModelConfig(num_layers=2, num_heads=2, model_dim=8, ff_dim=12, vocab_size=11, max_seq=6)
    return init_params(cfg, "iid", sigma=0.3, seed=3)


CRITERION_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion and fail on a miss."""

    def record(label: str, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"{label}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" | {detail}"
        if failed:
            line += f" | failed: {', '.join(failed)}"
        CRITERION_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
