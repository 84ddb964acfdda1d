import numpy as np
import pytest

from pemma.backbone import ModelConfig, SegmentationModel
from pemma.data import default_manifest_dict, manifest_from_dict


def tiny_config(**kw) -> ModelConfig:
    base = dict(side=8, patch=4, dim=8, heads=2, depth=2, skip_channels=2, decoder_channels=(4, 4, 4, 2),
                decoder_final=4)
    base.update(kw)
    return ModelConfig(**base)


def f64_model(seed=0, primary="ct", **kw) -> SegmentationModel:
    return SegmentationModel(tiny_config(**kw), seed=seed, primary=primary).astype(np.float64)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_manifest():
    return manifest_from_dict(default_manifest_dict("tiny"))


# acceptance summary --------------------------------------------------------------


class CriterionLog:
    """Collects one outcome per acceptance criterion for the terminal summary."""

    def __init__(self):
        self.rows: dict[int, tuple[str, bool, str]] = {}

    def record(self, number: int, title: str, passed: bool, detail: str = "") -> None:
        self.rows[number] = (title, passed, detail)


class _Criterion:
    def __init__(self, log: CriterionLog, number: int, title: str):
        self.log, self.number, self.title = log, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.log.record(self.number, self.title, exc_type is None, self.detail if exc is None else f"{self.detail} {exc!r}".strip())
        return False


def pytest_configure(config):
    config.criterion_log = CriterionLog()


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records PASS when the block finishes without raising."""
    return lambda number, title: _Criterion(request.config.criterion_log, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = getattr(config, "criterion_log", None)
    if rows is None or not rows.rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(rows.rows):
        title, passed, detail = rows.rows[number]
        line = f"[{'PASS' if passed else 'FAIL'}] {number:2d} {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
