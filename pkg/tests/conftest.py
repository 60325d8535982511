import importlib

import numpy as np
import pytest

from msgaze import kernels
from msgaze.kernels import _fallback


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    """Collect outcomes of the acceptance gate for the terminal summary."""
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1].removeprefix("test_")
    entry = _ACCEPTANCE.setdefault(name, {"passed": True, "skipped": False, "detail": ""})
    if report.failed:
        entry["passed"] = False
    if report.skipped:
        entry["skipped"] = True
    for key, value in report.user_properties:
        if key == "acceptance":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _ACCEPTANCE.items():
        status = "SKIP" if entry["skipped"] else ("PASS" if entry["passed"] else "FAIL")
        detail = f" -- {entry['detail']}" if entry["detail"] else ""
        terminalreporter.write_line(f"{status} {name}{detail}")


def _backends():
    out = [("python", _fallback)]
    try:
        out.append(("cython", importlib.import_module("msgaze.kernels._ckernels")))
    except ImportError:
        pass
    return out


BACKENDS = _backends()


@pytest.fixture(params=[b for _, b in BACKENDS], ids=[n for n, _ in BACKENDS])
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """48 synthetic samples over 6 subjects, written to disk once per session."""
    from msgaze.synth import SceneRanges, generate_dataset

    out = tmp_path_factory.mktemp("tiny")
    return generate_dataset(48, SceneRanges(), seed=3, out_dir=out, n_subjects=6)


@pytest.fixture(scope="session")
def tiny_aeri(tiny_dataset):
    from msgaze.aeri import AeriTrainConfig, train_aeri
    from msgaze.augment import AugmentConfig

    cfg = AeriTrainConfig(epochs=1, width_multiplier=0.125, augment=AugmentConfig.disabled(), seed=1)
    return train_aeri(tiny_dataset, cfg)
