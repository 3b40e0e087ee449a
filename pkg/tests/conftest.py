import numpy as np
import pytest

from msdet.synthdata import DataConfig, generate_dataset

ACCEPTANCE_LINES = []


def small_config(**kw):
    base = dict(scenes_strong=16, scenes_weak=16, scenes_test=12)
    base.update(kw)
    return DataConfig(**base)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(small_config(), seed=3)


@pytest.fixture
def fresh_ds():
    return generate_dataset(small_config(scenes_strong=8, scenes_weak=8, scenes_test=4), seed=5)


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(1.0, float(np.max(np.abs(numeric)))))


def record_acceptance(line):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY = {
    "dataset": {"scenes_strong": 10, "scenes_weak": 10, "scenes_test": 6, "heldout_fraction": 0.2},
    "objectness": {"maxiter": 60, "ramp_iters": 20},
    "detector": {"epochs": 2, "supervised_iters": 30, "mining_epochs": 1},
    "ablation": {"seeds": [0], "sweep_percents": [5, 15]},
}


@pytest.fixture
def tiny_config_file(tmp_path):
    import json

    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path
