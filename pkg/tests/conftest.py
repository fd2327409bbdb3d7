import time

import numpy as np
import pytest

from pavsod.acoustic import SeldConfig, make_seld_dataset, pretrain_seld


@pytest.fixture(scope="session")
def seld_run():
    """Default-config localization/detection pretraining, shared across test modules."""
    cfg = SeldConfig()
    train = make_seld_dataset(64, cfg, seed=1)
    val = make_seld_dataset(16, cfg, seed=2)
    t0 = time.perf_counter()
    enc, history = pretrain_seld(train, epochs=20, lr=1e-3, config=cfg, seed=0)
    return {"encoder": enc, "history": history, "val": val, "seconds": time.perf_counter() - t0}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if passed else 'FAIL'}  {detail}")
