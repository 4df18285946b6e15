import logging

import pytest
import torch

from pigp.problem import load_spec, parse_spec

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("pigp").setLevel(logging.ERROR)
    yield


def small_spec(name, coarse=(21, 11), fine=(31, 16), n_g=3, n_f=16, res=8, **train):
    """A bundled problem shrunk to unit-test size."""
    raw = load_spec(name).raw
    raw["grid"] = {"coarse": list(coarse), "fine": list(fine), "n_g": n_g}
    raw["network"] = dict(raw.get("network") or {}, n_f=n_f, res=res)
    raw["train"] = dict(raw.get("train") or {}, **train)
    return parse_spec(raw)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def accept():
    """Record one acceptance verdict; the terminal summary prints them all."""

    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
        else:
            terminalreporter.write_line(f"ACCEPTANCE {n:2d} NOT RUN")

