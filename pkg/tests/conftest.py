import numpy as np
import pytest
from hypothesis import settings

from loadid.simulate import ApplianceSpec, GridSpec, Ramp, Surge, build_default_catalog

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def toy_catalog():
    """Four appliances with clearly distinct signatures."""
    full = {s.name: s for s in build_default_catalog()}
    picked = ["ElectricKettle", "Television", "FluorescentLamp", "MicrowaveOven"]
    out = []
    for i, name in enumerate(picked):
        d = full[name].to_dict()
        d["id"] = i
        out.append(ApplianceSpec.from_dict(d))
    return out


@pytest.fixture
def toy_specs():
    return toy_catalog()


@pytest.fixture
def quiet_grid():
    return GridSpec(noise_std_a=0.0)


def sine_spec(id=0, amp=1.0, **kw):
    return ApplianceSpec(id, f"sine{id}", 100.0, [(1, amp, 0.0)], **kw)


# acceptance results, printed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
