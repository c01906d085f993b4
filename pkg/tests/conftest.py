import numpy as np
import pytest

from gfic.panel import PanelDataset

# Lines recorded by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def random_panel(rng, n=30, T=5, controls=0) -> PanelDataset:
    ctrl = rng.normal(size=(n, T, controls)) if controls else None
    return PanelDataset.from_arrays(rng.normal(size=(n, T)), rng.normal(size=(n, T)), controls=ctrl)


def dynamic_panel(rng, n=200, T=5, theta=0.5, gamma=0.4, sigma_xv=0.0):
    """Small simulated dynamic panel with one lag."""
    from gfic.mclab import DpanelDgp, draw_dpanel

    return draw_dpanel(DpanelDgp(n=n, T=T, theta=theta, gamma=(gamma,), sigma_xv=sigma_xv), rng)
