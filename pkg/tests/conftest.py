import numpy as np
import pytest

from tvmerge.nn import Bag, ModelWeights, NetConfig, init_weights
from tvmerge.survival import SurvLabel

SMALL = NetConfig(d_in=5, d_embed=6, d_attn=4, n_bins=3)


def random_bag(rng, config: NetConfig, n=None, label=None) -> Bag:
    n = n or int(rng.integers(2, 9))
    if label is None:
        label = SurvLabel(int(rng.integers(0, config.n_bins)), int(rng.integers(0, 2)))
    return Bag(rng.standard_normal((n, config.d_in)), label)


def random_bags(rng, config: NetConfig, count: int) -> list[Bag]:
    return [random_bag(rng, config) for _ in range(count)]


def perturbed_model(m_zero: ModelWeights, rng, scale=0.3) -> ModelWeights:
    return ModelWeights.from_flat(
        m_zero.config, m_zero.flat() + scale * rng.standard_normal(m_zero.config.n_params)
    )


def finite_difference(f, vec, index, step=1e-5):
    e = np.zeros_like(vec)
    e[index] = step
    return (f(vec + e) - f(vec - e)) / (2 * step)


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_model():
    return init_weights(SMALL, 0)


# Acceptance verdicts, printed as one line per criterion at the end of the run.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
