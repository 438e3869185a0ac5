import numpy as np
import pytest
import torch

from citycast.data import SyntheticSpec, generate_synthetic_city
from citycast.graph import normalize_adjacency, region_embeddings
from citycast.model import ModelConfig, init_params


def tiny_config(**overrides) -> ModelConfig:
    """Hourly tokens at a 15-minute rate: P=S=4, one-day history/horizon would be 96,
    kept at 8 steps (two tokens) so gradient checks stay fast."""
    base = dict(d=8, heads=2, layers=1, P=4, S=4, H=8, F=8, k=2,
                sample_rate_minutes=15, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def daily_config(**overrides) -> ModelConfig:
    """Hourly data with a one-day history and horizon, so seasonal-naive is defined."""
    base = dict(d=8, heads=2, layers=1, P=4, S=4, H=24, F=24, k=2,
                sample_rate_minutes=60, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def tiny_city(r=5, days=3, seed=0, kind="sensor", rate=15, **kw):
    spec = SyntheticSpec(num_regions=r, days=days, sample_rate_minutes=rate, network_kind=kind,
                         seed=seed, name=kw.pop("name", f"city{seed}"), **kw)
    return generate_synthetic_city(spec)


def path_graph(n: int) -> np.ndarray:
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return a


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def city():
    return tiny_city()


@pytest.fixture
def graph_inputs(city, cfg):
    emb = region_embeddings(city.graph, cfg.k)
    return emb.phi, normalize_adjacency(city.graph)


@pytest.fixture
def model(cfg):
    return init_params(cfg, seed=0)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield


# acceptance criteria report: one line per criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"criterion {number:>2} {status}  {title}" + (f"  ({detail})" if detail else "")
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
