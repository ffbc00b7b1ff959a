import sys

import pytest

from mstdp.graph import build_graph
from mstdp.synth import generate_city, generate_population, generate_trajectories, select_days, split_dataset


@pytest.fixture(scope="session")
def city():
    return generate_city(1, 20, 20, 16)


@pytest.fixture(scope="session")
def agents(city):
    return generate_population(city, 200, seed=1)


@pytest.fixture(scope="session")
def corpus(city, agents):
    """The default desk-scale corpus: 200 agents, 28 days, T=24."""
    return generate_trajectories(city, agents, n_days=28, T=24, seed=1)


@pytest.fixture(scope="session")
def split(corpus):
    return split_dataset(corpus)


@pytest.fixture(scope="session")
def train_trajs(corpus, split):
    return [t for h in select_days(corpus, split.train).values() for t in h.sorted_days()]


@pytest.fixture(scope="session")
def graph_and_features(train_trajs, city):
    return build_graph(train_trajs, city)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
