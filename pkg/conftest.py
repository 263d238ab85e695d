from pathlib import Path

import numpy as np
import pytest

from graph import Graph

SMALL_CONFIG = """\
[experiment]
mode = federate
seed = 3
n_splits = 2

[sbm]
nodes_per_group = 40, 40
p_intra = 0.15
p_inter = 0.03
seed = 1

[partition]
k_clients = 4
hops = 2
seed = 2

[model]
hidden_dim = 8

[training]
rounds = 3
"""


def make_random_graph(rng: np.random.Generator, n: int, p: float = 0.3, d: int = 3) -> Graph:
    """Erdos-Renyi graph with alternating groups and random labels."""
    upper = np.triu(rng.random((n, n)) < p, k=1)
    edges = np.argwhere(upper)
    return Graph.from_edge_list(
        n,
        edges,
        rng.normal(size=(n, d)),
        np.arange(n) % 2,
        rng.integers(0, 2, size=n),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_graph():
    return make_random_graph


@pytest.fixture
def write_config(tmp_path):
    """Write config text to a file under tmp_path and return the path."""

    def _write(text: str = SMALL_CONFIG, name: str = "experiment.ini") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write
