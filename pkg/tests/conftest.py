import numpy as np
import pytest
from hypothesis import strategies as st

from voltcast import network


@st.composite
def trees(draw, min_bus=2, max_bus=12, phases="abc"):
    """Random radial feeder: each bus hangs off a uniformly chosen earlier bus."""
    n = draw(st.integers(min_bus, max_bus))
    seed = draw(st.integers(0, 2**31 - 1))
    return network.random_feeder(n, np.random.default_rng(seed), phases=phases)


def two_bus(r=0.01, x=0.02, phases="a"):
    return network.chain_feeder(2, r, x, phases)


def tree_doc(parents, phases="a", r=0.01, x=0.02):
    """Feeder document from a parent list (parents[i] feeds bus i + 1)."""
    n_bus = len(parents) + 1
    z = lambda v: [[v if i == j and "abc"[i] in phases else 0.0 for j in range(3)] for i in range(3)]
    return {
        "base": {"voltage_v": 1.0, "power_va": 1.0},
        "buses": [{"id": i, "phases": phases, "load": i > 0} for i in range(n_bus)],
        "lines": [{"from": p, "to": i + 1, "r": z(r), "x": z(x), "unit": "pu"}
                  for i, p in enumerate(parents)],
    }


@pytest.fixture(scope="session")
def ieee37():
    return network.ieee37()
