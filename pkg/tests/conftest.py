import numpy as np
import pytest
from hypothesis import settings

from clmpt.kg import KnowledgeGraph
from clmpt.synthetic import ring_kg

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def ring():
    return ring_kg(20, (1, 2, 3))


@pytest.fixture
def chain():
    # a=0 -r0-> m=1, b=2 -r1-> m, m -r2-> z=3, plus a spare entity 4
    return KnowledgeGraph(5, 3, [(0, 0, 1), (2, 1, 1), (1, 2, 3)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
