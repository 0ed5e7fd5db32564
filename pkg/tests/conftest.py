import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def action_library():
    from feedsim.acquire import generate_expert_dataset, k_medoids
    return k_medoids(generate_expert_dataset(500, seed=7), k=11, seed=7)
