import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from haipred.labeling import label_cohort
from haipred.synthgen import ScenarioConfig, generate_population


@pytest.fixture(scope="session")
def default_population():
    """Moderate default-scenario population shared by read-only tests."""
    dataset, truth = generate_population(ScenarioConfig(n_patients=400, rng_seed=5))
    return dataset, truth


@pytest.fixture(scope="session")
def default_labels(default_population):
    dataset, _ = default_population
    return label_cohort(dataset)
