"""Shared fixtures: one tiny dataset/model/centroid trio reused across tests.

The trio is deliberately small (10 identities, 12x8 images, 8 training
epochs) so the whole unit suite stays fast; anything that needs the full
benchmark sizes builds its own fixtures.
"""

import numpy as np
import pytest

from xmodal_uap.centroids import compute_centroids
from xmodal_uap.embedder import TrainConfig, train
from xmodal_uap.synthdata import SynthConfig, generate_dataset


TINY_SYNTH = SynthConfig(
    num_identities=10,
    images_per_identity_per_modality=4,
    height=12,
    width=8,
    seed=91,
)

TINY_TRAIN = TrainConfig(
    epochs=8,
    batch_identities=5,
    images_per_identity=2,
    seed=13,
)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_dataset(TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_params(tiny_ds):
    return train(tiny_ds, TINY_TRAIN)


@pytest.fixture(scope="session")
def tiny_table(tiny_params, tiny_ds):
    return compute_centroids(tiny_params, tiny_ds)


@pytest.fixture()
def rng_seeds():
    """A handful of seeds for seeded-loop style checks."""
    return [0, 1, 7, 42, 1234]


def assert_pixels_valid(pixels: np.ndarray) -> None:
    assert np.all(pixels >= 0.0)
    assert np.all(pixels <= 255.0)
    assert np.all(np.isfinite(pixels))


# The acceptance tests append one PASS/FAIL line per criterion here; the
# terminal-summary hook echoes them after the run so they stay visible even
# when pytest captures stdout.
ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
