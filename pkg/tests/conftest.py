import numpy as np
import pytest

from cifedsim.feature_store import FeatureDataset, SynthSpec, generate_synthetic


@pytest.fixture
def tiny_dataset():
    """3 records, 4 dims, 2 classes; small enough to reason about by hand."""
    vectors = np.array(
        [[0.5, -1.0, 2.0, 0.0], [1.5, 0.25, -0.75, 3.0], [0.0, 0.0, 1.0, -2.0]],
        dtype=np.float32,
    )
    return FeatureDataset(4, 2, "toy", vectors, np.array([0, 1, 0]))


def clustered_dataset(dim=16, classes=4, per_class=50, separability=2.0,
                      noise=0.5, mean_seed=0, draw_seed=1, transform=None,
                      domain_id="synth"):
    spec = SynthSpec.make(
        dim=dim, num_classes=classes, separability=separability, noise=noise,
        mean_seed=mean_seed, draw_seed=draw_seed, transform=transform,
    )
    return generate_synthetic(spec, [per_class] * classes, domain_id=domain_id)
