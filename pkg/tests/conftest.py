import numpy as np
import pytest

from secureftl.datasets import FederationSplit


@pytest.fixture
def small_split():
    """Hand-built five-row federation: 3 shared rows, 1 source-only, 1 eval."""
    rng = np.random.default_rng(42)
    ids_source = np.array([10, 11, 12, 13])
    ids_target = np.array([10, 11, 12, 14])
    split = FederationSplit(
        ids_source=ids_source,
        x_source=rng.normal(size=(4, 3)),
        labels_source=np.array([1, -1, 1, -1]),
        ids_target=ids_target,
        x_target=rng.normal(size=(4, 2)),
        overlap_ids=np.array([10, 11, 12]),
        labeled_ids=np.array([10, 11]),
        eval_ids=np.array([14]),
        labels_eval=np.array([1]),
    )
    split.validate()
    return split
