import os

import numpy as np
import pytest

from aggpose.model import AggPose, aggpose_t
from aggpose.schemas import infant21
from aggpose.synthetic import generate_synthetic
from aggpose.train import PoseDataset, TrainConfig, fit


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """16-scene synthetic dataset shared across the suite."""
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(str(out), 16, seed=7, image_size=(64, 48), schema=infant21())
    return str(out)


@pytest.fixture(scope="session")
def synth_dataset(synth_dir):
    return PoseDataset(
        os.path.join(synth_dir, "annotations.json"),
        os.path.join(synth_dir, "images"),
        infant21(),
    )


OVERFIT_STEPS = 2000
# sigma scaled to the toy's 16x12 output grid (sharp targets localize
# best through the sub-pixel decoder); late decay keeps the full-rate
# phase long enough to memorize 16 scenes within the step budget
OVERFIT_SIGMA = 1.0
OVERFIT_MILESTONES = (0.85, 0.95)


@pytest.fixture(scope="session")
def overfit_run(synth_dataset, tmp_path_factory):
    """The 2000-step memorization run used by trainer/acceptance tests.

    Trains once per session; returns (model, dataset, fit result, config,
    elapsed seconds, out_dir).
    """
    import time

    out_dir = str(tmp_path_factory.mktemp("overfit"))
    model = AggPose(aggpose_t(), init_seed=1, dtype=np.float32)
    cfg = TrainConfig(
        total_steps=OVERFIT_STEPS,
        batch_size=16,
        seed=3,
        augment=None,
        holdout_fraction=0.0,
        heatmap_sigma=OVERFIT_SIGMA,
        milestones=OVERFIT_MILESTONES,
    )
    t0 = time.time()
    result = fit(model, synth_dataset, cfg, out_dir=out_dir)
    elapsed = time.time() - t0
    return model, synth_dataset, result, cfg, elapsed, out_dir
