"""
Shared pytest fixtures for the workbench tests.
"""
import os
import sys

import pytest
import torch
from hypothesis import settings

# Add current directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core_utils import Config  # noqa: E402
from dataset_manager import SyntheticFaceSpec, generate_synthetic_dataset  # noqa: E402

settings.register_profile("workbench", deadline=None, max_examples=40)
settings.load_profile("workbench")

torch.set_num_threads(1)


def pytest_collection_modifyitems(config, items):
    if Config.RUN_SLOW_TESTS:
        return
    skip_slow = pytest.mark.skip(reason="slow end-to-end check; set GAN_WORKBENCH_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def tiny_faces(tmp_path_factory):
    """80 labelled 16x16 faces, split 64/8/8."""
    root = tmp_path_factory.mktemp("tiny_faces")
    return generate_synthetic_dataset(SyntheticFaceSpec(seed=7, image_size=16), 80, str(root))


@pytest.fixture
def tiny_run_dict(tiny_faces, tmp_path):
    """Raw run config for a few 16x16 steps; tests tweak it before parsing."""
    return {
        "seed": 0,
        "output_dir": str(tmp_path / "run"),
        "model": {"variant": "USE-CMHSA-GAN", "latent_dim": 8, "base_width": 8, "image_size": 16},
        "train": {"steps": 6, "batch_size": 8, "sample_every": 3, "checkpoint_every": 3,
                  "sample_count": 4, "log_every": 3},
        "data": {"manifest": tiny_faces.root},
        "metrics": {"extractor": "toy", "n_samples": 64, "splits": 4, "split": "test"},
    }
