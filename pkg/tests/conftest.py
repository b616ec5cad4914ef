"""Shared fixtures: synthetic datasets and one fully trained model."""

import time
import warnings

import numpy as np
import pytest
import torch
from PIL import Image

from fsad import TrainConfig, generate_synthetic, make_kshot_split, train_from_split
from fsad.data import load_image

# Acceptance fixture protocol: tiny backbone, 64x64, 200 normal / 40
# anomalous, k = 8, at most 50 epochs on CPU.
ACCEPTANCE_CONFIG = dict(
    backbone="tiny",
    d_prime=32,
    temperature=1.0,
    top_h=8,
    margin_weight=1.0,
    mu=0.2,
    beta=1.2,
    negatives_per_anchor=1,
    lr=1e-3,
    batch_size=32,
    max_epochs=40,
    patience=15,
    sigma=1.0,
    seed=1,
    image_size=64,
    k=8,
)


def write_image(path, arr):
    """Write a (H, W, 3) float [0,1] array as PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(arr) * 255.0 + 0.5).astype(np.uint8)).save(path)


def make_layout(root, category="widget", n_train=3, test_spec=None, size=16, seed=0):
    """Build a miniature dataset directory; test_spec maps defect name to
    (count, with_mask)."""
    rng = np.random.default_rng(seed)
    cat = root / category
    for i in range(n_train):
        write_image(cat / "train" / "good" / f"{i:03d}.png", rng.uniform(0.2, 0.8, (size, size, 3)))
    (cat / "test").mkdir(parents=True, exist_ok=True)
    for defect, (count, with_mask) in (test_spec or {}).items():
        for i in range(count):
            write_image(cat / "test" / defect / f"{i:03d}.png", rng.uniform(0.2, 0.8, (size, size, 3)))
            if defect != "good" and with_mask:
                mask = np.zeros((size, size, 3))
                mask[4:8, 4:8] = 1.0
                write_image(cat / "ground_truth" / defect / f"{i:03d}_mask.png", mask)
    return root


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """The desk-scale synthetic dataset used by acceptance and trainer tests."""
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(root, n_normal=200, n_anomalous=40, size=64, seed=11)
    return root


@pytest.fixture(scope="session")
def synth_split(synth_root):
    from fsad import scan_dataset

    return make_kshot_split(scan_dataset(synth_root, "synthetic"), k=8, seed=3)


@pytest.fixture(scope="session")
def acceptance_run(synth_split):
    """Train the acceptance model once; records wall-clock training time."""
    config = TrainConfig(**ACCEPTANCE_CONFIG)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        start = time.monotonic()
        result = train_from_split(synth_split, config)
        train_seconds = time.monotonic() - start
    return {
        "result": result,
        "config": config,
        "split": synth_split,
        "train_seconds": train_seconds,
    }


@pytest.fixture(scope="session")
def test_batch(synth_split):
    """Test images and labels of the synthetic split as tensors/arrays."""
    records = list(synth_split.test_items)
    images = torch.stack(
        [load_image(synth_split.root / r.path, 64) for r in records]
    )
    labels = np.array([r.label for r in records], dtype=np.int64)
    return images, labels, records


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
