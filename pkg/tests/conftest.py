import os

import numpy as np
import pytest
import torch
from PIL import Image

# single-threaded keeps runs bit-reproducible and is faster on the tiny
# tensors used here
torch.set_num_threads(1)


def smooth_image(rng, h, w, cell=8):
    """Blocky random image in [0,1]; easy for a small net to overfit."""
    a = rng.rand((h + cell - 1) // cell, (w + cell - 1) // cell).astype(np.float32)
    img = np.kron(a, np.ones((cell, cell), np.float32))[:h, :w]
    return np.clip(img, 0.0, 1.0)


def write_pair(low_dir, gt_dir, name, rng, h=64, w=64, scale=0.3):
    gt = np.stack([smooth_image(rng, h, w) for _ in range(3)], axis=-1)
    gt8 = (gt * 255).round().astype(np.uint8)
    low8 = (gt8 * scale).round().astype(np.uint8)
    Image.fromarray(gt8).save(os.path.join(gt_dir, name))
    Image.fromarray(low8).save(os.path.join(low_dir, name))


def build_generic_tree(root, train_pairs, test_pairs, h=64, w=64, seed=0):
    rng = np.random.RandomState(seed)
    for split, count in (("train", train_pairs), ("test", test_pairs)):
        low_dir = os.path.join(root, split, "low")
        gt_dir = os.path.join(root, split, "high")
        os.makedirs(low_dir)
        os.makedirs(gt_dir)
        for i in range(count):
            write_pair(low_dir, gt_dir, f"pair{i:02d}.png", rng, h, w)
    return root


@pytest.fixture(scope="session")
def paired_root(tmp_path_factory):
    """generic_paired tree: 4 train pairs + 2 test pairs, 64x64."""
    root = tmp_path_factory.mktemp("paired")
    return str(build_generic_tree(str(root), 4, 2))


@pytest.fixture(scope="session")
def overfit_root(tmp_path_factory):
    """2-pair 64x64 fixture for the overfit smoke runs."""
    root = tmp_path_factory.mktemp("overfit")
    return str(build_generic_tree(str(root), 2, 2, seed=42))


@pytest.fixture(scope="session")
def lol_v1_root(tmp_path_factory):
    """Synthetic tree mimicking the LOL-v1 directory layout (5 train, 2 test)."""
    root = str(tmp_path_factory.mktemp("lolv1"))
    rng = np.random.RandomState(3)
    for sub, count in (("our485", 5), ("eval15", 2)):
        low_dir = os.path.join(root, sub, "low")
        gt_dir = os.path.join(root, sub, "high")
        os.makedirs(low_dir)
        os.makedirs(gt_dir)
        for i in range(count):
            write_pair(low_dir, gt_dir, f"{i + 1}.png", rng, 48, 48)
    return root
