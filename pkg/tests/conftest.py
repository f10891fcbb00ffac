import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from roimae.volume import LabelVolume, Volume4D

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def nifti_dir():
    return FIXTURES / "nifti"


def random_volume(rng, shape=(8, 8, 8, 4), spacing=(2.0, 2.0, 2.0), tr=0.8):
    affine = np.diag(list(spacing) + [1.0])
    affine[:3, 3] = rng.normal(size=3)
    return Volume4D(rng.normal(size=shape).astype(np.float32), spacing_mm=spacing, tr_s=tr, affine=affine)


def random_labels(rng, shape=(6, 5, 4), n_labels=5, p_background=0.3):
    labels = rng.integers(1, n_labels + 1, size=shape)
    labels[rng.random(shape) < p_background] = 0
    return LabelVolume(labels.astype(np.uint16))


def make_experiment(root, strategies, n_per_class=4, repeats=1, epochs=2, batch_size=4, seed=42, dims=(8, 8, 8, 8), **train):
    """Write a small phantom dataset under ``root/data`` and return a matching config."""
    from roimae.harness import ExperimentConfig
    from roimae.mae import TrainConfig
    from roimae.preprocess import PreprocessConfig
    from roimae.synth import PhantomConfig, write_dataset

    data = write_dataset(PhantomConfig(dims=dims, margin=1, n_subjects_per_class=n_per_class), root / "data")
    settings = dict(epochs=epochs, batch_size=batch_size, d_hidden=8, d_latent=4, patch=(2, 2, 2, dims[3]), lr=1e-3)
    settings.update(train)
    return ExperimentConfig(
        data_dir=data,
        atlas=data / "atlas.nii",
        grouping=data / "grouping.txt",
        strategies=list(strategies),
        out_dir=root / "out",
        preprocess=PreprocessConfig(target_spacing_mm=2.0, target_shape=dims[:3], target_tr_s=0.8),
        train=TrainConfig(**settings),
        seed=seed,
        repeats=repeats,
    )
