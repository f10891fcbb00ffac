import numpy as np
import pytest

from roimae.synth import (
    PhantomConfig,
    generate_atlas,
    generate_subject,
    phantom_grouping,
    target_group_name,
    write_dataset,
)
from roimae.harness import read_label_csv
from roimae.nifti_io import load_volume, read_labels
from roimae.atlas import load_grouping
from roimae.volume import brain_mask


def test_atlas_one_region():
    cfg = PhantomConfig(dims=(8, 8, 8, 4), n_regions=1, target_region=1)
    labels = generate_atlas(cfg).labels
    assert set(np.unique(labels)) == {0, 1}
    assert np.all(labels[2:6, 2:6, 2:6] == 1)


def test_atlas_seven_regions_counts():
    cfg = PhantomConfig(dims=(16, 16, 16, 4), margin=2)
    labels = generate_atlas(cfg).labels
    # 12^3 brain block cut into a 2x2x2 grid of 6^3 cells; cell 8 folds into label 7
    counts = {k: int(np.sum(labels == k)) for k in range(1, 8)}
    assert counts == {1: 216, 2: 216, 3: 216, 4: 216, 5: 216, 6: 216, 7: 432}
    assert generate_atlas(cfg) == generate_atlas(cfg)


def test_atlas_too_many_regions():
    with pytest.raises(ValueError):
        generate_atlas(PhantomConfig(dims=(4, 4, 4, 2), margin=1, n_regions=9, target_region=1))


def test_noise_free_class0_region_matches_others():
    cfg = PhantomConfig(dims=(8, 8, 8, 6), margin=1, noise_std=0.0)
    vol = generate_subject(cfg, 0, 3)
    atlas = generate_atlas(cfg).labels
    target = vol.data[atlas == cfg.target_region]
    other = vol.data[(atlas != 0) & (atlas != cfg.target_region)]
    assert np.all(target == other[0])


def test_classes_differ_only_in_target_region():
    cfg = PhantomConfig(dims=(10, 10, 10, 12), margin=1)
    atlas = generate_atlas(cfg).labels
    a = generate_subject(cfg, 0, 5)
    b = generate_subject(cfg, 1, 5)
    outside = atlas != cfg.target_region
    assert np.array_equal(a.data[outside], b.data[outside])
    assert not np.array_equal(a.data[~outside], b.data[~outside])


def test_background_exactly_zero():
    cfg = PhantomConfig()
    vol = generate_subject(cfg, 1, 0)
    assert brain_mask(vol) == brain_mask(vol) and brain_mask(vol).popcount == 12**3
    assert np.all(vol.data[:2] == 0.0)


def test_class_frequency_power():
    cfg = PhantomConfig(dims=(10, 10, 10, 50), margin=1, noise_std=0.5)
    atlas = generate_atlas(cfg).labels
    freq = 2 * cfg.base_freq_hz
    k = int(round(freq * cfg.tr_s * 50))  # periodogram bin of the class signal
    powers = []
    for label in (0, 1):
        series = generate_subject(cfg, label, 1).data[atlas == cfg.target_region].astype(np.float64)
        series -= series.mean(axis=1, keepdims=True)
        powers.append(np.mean(np.abs(np.fft.rfft(series, axis=1)[:, k]) ** 2))
    assert powers[1] > powers[0]


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(target_region=9)
    with pytest.raises(ValueError):
        PhantomConfig(ar_coef=1.0)


def test_grouping_names_target():
    cfg = PhantomConfig()
    table = phantom_grouping(cfg)
    assert target_group_name(cfg) == "LimbicRegions"
    assert table["limbic"].label_ids == {6}


@pytest.mark.parametrize("fmt", ["v4d", "nii"])
def test_write_dataset(tmp_path, fmt):
    cfg = PhantomConfig(dims=(8, 8, 8, 4), margin=1, n_subjects_per_class=2)
    out = write_dataset(cfg, tmp_path, fmt)
    labels = read_label_csv(out / "labels.csv")
    assert labels == {"sub-0000": 0, "sub-0001": 1, "sub-0002": 0, "sub-0003": 1}
    vol = load_volume(out / f"sub-0001.{fmt}")
    assert vol == generate_subject(cfg, 1, 1)
    assert read_labels(out / "atlas.nii") == generate_atlas(cfg)
    assert load_grouping(out / "grouping.txt").names == phantom_grouping(cfg).names
    with pytest.raises(ValueError):
        write_dataset(cfg, tmp_path, "csv")
