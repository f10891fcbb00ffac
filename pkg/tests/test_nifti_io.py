import struct

import numpy as np
import pytest

from conftest import random_volume
from make_nifti_fixtures import MALFORMED, build
from roimae import nifti_io
from roimae.nifti_io import (
    BadMagicError,
    LabelDatatypeError,
    NiftiError,
    V4DFormatError,
    load_volume,
    parse_header,
    read_labels,
    read_v4d,
    read_volume,
    write_labels,
    write_v4d,
    write_volume,
)
from roimae.volume import LabelVolume, Volume4D


def test_corpus_on_disk_matches_generator(nifti_dir):
    for name, data in build().items():
        assert (nifti_dir / name).read_bytes() == data, name


def test_one_voxel_fixture(nifti_dir):
    vol = read_volume(nifti_dir / "one_voxel_le.nii")
    assert vol.data.shape == (1, 1, 1, 1)
    assert vol.data[0, 0, 0, 0] == np.float32(7.0)
    assert vol.spacing_mm == (2.0, 2.0, 2.0)
    assert vol.tr_s == pytest.approx(0.8)
    assert np.allclose(vol.affine[:3, 3], [-10, 20, 30])


@pytest.mark.parametrize("stem", ["one_voxel", "small"])
def test_big_endian_twin_parses_identically(nifti_dir, stem):
    le = read_volume(nifti_dir / f"{stem}_le.nii")
    be = read_volume(nifti_dir / f"{stem}_be.nii")
    assert le == be


def test_big_endian_dim0_reads_as_swapped(nifti_dir):
    raw = (nifti_dir / "one_voxel_be.nii").read_bytes()
    assert struct.unpack("<h", raw[40:42])[0] == 1024  # 4 swapped
    _, endian = parse_header(raw)
    assert endian == ">"


def test_small_fixture_is_x_fastest(nifti_dir):
    vol = read_volume(nifti_dir / "small_le.nii")
    expected = (np.arange(24, dtype=np.float32) - 3.5).reshape((2, 3, 2, 2), order="F")
    assert np.array_equal(vol.data, expected)


def test_gzip_detected_by_magic_bytes(nifti_dir):
    assert read_volume(nifti_dir / "one_voxel_le.nii.gz") == read_volume(nifti_dir / "one_voxel_le.nii")


def test_scaling_applied(nifti_dir):
    vol = read_volume(nifti_dir / "int16_scaled.nii")
    assert vol.data.ravel().tolist() == [12.0, 7.0]


def test_zero_slope_means_no_scaling(tmp_path, nifti_dir):
    raw = bytearray((nifti_dir / "int16_scaled.nii").read_bytes())
    struct.pack_into("<f", raw, 112, 0.0)
    (tmp_path / "s.nii").write_bytes(bytes(raw))
    assert read_volume(tmp_path / "s.nii").data.ravel().tolist() == [4.0, -6.0]


def test_tr_defaults_and_units(tmp_path, nifti_dir):
    raw = bytearray((nifti_dir / "one_voxel_le.nii").read_bytes())
    struct.pack_into("<f", raw, 76 + 16, 0.0)
    (tmp_path / "a.nii").write_bytes(bytes(raw))
    assert read_volume(tmp_path / "a.nii").tr_s == 1.0
    struct.pack_into("<f", raw, 76 + 16, 800.0)
    raw[123] = 2 | 16  # msec
    (tmp_path / "b.nii").write_bytes(bytes(raw))
    assert read_volume(tmp_path / "b.nii").tr_s == pytest.approx(0.8)


def test_no_sform_gives_diagonal_affine(tmp_path, nifti_dir):
    raw = bytearray((nifti_dir / "one_voxel_le.nii").read_bytes())
    struct.pack_into("<h", raw, 254, 0)
    (tmp_path / "a.nii").write_bytes(bytes(raw))
    assert np.array_equal(read_volume(tmp_path / "a.nii").affine, np.diag([2.0, 2.0, 2.0, 1.0]))


@pytest.mark.parametrize("name", sorted(MALFORMED))
def test_malformed_fixture_raises_designated_error(nifti_dir, name):
    reader, error = MALFORMED[name]
    cls = getattr(nifti_io, error)
    fn = read_volume if reader == "volume" else read_labels
    with pytest.raises(cls) as info:
        fn(nifti_dir / name)
    assert isinstance(info.value, NiftiError)
    assert info.value.field


def test_error_variants_are_distinct():
    names = {error for _, error in MALFORMED.values()}
    classes = {getattr(nifti_io, n) for n in names}
    assert len(classes) == len(names)
    assert all(c is not NiftiError for c in classes)


def test_labels_u8(nifti_dir):
    for name in ("labels_u8.nii", "labels_u8_be.nii"):
        labels = read_labels(nifti_dir / name)
        assert labels.labels.ravel().tolist() == [0, 1, 2]


def test_label_slope_ignored_with_warning(tmp_path, nifti_dir, caplog):
    raw = bytearray((nifti_dir / "labels_u8.nii").read_bytes())
    struct.pack_into("<f", raw, 112, 3.0)
    (tmp_path / "a.nii").write_bytes(bytes(raw))
    labels = read_labels(tmp_path / "a.nii")
    assert labels.labels.ravel().tolist() == [0, 1, 2]
    assert "scl_slope" in caplog.text


def test_170_labels_survive(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.permutation(np.arange(171).repeat(12)).reshape(12, 19, 9).astype(np.uint16)
    write_labels(LabelVolume(data), tmp_path / "atlas.nii.gz")
    back = read_labels(tmp_path / "atlas.nii.gz")
    assert np.array_equal(back.labels, data)
    assert len(back.present_labels()) == 170


def test_float_labels_rejected_even_when_integral(tmp_path):
    write_volume(Volume4D(np.ones((2, 2, 2, 1))), tmp_path / "f.nii")
    with pytest.raises(LabelDatatypeError):
        read_labels(tmp_path / "f.nii")


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_round_trip_bit_exact(tmp_path, suffix):
    rng = np.random.default_rng(0)
    vol = random_volume(rng, (8, 8, 8, 4))
    path = tmp_path / f"v{suffix}"
    write_volume(vol, path)
    back = read_volume(path)
    assert back.data.tobytes(order="F") == vol.data.tobytes(order="F")
    assert np.allclose(back.affine, vol.affine, atol=1e-6)
    assert back.spacing_mm == pytest.approx(vol.spacing_mm, abs=1e-6)
    assert abs(back.tr_s - 0.8) < 1e-6
    assert nifti_io.read_header(path)["pixdim"][4] == pytest.approx(0.8)


def test_round_trip_special_values(tmp_path):
    data = np.array([np.nan, np.inf, -np.inf, -0.0, 1e-45, 3.4e38], dtype=np.float32).reshape(6, 1, 1, 1)
    write_volume(Volume4D(data), tmp_path / "s.nii")
    back = read_volume(tmp_path / "s.nii")
    assert back.data.tobytes() == data.tobytes()


def test_written_header_fields(tmp_path):
    write_volume(Volume4D(np.zeros((2, 2, 2, 3))), tmp_path / "a.nii")
    h = nifti_io.read_header(tmp_path / "a.nii")
    assert h["vox_offset"] == 352.0
    assert (h["scl_slope"], h["scl_inter"]) == (1.0, 0.0)
    assert h["datatype"] == 16 and h["bitpix"] == 32
    assert h["dim"][:5] == [4, 2, 2, 2, 3]


def test_write_matches_handcrafted_fixture(tmp_path, nifti_dir):
    # only optional fields may differ from the crafted bytes
    affine = np.diag([2.0, 2.0, 2.0, 1.0])
    affine[:3, 3] = [-10, 20, 30]
    write_volume(Volume4D(np.full((1, 1, 1, 1), 7.0), (2.0, 2.0, 2.0), 0.8, affine), tmp_path / "a.nii")
    ours = (tmp_path / "a.nii").read_bytes()
    golden = (nifti_dir / "one_voxel_le.nii").read_bytes()
    assert len(ours) == len(golden)
    differing = [i for i in range(len(ours)) if ours[i] != golden[i]]
    # dim[0] (rank 3 vs 4) and dim[4]; nothing else
    assert set(differing) <= {40, 41, 48, 49}


def test_byte_swapped_copy_of_written_file(tmp_path):
    rng = np.random.default_rng(1)
    vol = random_volume(rng, (3, 4, 5, 2))
    write_volume(vol, tmp_path / "le.nii")
    header, _ = parse_header((tmp_path / "le.nii").read_bytes())
    swapped = nifti_io._pack(header, ">") + b"\x00" * 4 + vol.data.astype(">f4").tobytes(order="F")
    (tmp_path / "be.nii").write_bytes(swapped)
    assert read_volume(tmp_path / "be.nii") == read_volume(tmp_path / "le.nii")


def test_v4d_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    vol = random_volume(rng, (4, 3, 2, 5), spacing=(1.5, 2.0, 2.5), tr=2.0)
    write_v4d(vol, tmp_path / "s.v4d")
    assert read_v4d(tmp_path / "s.v4d") == vol
    assert load_volume(tmp_path / "s.v4d") == vol
    assert (tmp_path / "s.f32").stat().st_size == vol.data.size * 4


def test_v4d_rejects_bad_sidecar(tmp_path):
    (tmp_path / "x.v4d").write_text("v4d 9\n")
    with pytest.raises(V4DFormatError):
        read_v4d(tmp_path / "x.v4d")


def test_load_volume_dispatches_nifti(nifti_dir):
    assert load_volume(nifti_dir / "one_voxel_le.nii.gz").data.item() == 7.0


def test_bad_magic_message_names_field(nifti_dir):
    with pytest.raises(BadMagicError, match="magic"):
        read_volume(nifti_dir / "bad_magic.nii")
