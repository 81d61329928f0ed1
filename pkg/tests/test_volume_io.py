import os

import numpy as np
import pytest

from patchgraph.nifti import NiftiError
from patchgraph.volume_io import (
    PhantomSpec,
    Volume,
    generate_phantom,
    load_labels,
    load_volume,
    normalize_volume,
    save_volume,
)

from conftest import atlas_spec


def random_volume(rng, shape=(12, 10, 8)):
    return Volume(
        rng.normal(size=shape).astype(np.float32),
        spacing=np.array([0.5, 0.5, 0.8], dtype=np.float32),
        origin=np.array([-4.0, 2.0, 1.5], dtype=np.float32),
    )


class TestVolumeRoundTrip:
    def test_save_load_identity(self, tmp_path, rng):
        vol = random_volume(rng)
        save_volume(vol, tmp_path / "v.nii.gz")
        back = load_volume(tmp_path / "v.nii.gz")
        np.testing.assert_array_equal(back.data, vol.data)
        np.testing.assert_array_equal(back.spacing, vol.spacing)
        np.testing.assert_array_equal(back.origin, vol.origin)

    def test_uncompressed_nii(self, tmp_path, rng):
        vol = random_volume(rng)
        save_volume(vol, tmp_path / "v.nii")
        back = load_volume(tmp_path / "v.nii")
        np.testing.assert_array_equal(back.data, vol.data)

    def test_spacing_bit_exact(self, tmp_path, rng):
        vol = random_volume(rng)
        save_volume(vol, tmp_path / "v.nii.gz")
        back = load_volume(tmp_path / "v.nii.gz")
        assert back.spacing.tobytes() == np.asarray([0.5, 0.5, 0.8], np.float32).tobytes()

    def test_cube_shape(self, tmp_path, rng):
        vol = Volume(rng.normal(size=(64, 64, 64)).astype(np.float32))
        save_volume(vol, tmp_path / "v.nii.gz")
        assert load_volume(tmp_path / "v.nii.gz").shape == (64, 64, 64)

    def test_overwrite_replaces(self, tmp_path, rng):
        a, b = random_volume(rng), random_volume(rng)
        save_volume(a, tmp_path / "v.nii.gz")
        save_volume(b, tmp_path / "v.nii.gz")
        np.testing.assert_array_equal(load_volume(tmp_path / "v.nii.gz").data, b.data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "nope.nii.gz")

    def test_non_3d_rejected(self, tmp_path):
        import struct

        from patchgraph import nifti

        # craft a 2D header by hand
        vol = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        save_volume(vol, tmp_path / "v.nii")
        raw = bytearray((tmp_path / "v.nii").read_bytes())
        struct.pack_into("<8h", raw, 40, 2, 4, 4, 1, 1, 1, 1, 1)
        (tmp_path / "bad.nii").write_bytes(bytes(raw))
        with pytest.raises(NiftiError, match="non-3D"):
            load_volume(tmp_path / "bad.nii")

    def test_malformed_header(self, tmp_path):
        (tmp_path / "junk.nii").write_bytes(b"\x00" * 500)
        with pytest.raises(NiftiError):
            load_volume(tmp_path / "junk.nii")

    def test_unwritable_destination(self, tmp_path, rng):
        # chmod is no barrier when tests run as root; a missing parent
        # directory is the portable unwritable-path case
        with pytest.raises(OSError):
            save_volume(random_volume(rng), tmp_path / "no_such_dir" / "v.nii")

    def test_invalid_spacing_rejected(self):
        with pytest.raises(ValueError, match="spacing"):
            Volume(np.zeros((2, 2, 2)), spacing=[1.0, 0.0, 1.0])


class TestLabels:
    def test_integer_categories(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,GOLD\na,0\nb,2\nc,4\n")
        labels = load_labels(path)
        assert len(labels) == 3
        assert labels["b"]["GOLD"] == 2
        assert all(isinstance(v["GOLD"], int) for v in labels.values())

    def test_float_column(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,fev1\na,71.5\nb,88\n")
        labels = load_labels(path)
        assert labels["a"]["fev1"] == pytest.approx(71.5)
        assert isinstance(labels["b"]["fev1"], float)

    def test_string_category(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,site\na,UPMC\nb,MGH\n")
        assert load_labels(path)["a"]["site"] == "UPMC"

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,x\na,1\na,2\n")
        with pytest.raises(ValueError, match="duplicate"):
            load_labels(path)

    def test_missing_id_column_rejected(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("id,x\na,1\n")
        with pytest.raises(ValueError, match="subject_id"):
            load_labels(path)

    def test_empty_cell_is_missing_not_zero(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("subject_id,x\na,\nb,3\n")
        labels = load_labels(path)
        assert labels["a"]["x"] is None
        assert labels["b"]["x"] == 3


class TestPhantom:
    def test_deterministic(self):
        spec = PhantomSpec(n_regions_affected=3, seed=7)
        a, b = generate_phantom(spec), generate_phantom(spec)
        np.testing.assert_array_equal(a.volume.data, b.volume.data)
        np.testing.assert_array_equal(a.mask.data, b.mask.data)
        assert a.labels == b.labels

    def test_healthy_class(self):
        rec = generate_phantom(PhantomSpec(n_regions_affected=0, seed=1))
        assert rec.labels["severity"] == 0
        assert rec.labels["burden"] == 0.0
        assert sum(v for k, v in rec.labels.items() if k.startswith("lesion_")) == 0

    def test_severity_rules(self):
        assert generate_phantom(PhantomSpec(n_regions_affected=2, seed=1)).labels["severity"] == 1
        graded = PhantomSpec(n_regions_affected=5, seed=1, severity_rule="count:1,4")
        assert generate_phantom(graded).labels["severity"] == 2

    def test_too_many_regions_rejected(self):
        with pytest.raises(ValueError, match="n_regions_affected"):
            PhantomSpec(n_regions_affected=28, lattice_shape=(3, 3, 3))

    def test_lesion_delta_oracle(self):
        # same seed => identical geometry/noise draws; the image difference is
        # exactly the warped lesion spheres scaled by gain (disabled here)
        delta = 0.5
        kwargs = dict(seed=11, lesion_intensity_delta=delta, gain_jitter=0.0, noise_sigma=0.0)
        diseased = generate_phantom(PhantomSpec(n_regions_affected=4, **kwargs))
        healthy = generate_phantom(PhantomSpec(n_regions_affected=0, **kwargs))
        diff = diseased.volume.data.astype(np.float64) - healthy.volume.data
        # trilinear warp keeps lesion interiors at exactly delta; only the
        # boundary shell interpolates between 0 and delta
        assert diff.max() == pytest.approx(delta, rel=1e-5)
        core = diff[diff > 0.95 * delta]
        assert core.size > 100
        assert np.mean(core) == pytest.approx(delta, rel=0.02)

    def test_mask_alignment(self):
        rec = generate_phantom(PhantomSpec(n_regions_affected=0, seed=3))
        inside = rec.volume.data[rec.mask.data > 0].mean()
        outside = rec.volume.data[rec.mask.data == 0].mean()
        assert inside > outside + 0.3

    def test_signal_recoverable_from_indicators(self):
        # sanity for the acceptance design: indicators determine severity
        from patchgraph.volume_io import severity_from_rule

        for n in range(10):
            assert severity_from_rule("presence", n) == int(n > 0)


class TestNormalize:
    def test_zscore(self, rng):
        vol = random_volume(rng)
        out = normalize_volume(vol, "zscore")
        assert out.data.mean() == pytest.approx(0.0, abs=1e-5)
        assert out.data.std() == pytest.approx(1.0, rel=1e-4)
        np.testing.assert_array_equal(out.spacing, vol.spacing)

    def test_none_copies(self, rng):
        vol = random_volume(rng)
        out = normalize_volume(vol, "none")
        np.testing.assert_array_equal(out.data, vol.data)
        out.data[0, 0, 0] = 99
        assert vol.data[0, 0, 0] != 99

    def test_unknown_method(self, rng):
        with pytest.raises(ValueError, match="unknown"):
            normalize_volume(random_volume(rng), "minmax")


def test_atlas_template_is_pure_function():
    a = generate_phantom(atlas_spec())
    b = generate_phantom(atlas_spec())
    np.testing.assert_array_equal(a.volume.data, b.volume.data)
