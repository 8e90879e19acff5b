"""Tests for the synthetic corpus: netpbm I/O, generator contracts
(determinism, retention, subtlety), perturbations, and manifests.

The single-pixel file oracle is written out byte-for-byte so any change
to the header encoding fails loudly.
"""

import numpy as np
import pytest

from bolf.data import (
    FAMILIES,
    MANIFEST_COLUMNS,
    PERTURBATION_KINDS,
    DatasetSpec,
    FormatError,
    ImageSample,
    PerturbationSpec,
    build_dataset,
    gen_manipulated,
    gen_original,
    load_manifest,
    perturb,
    read_ppm,
    sample_filename,
    write_dataset,
    write_ppm,
)

SPEC32 = DatasetSpec()  # family A, 32x32, defaults


@pytest.fixture(scope="module")
def pair():
    orig = gen_original(SPEC32, "A-test-007", 2)
    return orig, gen_manipulated(orig, SPEC32)


@pytest.fixture(scope="module")
def image():
    return gen_original(SPEC32, "A-p-000", 0).pixels


class TestNetpbmIO:
    def test_single_white_pixel_file_bytes(self, tmp_path):
        """The canonical tiny file, frozen byte for byte."""
        path = tmp_path / "white.ppm"
        write_ppm(path, np.ones((1, 1, 3)))
        assert path.read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_single_black_pixel_pgm(self, tmp_path):
        path = tmp_path / "black.pgm"
        write_ppm(path, np.zeros((1, 1, 1)))
        assert path.read_bytes() == b"P5\n1 1\n255\n\x00"

    def test_roundtrip_grid_values_exactly(self, tmp_path):
        # pixels on the k/255 grid survive write -> read untouched
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
        path = tmp_path / "img.ppm"
        write_ppm(path, pixels)
        assert np.array_equal(read_ppm(path), pixels)

    def test_roundtrip_gray(self, tmp_path):
        pixels = np.linspace(0.0, 1.0, 16).reshape(4, 4, 1)
        path = tmp_path / "img.pgm"
        write_ppm(path, pixels)
        back = read_ppm(path)
        assert back.shape == (4, 4, 1)
        assert np.abs(back - pixels).max() <= 0.5 / 255.0 + 1e-12

    def test_out_of_range_values_are_clipped(self, tmp_path):
        path = tmp_path / "img.pgm"
        write_ppm(path, np.array([[[-0.5], [1.5]]]))
        assert np.array_equal(read_ppm(path).reshape(-1), [0.0, 1.0])

    def test_write_rejects_bad_shapes(self, tmp_path):
        with pytest.raises(FormatError):
            write_ppm(tmp_path / "x", np.zeros((4, 4)))
        with pytest.raises(FormatError):
            write_ppm(tmp_path / "x", np.zeros((4, 4, 2)))

    def test_header_comments_are_skipped(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n# another\n255\n" + bytes(6))
        assert read_ppm(path).shape == (1, 2, 3)

    @pytest.mark.parametrize("blob", [
        b"P3\n1 1\n255\n1 2 3\n",          # ascii variant
        b"P2\n1 1\n255\n7\n",              # ascii gray
        b"P7\n1 1\n255\n" + bytes(3),      # unknown magic
        b"P6\n1 1\n65535\n" + bytes(6),    # wide maxval
        b"P6\n1 1\n255\n\xff",             # truncated payload
        b"P6\n0 1\n255\n",                 # zero dimension
        b"P6\nab cd\n255\n" + bytes(3),    # non-numeric header
        b"P6",                             # nothing after magic
    ])
    def test_malformed_files_rejected(self, tmp_path, blob):
        path = tmp_path / "bad"
        path.write_bytes(blob)
        with pytest.raises(FormatError):
            read_ppm(path)


class TestOriginals:
    def test_regeneration_is_bit_identical(self):
        a = gen_original(SPEC32, "A-test-000", 3)
        b = gen_original(SPEC32, "A-test-000", 3)
        assert np.array_equal(a.pixels, b.pixels)

    def test_basic_contract(self):
        s = gen_original(SPEC32, "vid", 0)
        assert s.pixels.shape == (32, 32, 1)
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0
        assert s.label == 0
        assert s.tamper_mask is None
        assert s.family == "A"

    def test_frames_of_one_video_differ_but_share_base(self):
        f0 = gen_original(SPEC32, "vid", 0).pixels
        f1 = gen_original(SPEC32, "vid", 1).pixels
        assert not np.array_equal(f0, f1)
        # jitter is faint, so frames stay close
        assert np.abs(f0 - f1).mean() < 0.05

    def test_videos_differ(self):
        a = gen_original(SPEC32, "vid-a", 0).pixels
        b = gen_original(SPEC32, "vid-b", 0).pixels
        assert np.abs(a - b).mean() > 1e-4

    def test_families_differ(self):
        spec_b = DatasetSpec(family="B")
        a = gen_original(SPEC32, "vid", 0).pixels
        b = gen_original(spec_b, "vid", 0).pixels
        assert not np.array_equal(a, b)

    def test_three_channel_support(self):
        spec = DatasetSpec(channels=3)
        s = gen_original(spec, "vid", 0)
        assert s.pixels.shape == (32, 32, 3)

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            DatasetSpec(family="C")


class TestManipulated:
    def test_labels_and_ids(self, pair):
        orig, fake = pair
        assert fake.label == 1
        assert fake.video_id == orig.video_id + "-f"
        assert fake.frame_idx == orig.frame_idx
        assert fake.family == orig.family

    def test_mask_present_and_boolean(self, pair):
        _, fake = pair
        assert fake.tamper_mask is not None
        assert fake.tamper_mask.dtype == bool
        assert fake.tamper_mask.shape == (32, 32)

    def test_mask_area_fraction_in_band(self):
        for vid in range(6):
            orig = gen_original(SPEC32, f"A-x-{vid:03d}", 0)
            fake = gen_manipulated(orig, SPEC32)
            frac = fake.tamper_mask.mean()
            assert 0.02 <= frac <= 0.15, f"video {vid}: {frac}"

    def test_retention_outside_mask(self, pair):
        """Fake pixels off the tamper region are the original's, bitwise."""
        orig, fake = pair
        outside = ~fake.tamper_mask
        assert np.array_equal(fake.pixels[outside], orig.pixels[outside])

    def test_tamper_actually_changes_region(self, pair):
        orig, fake = pair
        inside = fake.tamper_mask
        assert np.abs(fake.pixels[inside] - orig.pixels[inside]).max() > 1e-3

    def test_subtlety_global_mean_change(self):
        for vid in range(6):
            orig = gen_original(SPEC32, f"A-y-{vid:03d}", 0)
            fake = gen_manipulated(orig, SPEC32)
            assert np.abs(fake.pixels - orig.pixels).mean() < 0.05

    def test_manipulation_shared_across_frames(self):
        # one tamper drawn per source video: both frames get the same mask
        f0 = gen_manipulated(gen_original(SPEC32, "A-z-000", 0), SPEC32)
        f1 = gen_manipulated(gen_original(SPEC32, "A-z-000", 1), SPEC32)
        assert np.array_equal(f0.tamper_mask, f1.tamper_mask)

    def test_deterministic(self):
        orig = gen_original(SPEC32, "A-q-000", 0)
        a = gen_manipulated(orig, SPEC32)
        b = gen_manipulated(orig, SPEC32)
        assert np.array_equal(a.pixels, b.pixels)

    def test_rejects_already_fake_input(self, pair):
        _, fake = pair
        with pytest.raises(ValueError):
            gen_manipulated(fake, SPEC32)

    def test_pixels_stay_in_unit_range(self, pair):
        _, fake = pair
        assert fake.pixels.min() >= 0.0 and fake.pixels.max() <= 1.0


class TestPerturb:
    def test_level_zero_is_identity_copy(self, image):
        out = perturb(image, PerturbationSpec("gaussian_noise", 0), seed=1)
        assert np.array_equal(out, image)
        assert out is not image

    def test_deterministic_per_seed(self, image):
        spec = PerturbationSpec("gaussian_noise", 3)
        a = perturb(image, spec, seed=5)
        b = perturb(image, spec, seed=5)
        c = perturb(image, spec, seed=6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("kind", PERTURBATION_KINDS)
    def test_each_kind_changes_the_image(self, image, kind):
        out = perturb(image, PerturbationSpec(kind, 3), seed=2)
        assert out.shape == image.shape
        assert not np.array_equal(out, image)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_brightness_shift_magnitude(self):
        flat = np.full((8, 8, 1), 0.5)
        out = perturb(flat, PerturbationSpec("brightness_shift", 3), seed=0)
        # +-0.05 per level; mid-gray never clips at level 3
        assert abs(abs(out.mean() - 0.5) - 0.15) < 1e-12

    def test_blur_preserves_constant_image(self):
        flat = np.full((8, 8, 1), 0.5)
        out = perturb(flat, PerturbationSpec("gaussian_blur", 2), seed=0)
        assert np.allclose(out, 0.5, atol=1e-12)

    def test_block_quantize_preserves_constant_image(self):
        flat = np.full((12, 12, 1), 0.5)
        out = perturb(flat, PerturbationSpec("block_quantize", 3), seed=0)
        assert np.array_equal(out, flat)

    def test_block_quantize_flattens_blocks(self, image):
        out = perturb(image, PerturbationSpec("block_quantize", 1), seed=0)
        # every 2x2 tile collapses to a single value
        assert np.array_equal(out[0::2, 0::2], out[1::2, 0::2])
        assert np.array_equal(out[0::2, 0::2], out[0::2, 1::2])

    def test_higher_levels_distort_more(self, image):
        d1 = np.abs(perturb(image, PerturbationSpec("gaussian_noise", 1), 3) - image).mean()
        d5 = np.abs(perturb(image, PerturbationSpec("gaussian_noise", 5), 3) - image).mean()
        assert d5 > d1

    def test_random_level_is_deterministic(self, image):
        spec = PerturbationSpec("gaussian_blur", "random")
        a = perturb(image, spec, seed=9)
        b = perturb(image, spec, seed=9)
        assert np.array_equal(a, b)

    def test_mix_composes_multiple_kinds(self, image):
        spec = PerturbationSpec("mix", 2, mix_count=3)
        a = perturb(image, spec, seed=4)
        b = perturb(image, spec, seed=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, image)

    def test_validation(self):
        with pytest.raises(ValueError):
            PerturbationSpec("sepia", 1)
        with pytest.raises(ValueError):
            PerturbationSpec("gaussian_noise", 6)
        with pytest.raises(ValueError):
            PerturbationSpec("gaussian_noise", -1)
        with pytest.raises(ValueError):
            PerturbationSpec("mix", 1, mix_count=5)
        # mix ignores the kind label, any level 0..5 or "random" is fine
        PerturbationSpec("mix", "random", mix_count=2)


class TestDatasetAssembly:
    def test_split_sizes_and_balance(self, tiny_splits, tiny_spec):
        assert len(tiny_splits.train) == tiny_spec.train_count
        assert len(tiny_splits.val) == tiny_spec.val_count
        assert len(tiny_splits.test) == tiny_spec.test_count
        for name in ("train", "val", "test"):
            samples = tiny_splits.split(name)
            labels = [s.label for s in samples]
            assert labels.count(0) == labels.count(1)

    def test_every_fake_has_its_original(self, tiny_splits):
        for name in ("train", "val", "test"):
            samples = tiny_splits.split(name)
            originals = {(s.video_id, s.frame_idx) for s in samples if s.label == 0}
            for s in samples:
                if s.label == 1:
                    assert s.video_id.endswith("-f")
                    assert (s.video_id[:-2], s.frame_idx) in originals

    def test_videos_do_not_cross_splits(self, tiny_splits):
        seen = {}
        for name in ("train", "val", "test"):
            for s in tiny_splits.split(name):
                base = s.video_id[:-2] if s.video_id.endswith("-f") else s.video_id
                assert seen.setdefault(base, name) == name

    def test_frames_per_video_respected(self):
        spec = DatasetSpec(train_count=12, val_count=2, test_count=2,
                           frames_per_video=3, height=16, width=16)
        splits = build_dataset(spec)
        per_video = {}
        for s in splits.train:
            if s.label == 0:
                per_video.setdefault(s.video_id, set()).add(s.frame_idx)
        assert len(per_video) == 2  # 6 originals over videos of 3 frames
        assert all(frames == {0, 1, 2} for frames in per_video.values())

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DatasetSpec(train_count=7)  # odd
        with pytest.raises(ValueError):
            DatasetSpec(val_count=0)
        with pytest.raises(ValueError):
            DatasetSpec(frames_per_video=0)
        with pytest.raises(ValueError):
            DatasetSpec(channels=2)

    def test_split_accessor_rejects_unknown(self, tiny_splits):
        with pytest.raises(ValueError):
            tiny_splits.split("holdout")


class TestManifest:
    def test_roundtrip(self, tiny_splits, tiny_spec, tmp_path):
        manifest = write_dataset(tiny_splits, tmp_path / "corpus")
        assert manifest.name == "manifest.csv"
        loaded = load_manifest(manifest)
        for name in ("train", "val", "test"):
            saved = tiny_splits.split(name)
            back = loaded.split(name)
            assert len(back) == len(saved)
            for s, b in zip(saved, back):
                assert (b.label, b.video_id, b.frame_idx, b.family) == \
                       (s.label, s.video_id, s.frame_idx, s.family)
                assert b.tamper_mask is None  # masks are not persisted
                assert np.abs(b.pixels - s.pixels).max() <= 0.5 / 255.0 + 1e-12
        assert loaded.spec.height == tiny_spec.height

    def test_rewrite_is_byte_identical(self, tiny_splits, tmp_path):
        first = write_dataset(tiny_splits, tmp_path / "c")
        blob = first.read_bytes()
        sample = tiny_splits.train[0]
        img = first.parent / "images" / "train" / sample_filename(sample, 1)
        img_blob = img.read_bytes()
        second = write_dataset(tiny_splits, tmp_path / "c")
        assert second.read_bytes() == blob
        assert img.read_bytes() == img_blob

    def test_header_is_the_column_tuple(self, tiny_splits, tmp_path):
        manifest = write_dataset(tiny_splits, tmp_path / "c")
        header = manifest.read_text().splitlines()[0]
        assert header == ",".join(MANIFEST_COLUMNS)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "nope" / "manifest.csv")

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_header_only_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text(",".join(MANIFEST_COLUMNS) + "\n")
        with pytest.raises(FormatError):
            load_manifest(path)

    def _write_row(self, tmp_path, row):
        path = tmp_path / "manifest.csv"
        path.write_text(",".join(MANIFEST_COLUMNS) + "\n" + row + "\n")
        return path

    def test_bad_label_rejected(self, tmp_path, tiny_splits):
        write_dataset(tiny_splits, tmp_path)
        rel = f"images/train/{sample_filename(tiny_splits.train[0], 1)}"
        path = self._write_row(tmp_path, f"{rel},2,v,0,A,train")
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_bad_split_rejected(self, tmp_path, tiny_splits):
        write_dataset(tiny_splits, tmp_path)
        rel = f"images/train/{sample_filename(tiny_splits.train[0], 1)}"
        path = self._write_row(tmp_path, f"{rel},0,v,0,A,holdout")
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_short_row_rejected(self, tmp_path):
        path = self._write_row(tmp_path, "x,0,v,0,A")
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_missing_image_file_rejected(self, tmp_path):
        path = self._write_row(tmp_path, "images/train/ghost.pgm,0,v,0,A,train")
        with pytest.raises((FormatError, OSError)):
            load_manifest(path)
