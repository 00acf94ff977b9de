"""
Phantom generation, dataset I/O and the channel-stacking preprocessing
"""
import numpy as np
import pytest
from PIL import Image
from pydantic import ValidationError

from nearquery import phantom
from nearquery.config import MAX_FOREGROUND_FRACTION, OrganClass, PhantomSpec
from nearquery.exceptions import DatasetError, ShapeError
from nearquery.phantom import (
    MANIFEST_NAME,
    PhantomDataset,
    area_band,
    class_present,
    gen_phantom,
    gen_phantom_sample,
    load_manifest,
    model_input,
    preprocess_trick,
    presence_period,
    read_sample,
    write_sample,
)
from nearquery.numcore.tensor import no_grad
from tests.conftest import TINY_CLASSES


def _bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGeneration:
    def test_same_seed_same_bytes(self, tmp_path, tiny_spec):
        gen_phantom(tiny_spec, tmp_path / "a")
        gen_phantom(tiny_spec, tmp_path / "b")
        assert _bytes(tmp_path / "a") == _bytes(tmp_path / "b")

    def test_samples_do_not_depend_on_count(self, tiny_spec):
        short = gen_phantom_sample(tiny_spec.model_copy(update={"n": 1}), 1)
        full = gen_phantom_sample(tiny_spec, 1)
        np.testing.assert_array_equal(short.image, full.image)
        np.testing.assert_array_equal(short.label, full.label)

    def test_manifest_lists_every_sample(self, tiny_dataset, tiny_spec):
        manifest, root = load_manifest(tiny_dataset)
        assert [s.id for s in manifest.samples] == ["00000", "00001", "00002", "00003"]
        assert manifest.class_names == [c.name for c in tiny_spec.classes]
        assert manifest.class_tiers == ["mid", "small", "small"]
        assert (root / MANIFEST_NAME).is_file()

    def test_labels_and_areas(self):
        spec = PhantomSpec(image_size=128, n=8, seed=11)
        for i in range(spec.n):
            result = gen_phantom_sample(spec, i)
            assert result.image.shape == (1, 128, 128)
            assert result.image.dtype == np.float32
            assert 0.0 <= result.image.min() and result.image.max() <= 1.0
            assert result.label.max() <= len(spec.classes)
            assert (result.label > 0).mean() < MAX_FOREGROUND_FRACTION
            for c, organ in enumerate(spec.classes, start=1):
                area = int((result.label == c).sum())
                if area:
                    low, high = area_band(organ.tier)
                    assert low <= area <= high, (i, organ.name, area)

    def test_small_organs_are_small(self):
        low, high = area_band("small")
        assert high < 0.01 * 128 * 128
        assert low > 0

    def test_organ_pixels_carry_class_intensity(self, tiny_spec):
        result = gen_phantom_sample(tiny_spec.model_copy(update={"presence_prob": 1.0}), 0)
        for c, organ in enumerate(tiny_spec.classes, start=1):
            pixels = result.image[0][result.label == c]
            if pixels.size:
                assert abs(float(pixels.mean()) - organ.intensity_mean) < 0.05

    def test_previews_are_png(self, tmp_path, tiny_spec):
        gen_phantom(tiny_spec.model_copy(update={"n": 1}), tmp_path, previews=True)
        with Image.open(tmp_path / "previews" / "00000.png") as img:
            assert img.size == (128, 64)
            assert img.mode == "RGB"

    def test_image_size_must_divide_by_32(self):
        with pytest.raises(ValidationError):
            PhantomSpec(image_size=48)

    def test_default_classes_do_not_fit_small_images(self):
        with pytest.raises(ValidationError, match="foreground budget"):
            PhantomSpec(image_size=64)
        with pytest.raises(ValidationError, match="radius"):
            PhantomSpec(image_size=32, classes=[OrganClass(name="big", tier="large", intensity_mean=0.5)] + TINY_CLASSES[1:])


class TestPresence:
    def test_period(self):
        assert presence_period(1.0) is None
        assert presence_period(0.9) == 10
        assert presence_period(0.75) == 4
        assert presence_period(0.6) == 3

    @pytest.mark.parametrize("presence_prob", [0.6, 0.75, 0.9])
    @pytest.mark.parametrize("seed", [0, 3, 11])
    def test_every_class_meets_presence_rate(self, presence_prob, seed):
        spec = PhantomSpec(image_size=64, classes=TINY_CLASSES, n=23, seed=seed, presence_prob=presence_prob)
        present = np.array(
            [[(gen_phantom_sample(spec, i).label == c).any() for c in range(1, 4)] for i in range(spec.n)]
        )
        for n in (1, 2, 4, 7, 10, 23):
            counts = present[:n].sum(axis=0)
            assert (counts >= presence_prob * n - 1e-9).all(), (n, counts)
            assert (counts >= 0.6 * n).all()

    def test_schedule_matches_labels(self):
        spec = PhantomSpec(image_size=64, classes=TINY_CLASSES, n=12, seed=2, presence_prob=0.75)
        for i in range(spec.n):
            label = gen_phantom_sample(spec, i).label
            for c in range(3):
                assert (label == c + 1).any() == class_present(spec, i, c)

    def test_dataset_on_disk(self, tiny_dataset):
        manifest, root = load_manifest(tiny_dataset)
        labels = [read_sample(manifest, root, s.id).label for s in manifest.samples]
        for c in range(1, len(manifest.class_names) + 1):
            assert sum(bool((label == c).any()) for label in labels) >= 0.6 * len(labels)

    def test_failed_layout_is_retried(self, monkeypatch, tmp_path, tiny_spec):
        original = phantom._place_organ
        calls = {"n": 0}

        def first_fails(*args, **kwargs):
            calls["n"] += 1
            return None if calls["n"] == 1 else original(*args, **kwargs)

        monkeypatch.setattr(phantom, "_place_organ", first_fails)
        manifest = gen_phantom(tiny_spec.model_copy(update={"n": 1, "presence_prob": 1.0}), tmp_path)
        label = read_sample(manifest, tmp_path, "00000").label
        assert set(np.unique(label)) == {0, 1, 2, 3}
        assert manifest.notes == ["sample 00000: placed on layout 2"]

    def test_exhausted_layouts_raise(self, monkeypatch, tiny_spec):
        monkeypatch.setattr(phantom, "_place_organ", lambda *args, **kwargs: None)
        with pytest.raises(DatasetError, match="could not be placed in 3 layouts"):
            gen_phantom_sample(tiny_spec.model_copy(update={"max_layouts": 3}), 0)


class TestDatasetIO:
    def test_truncated_image_raises(self, tiny_dataset):
        manifest, root = load_manifest(tiny_dataset)
        path = root / manifest.samples[0].image_path
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DatasetError, match="expected"):
            read_sample(manifest, root, "00000")

    def test_missing_label_raises(self, tiny_dataset):
        manifest, root = load_manifest(tiny_dataset)
        (root / manifest.samples[1].label_path).unlink()
        with pytest.raises(DatasetError, match="missing"):
            read_sample(manifest, root, "00001")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_manifest(tmp_path)

    def test_unknown_sample_id(self, tiny_dataset):
        manifest, root = load_manifest(tiny_dataset)
        with pytest.raises(DatasetError):
            read_sample(manifest, root, "99999")

    def test_write_then_read(self, tmp_path, rng):
        image = rng.uniform(size=(1, 32, 32)).astype(np.float32)
        label = rng.integers(0, 4, size=(32, 32)).astype(np.uint8)
        entry = write_sample(tmp_path, "x", image, label)
        assert (tmp_path / entry.image_path).stat().st_size == 32 * 32 * 4

    def test_write_rejects_mismatched_label(self, tmp_path):
        with pytest.raises(ShapeError):
            write_sample(tmp_path, "x", np.zeros((1, 8, 8)), np.zeros((8, 4)))

    def test_dataset_yields_network_inputs(self, tiny_dataset):
        dataset = PhantomDataset(tiny_dataset)
        assert len(dataset) == 4
        image, label = dataset.load(0)
        assert image.shape == (3, 64, 64)
        assert label.shape == (64, 64)
        assert dataset.n_classes == 3

    def test_hflip_flips_image_and_label(self, tiny_dataset):
        dataset = PhantomDataset(tiny_dataset, preprocess=False)
        image, label = dataset.load(2)
        flipped_image, flipped_label = dataset.load(2, hflip=True)
        np.testing.assert_array_equal(flipped_label, label[:, ::-1])
        np.testing.assert_array_equal(flipped_image, image[..., ::-1])

    def test_subset_keeps_manifest(self, tiny_dataset):
        dataset = PhantomDataset(tiny_dataset)
        view = dataset.subset(["00003"])
        assert len(view) == 1
        assert view.sample(0).id == "00003"


class TestPreprocessTrick:
    def test_first_channel_is_original(self, rng):
        image = rng.uniform(size=(1, 32, 32)).astype(np.float32)
        with no_grad():
            out = preprocess_trick(image).data
        assert out.shape == (3, 32, 32)
        np.testing.assert_array_equal(out[0], image[0])

    def test_constant_image_stays_constant(self):
        with no_grad():
            out = preprocess_trick(np.full((1, 32, 32), 0.4, dtype=np.float32)).data
        np.testing.assert_allclose(out, 0.4, atol=1e-6)

    def test_views_differ_on_detail(self, rng):
        image = rng.uniform(size=(1, 32, 32)).astype(np.float32)
        with no_grad():
            out = preprocess_trick(image).data
        assert not np.allclose(out[1], out[2])

    def test_plain_input_repeats_channel(self, rng):
        image = rng.uniform(size=(1, 32, 32)).astype(np.float32)
        out = model_input(image, trick=False)
        np.testing.assert_array_equal(out, np.repeat(image, 3, axis=0))

    def test_rejects_multichannel(self):
        with pytest.raises(ShapeError):
            preprocess_trick(np.zeros((3, 8, 8), dtype=np.float32))
