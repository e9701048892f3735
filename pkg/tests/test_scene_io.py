import numpy as np
import pytest

from scenegrid.scene_io import (PointCloud, SceneSample, SceneParseError, ManifestError,
                                load_scene, save_scene, load_manifest, quantize_positions)
from scenegrid.synth import SynthConfig, generate_scene, generate_synthetic_dataset
from scenegrid.taxonomy import DEFAULT_TAXONOMY as TAX


def random_cloud(rng, n, with_colour=True, with_labels=True):
    return PointCloud(
        positions=quantize_positions(rng.uniform(-5, 5, size=(n, 3))),
        colours=rng.integers(0, 256, size=(n, 3)) if with_colour else None,
        semantic_labels=rng.integers(0, TAX.num_object_classes, size=n) if with_labels else None,
    )


def assert_clouds_equal(a, b):
    np.testing.assert_array_equal(a.positions, b.positions)
    if a.colours is None:
        assert b.colours is None
    else:
        np.testing.assert_array_equal(a.colours, b.colours)
    if a.semantic_labels is None:
        assert b.semantic_labels is None
    else:
        np.testing.assert_array_equal(a.semantic_labels, b.semantic_labels)


class TestParse:
    def test_three_row_file(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text(
            "scene bathroom\n"
            "columns x y z\n"
            "0.000000 0.000000 0.000000\n"
            "1.000000 0.500000 0.250000\n"
            "2.000000 1.000000 0.500000\n")
        sample = load_scene(path)
        assert len(sample.cloud) == 3
        assert sample.scene_label == TAX.scene_id("bathroom")
        assert sample.cloud.colours is None

    def test_colour_out_of_range_cites_line(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text(
            "scene kitchen\n"
            "columns x y z r g b\n"
            "0.000000 0.000000 0.000000 10 10 10\n"
            "# comment line\n"
            "1.000000 0.000000 0.000000 300 10 10\n")
        with pytest.raises(SceneParseError, match="line 5"):
            load_scene(path)

    def test_unknown_scene_name(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("scene spaceship\ncolumns x y z\n0.0 0.0 0.0\n")
        with pytest.raises(SceneParseError, match="spaceship"):
            load_scene(path)

    def test_non_numeric_row_cites_line(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("scene office\ncolumns x y z\n0.0 oops 0.0\n")
        with pytest.raises(SceneParseError, match="line 3"):
            load_scene(path)

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "s.txt"
        path.write_text("scene office\ncolumns x y z\n0.0 0.0\n")
        with pytest.raises(SceneParseError, match="line 3"):
            load_scene(path)


class TestRoundTrip:
    def test_single_point(self, tmp_path):
        cloud = PointCloud(positions=np.array([[0.125, -3.0, 7.5]]),
                           colours=np.array([[1, 2, 3]]),
                           semantic_labels=np.array([4]))
        sample = SceneSample(cloud=cloud, scene_label=2, scene_id="one")
        save_scene(sample, tmp_path / "one.txt")
        back = load_scene(tmp_path / "one.txt")
        assert back.scene_label == 2
        assert_clouds_equal(cloud, back.cloud)

    def test_without_colours_omits_columns(self, tmp_path):
        cloud = PointCloud(positions=np.array([[0.0, 0.0, 0.0]]))
        save_scene(SceneSample(cloud, 0, "x"), tmp_path / "x.txt")
        header = (tmp_path / "x.txt").read_text().splitlines()[1]
        assert header == "columns x y z"
        assert load_scene(tmp_path / "x.txt").cloud.colours is None

    def test_randomized_round_trips(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(10):
            cloud = random_cloud(rng, 1000, with_colour=i % 2 == 0, with_labels=i % 3 != 0)
            sample = SceneSample(cloud, int(rng.integers(21)), f"c{i}")
            save_scene(sample, tmp_path / f"c{i}.txt")
            back = load_scene(tmp_path / f"c{i}.txt")
            assert back.scene_label == sample.scene_label
            assert_clouds_equal(cloud, back.cloud)


class TestValidation:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            PointCloud(positions=np.zeros((3, 3)), colours=np.zeros((2, 3)))

    def test_empty_cloud(self):
        with pytest.raises(ValueError):
            PointCloud(positions=np.zeros((0, 3)))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud(positions=np.array([[np.nan, 0, 0]]))


class TestGenerator:
    def test_same_seed_is_byte_identical(self, tmp_path):
        cfg = SynthConfig(scenes_per_class=1, points_per_scene=(200, 240), seed=3)
        generate_synthetic_dataset(cfg, tmp_path / "a")
        generate_synthetic_dataset(cfg, tmp_path / "b")
        files_a = sorted((tmp_path / "a").rglob("*.*"))
        files_b = sorted((tmp_path / "b").rglob("*.*"))
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes(), fa.name

    def test_manifest_counts(self, tmp_path):
        cfg = SynthConfig(scenes_per_class=5, points_per_scene=(150, 160),
                          val_fraction=0.2, seed=1)
        manifest = generate_synthetic_dataset(cfg, tmp_path / "d")
        total = sum(len(v) for v in manifest.splits.values())
        assert total == 5 * 21
        assert len(manifest.splits["train"]) == 4 * 21
        assert len(manifest.splits["val"]) == 21
        reloaded = load_manifest(tmp_path / "d" / "manifest.yaml")
        assert reloaded.splits == manifest.splits

    def test_marker_objects_present(self):
        cfg = SynthConfig(scenes_per_class=3, points_per_scene=(500, 600), seed=11)
        bed = TAX.object_id("bed")
        bathtub = TAX.object_id("bathtub")
        for i in range(3):
            assert bed in generate_scene("bedroom", i, cfg).cloud.semantic_labels
            assert bathtub in generate_scene("bathroom", i, cfg).cloud.semantic_labels

    def test_label_histograms_non_degenerate(self):
        cfg = SynthConfig(scenes_per_class=1, points_per_scene=(300, 350), seed=5)
        for name in TAX.scene_classes:
            sample = generate_scene(name, 0, cfg)
            assert len(np.unique(sample.cloud.semantic_labels)) >= 2, name

    def test_round_trip_of_generated_scene(self, tmp_path):
        cfg = SynthConfig(scenes_per_class=1, points_per_scene=(400, 450), seed=9)
        sample = generate_scene("library", 0, cfg)
        save_scene(sample, tmp_path / "lib.txt")
        back = load_scene(tmp_path / "lib.txt")
        assert_clouds_equal(sample.cloud, back.cloud)

    def test_duplicate_path_rejected(self):
        with pytest.raises(ManifestError):
            from scenegrid.scene_io import DatasetManifest
            DatasetManifest(splits={"train": ["a.txt"], "val": ["a.txt"]}, taxonomy=TAX)
