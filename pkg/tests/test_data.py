import itertools

import numpy as np
import pytest

from caim.data import (ChangeLabels, SceneConfig, SemanticSeries, TsiCube,
                       derive_change_labels, extract_patches,
                       generate_synthetic_scene, load_cube,
                       load_prediction_maps, save_cube, save_prediction_maps,
                       split_dataset)
from caim.errors import ConfigError, FormatError, GenerationError, ShapeError


def brute_force_moment(seq):
    """Independent oracle: scan for the last differing adjacent pair."""
    for i in range(len(seq) - 1, 0, -1):
        if seq[i] != seq[i - 1]:
            return i
    return 0


def as_series(seq):
    return np.asarray(seq, dtype=np.int32).reshape(len(seq), 1, 1)


class TestDeriveChangeLabels:
    def test_change_between_first_and_second_images_is_class_one(self):
        lab = derive_change_labels(as_series([0, 1, 1, 1]))
        assert lab.moment[0, 0] == 1
        assert lab.area[0, 0] == 1

    def test_last_change_wins(self):
        lab = derive_change_labels(as_series([0, 0, 1, 1]))
        assert lab.moment[0, 0] == 2
        lab = derive_change_labels(as_series([0, 1, 0, 0]))
        assert lab.moment[0, 0] == 2

    def test_constant_sequence_is_unchanged(self):
        lab = derive_change_labels(as_series([2, 2, 2, 2]))
        assert lab.moment[0, 0] == 0
        assert lab.area[0, 0] == 0

    def test_exhaustive_t4_k3_against_brute_force(self):
        seqs = list(itertools.product(range(3), repeat=4))
        assert len(seqs) == 81
        grid = np.asarray(seqs, dtype=np.int32).T.reshape(4, 81, 1)
        lab = derive_change_labels(grid)
        for j, seq in enumerate(seqs):
            assert lab.moment[j, 0] == brute_force_moment(seq), seq
        assert np.array_equal(lab.area != 0, lab.moment != 0)

    def test_accepts_semantic_series(self):
        lab = derive_change_labels(SemanticSeries(as_series([0, 1, 1])))
        assert lab.moment[0, 0] == 1

    def test_too_short_series_rejected(self):
        with pytest.raises(ShapeError):
            derive_change_labels(as_series([1]))


class TestSyntheticScene:
    def test_deterministic_for_fixed_seed(self):
        cfg = SceneConfig(seed=11)
        a = generate_synthetic_scene(cfg)
        b = generate_synthetic_scene(SceneConfig(seed=11))
        assert np.array_equal(a[0].images, b[0].images)
        assert np.array_equal(a[1].labels, b[1].labels)
        assert np.array_equal(a[2].moment, b[2].moment)

    def test_no_objects_means_no_change(self):
        _, _, labels = generate_synthetic_scene(SceneConfig(n_objects=0, seed=1))
        assert not labels.moment.any()
        assert not labels.area.any()

    def test_labels_match_derivation_oracle(self):
        for seed in range(4):
            _, series, labels = generate_synthetic_scene(SceneConfig(seed=seed))
            rederived = derive_change_labels(series)
            assert np.array_equal(labels.moment, rederived.moment)
            assert np.array_equal(labels.area, rederived.area)

    def test_label_consistency(self):
        _, _, labels = generate_synthetic_scene(SceneConfig(seed=5))
        assert np.array_equal(labels.area != 0, labels.moment != 0)

    def test_overcrowded_scene_raises(self):
        with pytest.raises(GenerationError):
            generate_synthetic_scene(
                SceneConfig(height=8, width=8, n_objects=50, seed=0))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SceneConfig(t_len=1)
        with pytest.raises(ConfigError):
            SceneConfig(height=4)
        with pytest.raises(ConfigError):
            SceneConfig(noise_std=-0.1)


class TestCubeStorage:
    def test_round_trip_bit_exact(self, tmp_path):
        cube, _, labels = generate_synthetic_scene(SceneConfig(seed=2))
        path = tmp_path / "scene.caim"
        save_cube(cube, labels, path)
        cube2, labels2 = load_cube(path)
        assert np.array_equal(cube.images, cube2.images)
        assert np.array_equal(labels.area, labels2.area)
        assert np.array_equal(labels.moment, labels2.moment)

    def test_round_trip_without_labels(self, tmp_path):
        cube, _, _ = generate_synthetic_scene(SceneConfig(seed=2))
        path = tmp_path / "scene.caim"
        save_cube(cube, None, path)
        cube2, labels2 = load_cube(path)
        assert labels2 is None
        assert np.array_equal(cube.images, cube2.images)

    def test_truncated_file_rejected(self, tmp_path):
        cube, _, labels = generate_synthetic_scene(SceneConfig(seed=2))
        path = tmp_path / "scene.caim"
        save_cube(cube, labels, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError):
            load_cube(path)

    def test_header_payload_size_mismatch_rejected(self, tmp_path):
        cube, _, labels = generate_synthetic_scene(SceneConfig(seed=2))
        path = tmp_path / "scene.caim"
        save_cube(cube, labels, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(FormatError):
            load_cube(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "scene.caim"
        cube, _, labels = generate_synthetic_scene(SceneConfig(seed=2))
        save_cube(cube, labels, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"WHAT"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_cube(path)

    def test_prediction_map_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        area = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        moment = rng.integers(0, 6, size=(16, 16)).astype(np.uint16)
        path = tmp_path / "pred.cmap"
        save_prediction_maps(area, moment, path)
        area2, moment2 = load_prediction_maps(path)
        assert np.array_equal(area, area2)
        assert np.array_equal(moment, moment2)


class TestPatches:
    def _scene(self, h, w, seed=0):
        return generate_synthetic_scene(
            SceneConfig(height=h, width=w, n_objects=4, seed=seed))

    def test_exact_tiling(self):
        cube, _, labels = self._scene(128, 128)
        patches = extract_patches(cube, labels, 64, 64)
        assert len(patches) == 4

    def test_identity_patch(self):
        cube, _, labels = self._scene(64, 64)
        patches = extract_patches(cube, labels, 64, 64)
        assert len(patches) == 1
        assert np.array_equal(patches[0][0].images, cube.images)
        assert np.array_equal(patches[0][1].moment, labels.moment)

    def test_overlapping_origins_enumerated(self):
        cube, _, labels = self._scene(96, 96)
        patches = extract_patches(cube, labels, 64, 32)
        # oracle: enumerate tile origins directly
        origins = [(y, x) for y in range(0, 96 - 64 + 1, 32)
                   for x in range(0, 96 - 64 + 1, 32)]
        assert len(patches) == len(origins) == 4
        for (sub, sub_lab), (y, x) in zip(patches, origins):
            assert np.array_equal(sub.images, cube.images[:, :, y:y + 64, x:x + 64])
            assert np.array_equal(sub_lab.area, labels.area[y:y + 64, x:x + 64])

    def test_oversized_patch_rejected(self):
        cube, _, labels = self._scene(64, 64)
        with pytest.raises(ConfigError):
            extract_patches(cube, labels, 65, 65)


class TestSplit:
    def test_ten_items(self):
        train, val, test = split_dataset(list(range(10)), seed=0)
        assert (len(train), len(val), len(test)) == (8, 1, 1)

    def test_three_items(self):
        train, val, test = split_dataset(list(range(3)), seed=0)
        assert (len(train), len(val), len(test)) == (1, 1, 1)

    def test_twelve_items_remainder_to_train(self):
        train, val, test = split_dataset(list(range(12)), seed=0)
        assert (len(train), len(val), len(test)) == (10, 1, 1)

    def test_disjoint_exhaustive_deterministic(self):
        items = list(range(37))
        a = split_dataset(items, seed=5)
        b = split_dataset(items, seed=5)
        assert a == b
        merged = sorted(a[0] + a[1] + a[2])
        assert merged == items

    def test_too_few_items_rejected(self):
        with pytest.raises(ConfigError):
            split_dataset([1, 2], seed=0)


class TestTypes:
    def test_cube_requires_two_steps(self):
        with pytest.raises(ShapeError):
            TsiCube(np.zeros((1, 2, 8, 8), dtype=np.float32))

    def test_cube_rejects_non_finite(self):
        img = np.zeros((2, 1, 8, 8), dtype=np.float32)
        img[0, 0, 0, 0] = np.nan
        with pytest.raises(ShapeError):
            TsiCube(img)

    def test_change_labels_consistency_enforced(self):
        area = np.ones((4, 4), dtype=np.uint8)
        moment = np.zeros((4, 4), dtype=np.uint16)
        with pytest.raises(ShapeError):
            ChangeLabels(area=area, moment=moment)
