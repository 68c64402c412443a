import math
import struct

import numpy as np
import pytest

from milexplain.data import (
    BadMagicError,
    DatasetManifest,
    DimensionMismatchError,
    ManifestEntry,
    PlantedConfig,
    SlideBag,
    TruncatedFileError,
    UnsupportedVersionError,
    generate_synthetic,
    load_bag,
    pick_planted_features,
    save_bag,
    split_train_test,
    synthesize_bags,
)


def small_bag(rng, T=5, P=3, slide_id="s0"):
    labels = np.array([1, -1, 0, 0, 1][:T], dtype=np.int32)
    coords = np.stack([np.arange(T) % 3, np.arange(T) // 3], axis=1)
    return SlideBag(slide_id, rng.normal(size=(T, P)), coords, 1, labels)


class TestKbag:
    def test_round_trip(self, tmp_path, rng):
        bag = small_bag(rng)
        save_bag(bag, tmp_path / "s0.kbag")
        back = load_bag(tmp_path / "s0.kbag")
        assert back == bag
        assert back.tile_labels.tolist() == [1, -1, 0, 0, 1]

    def test_unknown_slide_label(self, tmp_path, rng):
        bag = SlideBag("x", rng.normal(size=(2, 2)), np.zeros((2, 2)))
        save_bag(bag, tmp_path / "x.kbag")
        back = load_bag(tmp_path / "x.kbag")
        assert back.slide_label == -1 and back.tile_labels.tolist() == [-1, -1]

    def test_layout(self, tmp_path, rng):
        bag = small_bag(rng, T=2, P=3)
        save_bag(bag, tmp_path / "b.kbag")
        raw = (tmp_path / "b.kbag").read_bytes()
        assert raw[:4] == b"KBAG"
        assert struct.unpack_from("<IIIi", raw, 4) == (1, 2, 3, 1)
        assert struct.unpack_from("<iff", raw, 20) == (1, 0.0, 0.0)
        assert len(raw) == 20 + 2 * 12 + 2 * 3 * 8
        np.testing.assert_array_equal(np.frombuffer(raw[44:], "<f8").reshape(2, 3), bag.tiles)

    def test_bad_magic(self, tmp_path, rng):
        path = tmp_path / "b.kbag"
        save_bag(small_bag(rng), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"KBAX"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_bag(path)

    def test_truncated(self, tmp_path, rng):
        path = tmp_path / "b.kbag"
        save_bag(small_bag(rng), path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 8, 6)  # claim one more tile than stored
        path.write_bytes(bytes(raw))
        with pytest.raises(TruncatedFileError):
            load_bag(path)
        path.write_bytes(b"KBAG\x01\x00")
        with pytest.raises(TruncatedFileError):
            load_bag(path)

    def test_dimension_mismatch(self, tmp_path, rng):
        path = tmp_path / "b.kbag"
        save_bag(small_bag(rng), path)
        with pytest.raises(DimensionMismatchError):
            load_bag(path, expected_dim=4)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(DimensionMismatchError):
            load_bag(path)

    def test_bad_version(self, tmp_path, rng):
        path = tmp_path / "b.kbag"
        save_bag(small_bag(rng), path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_bag(path)

    def test_errors_are_distinct(self):
        assert len({BadMagicError, TruncatedFileError, DimensionMismatchError}) == 3
        assert not issubclass(BadMagicError, TruncatedFileError)


class TestGenerator:
    def test_full_positive_fraction(self):
        bags = synthesize_bags(PlantedConfig(n_slides=2, tiles_per_slide=9, dim=4, planted_features=(1,), pos_tile_fraction=1.0))
        pos = [b for b in bags if b.slide_label == 1]
        neg = [b for b in bags if b.slide_label == 0]
        assert len(pos) == len(neg) == 1
        assert pos[0].tile_labels.tolist() == [1] * 9
        assert neg[0].tile_labels.tolist() == [0] * 9

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = PlantedConfig(n_slides=6, tiles_per_slide=10, dim=5, planted_features=(0, 3), seed=7)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len(files) == 7
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_planted_shift_recovered(self):
        cfg = PlantedConfig(n_slides=40, tiles_per_slide=50, dim=6, planted_features=(2, 4), pos_tile_fraction=0.2, signal_shift=1.5, noise_sigma=0.8, seed=3)
        bags = synthesize_bags(cfg)
        X = np.concatenate([b.tiles for b in bags])
        y = np.concatenate([b.tile_labels for b in bags])
        n_pos = int((y == 1).sum())
        for k in cfg.planted_features:
            diff = X[y == 1, k].mean() - X[y == 0, k].mean()
            assert abs(diff - cfg.signal_shift) < 3 * cfg.noise_sigma / math.sqrt(n_pos)
        # an unplanted feature carries no shift
        assert abs(X[y == 1, 0].mean() - X[y == 0, 0].mean()) < 3 * cfg.noise_sigma / math.sqrt(n_pos)

    def test_mil_contract(self):
        cfg = PlantedConfig(n_slides=10, tiles_per_slide=20, dim=4, planted_features=(0,), pos_tile_fraction=0.01)
        for b in synthesize_bags(cfg):
            if b.slide_label == 1:
                assert (b.tile_labels == 1).sum() == 1  # ceil(0.01 * 20)
            else:
                assert (b.tile_labels == 1).sum() == 0

    def test_zero_shift_is_a_null_control(self):
        cfg = PlantedConfig(n_slides=4, tiles_per_slide=8, dim=3, planted_features=(1,), signal_shift=0.0, seed=5)
        a = synthesize_bags(cfg)
        shifted = synthesize_bags(PlantedConfig(**{**cfg.__dict__, "signal_shift": 2.0}))
        for x, y in zip(a, shifted):
            # same draws, so tiles differ exactly by the (absent) shift
            np.testing.assert_allclose(y.tiles - x.tiles, 2.0 * np.outer(y.tile_labels == 1, [0, 1, 0]))

    @pytest.mark.parametrize(
        "change",
        [
            {"pos_tile_fraction": 0.0},
            {"pos_tile_fraction": 1.5},
            {"planted_features": ()},
            {"planted_features": (10,)},
            {"signal_shift": -1.0},
            {"noise_sigma": 0.0},
            {"n_slides": 1},
        ],
    )
    def test_invalid_configs(self, change):
        cfg = PlantedConfig(n_slides=4, tiles_per_slide=5, dim=4, planted_features=(0,))
        with pytest.raises(ValueError):
            synthesize_bags(PlantedConfig(**{**cfg.__dict__, **change}))

    def test_grid_coords(self):
        b = synthesize_bags(PlantedConfig(n_slides=2, tiles_per_slide=5, dim=2, planted_features=(0,)))[0]
        assert b.coords.tolist() == [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1]]

    def test_pick_planted(self):
        f = pick_planted_features(64, 4, 42)
        assert len(f) == 4 and f == tuple(sorted(f)) and f == pick_planted_features(64, 4, 42)
        with pytest.raises(ValueError):
            pick_planted_features(64, 0, 42)


def entries(n_pos, n_neg):
    return [ManifestEntry(f"{i}.kbag", f"s{i}", "train", 1 if i < n_pos else 0) for i in range(n_pos + n_neg)]


class TestSplit:
    def test_stratified(self):
        out = split_train_test(entries(5, 5), 0.4, seed=1)
        test = [e for e in out if e.split == "test"]
        assert sorted(e.label for e in test) == [0, 0, 1, 1]

    def test_zero_fraction(self):
        with pytest.raises(ValueError, match="non-empty"):
            split_train_test(entries(5, 5), 0.0)

    def test_default_ratio_on_345_slides(self):
        # 209 normal and 136 tumour slides
        out = split_train_test(entries(136, 209))
        assert sum(e.split == "test" for e in out) == 129

    def test_deterministic(self):
        assert split_train_test(entries(6, 6), 0.5, 3) == split_train_test(entries(6, 6), 0.5, 3)

    def test_class_too_small(self):
        with pytest.raises(ValueError, match="class 1"):
            split_train_test(entries(1, 5), 0.4)


def test_manifest_round_trip(tmp_path):
    cfg = PlantedConfig(n_slides=6, tiles_per_slide=4, dim=3, planted_features=(2,))
    manifest = generate_synthetic(cfg, tmp_path)
    back = DatasetManifest.from_file(tmp_path / "manifest.json")
    assert back.entries == manifest.entries and back.dim == 3
    assert back.ground_truth["planted_features"] == [2]
    bags = back.load("all")
    assert [b.slide_id for b in bags] == [e.slide_id for e in back.entries]
    assert {e.split for e in back.entries} == {"train", "test"}


def test_manifest_rejects_duplicate_ids():
    with pytest.raises(ValueError, match="unique"):
        DatasetManifest([ManifestEntry("a", "s", "train"), ManifestEntry("b", "s", "test")], 3)
