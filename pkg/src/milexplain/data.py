"""Slide bags: synthetic planted-feature generation, KBAG files and manifests.

KBAG layout (little-endian)::

    b"KBAG" | u32 version | u32 T | u32 P | i32 slide_label
    T x (i32 tile_label, f32 x, f32 y)
    T x P float64 tile matrix, row-major

Unknown labels are stored as -1.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"KBAG"
VERSION = 1
_HEADER = struct.Struct("<4sIIIi")
_TILE = np.dtype([("label", "<i4"), ("x", "<f4"), ("y", "<f4")])

# held-out share: 129 of 345 slides
DEFAULT_TEST_FRACTION = 129 / 345


class KbagError(ValueError):
    pass


class BadMagicError(KbagError):
    pass


class UnsupportedVersionError(KbagError):
    pass


class TruncatedFileError(KbagError):
    pass


class DimensionMismatchError(KbagError):
    pass


@dataclass
class SlideBag:
    slide_id: str
    tiles: np.ndarray  # T x P
    coords: np.ndarray  # T x 2
    slide_label: int = -1
    tile_labels: np.ndarray | None = None  # T, -1 where unknown

    def __post_init__(self):
        self.tiles = np.asarray(self.tiles, dtype=np.float64)
        if self.tiles.ndim != 2 or self.tiles.shape[0] < 1:
            raise ValueError(f"slide {self.slide_id}: tiles must be a non-empty T x P matrix")
        T = self.tiles.shape[0]
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (T, 2):
            raise ValueError(f"slide {self.slide_id}: coords must be {T} x 2")
        if self.tile_labels is None:
            self.tile_labels = np.full(T, -1, dtype=np.int32)
        self.tile_labels = np.asarray(self.tile_labels, dtype=np.int32)
        if self.tile_labels.shape != (T,):
            raise ValueError(f"slide {self.slide_id}: need one tile label per tile")
        self.slide_label = int(self.slide_label)

    @property
    def n_tiles(self) -> int:
        return self.tiles.shape[0]

    @property
    def dim(self) -> int:
        return self.tiles.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SlideBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.slide_label == other.slide_label
            and np.array_equal(self.tiles, other.tiles)
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.tile_labels, other.tile_labels)
        )


def save_bag(bag: SlideBag, path) -> None:
    T, P = bag.tiles.shape
    table = np.empty(T, dtype=_TILE)
    table["label"] = bag.tile_labels
    table["x"] = bag.coords[:, 0]
    table["y"] = bag.coords[:, 1]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, T, P, bag.slide_label))
        f.write(table.tobytes())
        f.write(np.ascontiguousarray(bag.tiles, dtype="<f8").tobytes())


def load_bag(path, slide_id: str | None = None, expected_dim: int | None = None) -> SlideBag:
    """Read a KBAG file; ``slide_id`` defaults to the file stem."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a KBAG file")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, T, P, label = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: KBAG version {version} (expected {VERSION})")
    if T < 1 or P < 1:
        raise DimensionMismatchError(f"{path}: empty bag (T={T}, P={P})")
    if expected_dim is not None and P != expected_dim:
        raise DimensionMismatchError(f"{path}: tile dim {P}, expected {expected_dim}")
    need = _HEADER.size + T * _TILE.itemsize + T * P * 8
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: header declares {T}x{P} tiles, file holds {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise DimensionMismatchError(f"{path}: {len(buf) - need} trailing bytes after declared {T}x{P} tiles")
    table = np.frombuffer(buf, dtype=_TILE, count=T, offset=_HEADER.size)
    tiles = np.frombuffer(buf, dtype="<f8", count=T * P, offset=_HEADER.size + T * _TILE.itemsize)
    coords = np.stack([table["x"], table["y"]], axis=1).astype(np.float64)
    return SlideBag(
        slide_id=slide_id if slide_id is not None else path.stem,
        tiles=tiles.reshape(T, P).astype(np.float64),
        coords=coords,
        slide_label=label,
        tile_labels=table["label"].astype(np.int32),
    )


# -- manifest -------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str  # relative to the manifest directory
    slide_id: str
    split: str
    label: int = -1


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    dim: int
    root: Path = field(default_factory=Path)
    ground_truth: dict | None = None

    def __post_init__(self):
        ids = [e.slide_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("slide ids in a manifest must be unique")
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise ValueError(f"slide {e.slide_id}: split must be train or test, got {e.split!r}")

    def split(self, name: str) -> list[ManifestEntry]:
        if name == "all":
            return list(self.entries)
        return [e for e in self.entries if e.split == name]

    def load(self, split: str = "all") -> list[SlideBag]:
        return [
            load_bag(self.root / e.path, slide_id=e.slide_id, expected_dim=self.dim)
            for e in self.split(split)
        ]

    def to_dict(self) -> dict:
        doc = {
            "dims": {"P": self.dim},
            "slides": [
                {"path": e.path, "slide_id": e.slide_id, "split": e.split, "label": e.label}
                for e in self.entries
            ],
        }
        if self.ground_truth is not None:
            doc["ground_truth"] = self.ground_truth
        return doc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = [
            ManifestEntry(s["path"], s["slide_id"], s["split"], int(s.get("label", -1)))
            for s in doc["slides"]
        ]
        return cls(entries, int(doc["dims"]["P"]), path.parent, doc.get("ground_truth"))


# -- synthetic data --------------------------------------------------------------------


@dataclass
class PlantedConfig:
    n_slides: int = 200
    tiles_per_slide: int = 100
    dim: int = 64
    planted_features: tuple[int, ...] = (0, 1, 2, 3)
    pos_tile_fraction: float = 0.1
    signal_shift: float = 2.0
    noise_sigma: float = 1.0
    seed: int = 42
    test_fraction: float = DEFAULT_TEST_FRACTION

    def validate(self) -> None:
        if self.n_slides < 2:
            raise ValueError("need at least two slides")
        if self.tiles_per_slide < 1 or self.dim < 1:
            raise ValueError("tiles_per_slide and dim must be positive")
        if not self.planted_features:
            raise ValueError("at least one planted feature is required")
        if len(set(self.planted_features)) != len(self.planted_features):
            raise ValueError("planted features must be distinct")
        if any(not 0 <= k < self.dim for k in self.planted_features):
            raise ValueError(f"planted features must lie in [0, {self.dim})")
        if not 0 < self.pos_tile_fraction <= 1:
            raise ValueError("pos_tile_fraction must be in (0, 1]")
        # zero shift is allowed as a null control
        if self.signal_shift < 0:
            raise ValueError("signal_shift must be non-negative")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")


def pick_planted_features(dim: int, count: int, seed: int) -> tuple[int, ...]:
    """Deterministic choice of ``count`` feature indices out of ``dim``."""
    if not 0 < count <= dim:
        raise ValueError(f"planted feature count must be in [1, {dim}], got {count}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return tuple(sorted(int(k) for k in rng.choice(dim, size=count, replace=False)))


def grid_coords(T: int) -> np.ndarray:
    side = math.ceil(math.sqrt(T))
    j = np.arange(T)
    return np.stack([j % side, j // side], axis=1).astype(np.float64)


def synthesize_bags(cfg: PlantedConfig) -> list[SlideBag]:
    """In-memory bags for ``cfg``: half the slides positive, shuffled by seed."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    n_pos = cfg.n_slides // 2
    labels = np.array([1] * n_pos + [0] * (cfg.n_slides - n_pos))
    rng.shuffle(labels)
    T, P = cfg.tiles_per_slide, cfg.dim
    n_pos_tiles = math.ceil(cfg.pos_tile_fraction * T)
    planted = np.asarray(cfg.planted_features)
    coords = grid_coords(T)
    width = len(str(cfg.n_slides - 1))
    bags = []
    for i, label in enumerate(labels):
        tiles = rng.normal(0.0, cfg.noise_sigma, size=(T, P))
        tile_labels = np.zeros(T, dtype=np.int32)
        if label == 1:
            pos = rng.choice(T, size=n_pos_tiles, replace=False)
            tile_labels[pos] = 1
            tiles[np.ix_(pos, planted)] += cfg.signal_shift
        bags.append(SlideBag(f"slide_{i:0{width}d}", tiles, coords.copy(), int(label), tile_labels))
    return bags


def split_train_test(
    entries: list[ManifestEntry], test_fraction: float = DEFAULT_TEST_FRACTION, seed: int = 42
) -> list[ManifestEntry]:
    """Stratified train/test assignment; returns new entries with ``split`` set.

    The test set holds ``round(n * test_fraction)`` slides, spread over classes by
    largest remainder, with at least one slide of each class on each side.
    """
    n = len(entries)
    if n < 2:
        raise ValueError("need at least two slides to split")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1); both splits must be non-empty")
    classes = sorted({e.label for e in entries})
    members = {c: [i for i, e in enumerate(entries) if e.label == c] for c in classes}
    for c, idx in members.items():
        if len(idx) < 2:
            raise ValueError(f"class {c} has {len(idx)} slide(s); cannot appear in both splits")

    total = int(math.floor(n * test_fraction + 0.5))
    exact = {c: len(members[c]) * test_fraction for c in classes}
    quota = {c: int(math.floor(exact[c])) for c in classes}
    by_remainder = sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))
    for c in by_remainder[: max(0, total - sum(quota.values()))]:
        quota[c] += 1
    for c in classes:
        quota[c] = min(max(quota[c], 1), len(members[c]) - 1)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    split = ["train"] * n
    for c in classes:
        idx = np.array(members[c])
        chosen = rng.permutation(idx)[: quota[c]]
        for i in chosen:
            split[int(i)] = "test"
    return [ManifestEntry(e.path, e.slide_id, s, e.label) for e, s in zip(entries, split)]


def generate_synthetic(cfg: PlantedConfig, out_dir) -> DatasetManifest:
    """Write one KBAG per slide plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bags = synthesize_bags(cfg)
    entries = []
    for bag in bags:
        name = f"{bag.slide_id}.kbag"
        save_bag(bag, out / name)
        entries.append(ManifestEntry(name, bag.slide_id, "train", bag.slide_label))
    entries = split_train_test(entries, cfg.test_fraction, cfg.seed)
    truth = {
        "planted_features": list(cfg.planted_features),
        "pos_tile_fraction": cfg.pos_tile_fraction,
        "signal_shift": cfg.signal_shift,
        "noise_sigma": cfg.noise_sigma,
        "tiles_per_slide": cfg.tiles_per_slide,
        "n_slides": cfg.n_slides,
        "seed": cfg.seed,
    }
    manifest = DatasetManifest(entries, cfg.dim, out, truth)
    manifest.save(out / "manifest.json")
    return manifest
