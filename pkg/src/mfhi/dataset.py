"""Dataset manifest, zero-shot splits, attribute preprocessing and the planted generator.

A dataset directory holds ``manifest.json`` at the root and one tensor file per
image under ``features/``.  Synthetic datasets additionally carry the planted
ground truth (``planted.json`` and ``planted/basis.mft``) so that tests can
check learned behaviour against the generating model.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .tensor_io import read_tensor, write_tensor

SCHEMA_VERSION = 1
FLAVORS = ("face-style", "reid-style")
SPLITS = ("train", "gallery", "probe")


class ConfigurationError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ImageRecord:
    id: int
    identity: int
    path: str
    attributes: list
    split: str
    semantic_id: Optional[int] = None


@dataclass
class DatasetManifest:
    attribute_names: list
    feature_shape: list
    flavor: str = "face-style"
    images: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    def identities(self, splits: Sequence[str] = SPLITS) -> list:
        return sorted({im.identity for im in self.images if im.split in splits})

    @property
    def train_identities(self) -> list:
        return self.identities(("train",))

    @property
    def test_identities(self) -> list:
        return self.identities(("gallery", "probe"))

    def to_json(self) -> str:
        by_identity: dict[int, list] = {}
        for im in sorted(self.images, key=lambda r: r.id):
            rec = asdict(im)
            rec.pop("identity")
            by_identity.setdefault(im.identity, []).append(rec)
        doc = {
            "schema_version": self.schema_version,
            "flavor": self.flavor,
            "attribute_names": list(self.attribute_names),
            "feature_shape": list(self.feature_shape),
            "identities": [{"id": k, "images": v} for k, v in sorted(by_identity.items())],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema version {doc.get('schema_version')!r}")
        images = []
        for ident in doc["identities"]:
            for rec in ident["images"]:
                images.append(ImageRecord(identity=int(ident["id"]), **rec))
        return cls(
            attribute_names=doc["attribute_names"],
            feature_shape=doc["feature_shape"],
            flavor=doc["flavor"],
            images=images,
        )


def save_manifest(manifest: DatasetManifest, root) -> Path:
    path = Path(root) / "manifest.json"
    path.write_text(manifest.to_json())
    return path


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    try:
        return DatasetManifest.from_json(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"no manifest at {path}") from None


def validate_manifest(manifest: DatasetManifest, root=None) -> None:
    """Raise :class:`ManifestError` on split overlap, bad attributes, missing or inconsistent files."""
    if manifest.flavor not in FLAVORS:
        raise ManifestError(f"unknown flavor {manifest.flavor!r}")
    q = manifest.num_attributes
    seen_ids = set()
    for im in manifest.images:
        if im.id in seen_ids:
            raise ManifestError(f"duplicate image id {im.id}")
        seen_ids.add(im.id)
        if im.split not in SPLITS:
            raise ManifestError(f"image {im.id}: unknown split {im.split!r}")
        if len(im.attributes) != q:
            raise ManifestError(f"image {im.id}: attribute length {len(im.attributes)} != {q}")
        if any(a not in (0, 1) for a in im.attributes):
            raise ManifestError(f"image {im.id}: attributes must be binary")
    overlap = set(manifest.train_identities) & set(manifest.test_identities)
    if overlap:
        raise ManifestError(f"identities in both train and test splits: {sorted(overlap)[:10]}")
    if root is not None:
        shape = tuple(manifest.feature_shape)
        for im in manifest.images:
            path = Path(root) / im.path
            if not path.is_file():
                raise ManifestError(f"image {im.id}: missing tensor file {path}")
            got = read_tensor(path).shape
            if got != shape:
                raise ManifestError(f"image {im.id}: feature shape {got} != {shape}")


# ---------------------------------------------------------------------------
# Attribute preprocessing


def one_hot_expand(rows, schema: Sequence[Union[str, int]]) -> np.ndarray:
    """Expand mixed binary / categorical columns into indicator coordinates.

    ``schema`` lists one entry per column: ``"binary"`` passes the value
    through, an integer ``k`` turns the value into ``k`` indicators.
    """
    rows = np.atleast_2d(np.asarray(rows))
    if rows.shape[1] != len(schema):
        raise SchemaError(f"rows have {rows.shape[1]} columns, schema declares {len(schema)}")
    blocks = []
    for col, kind in enumerate(schema):
        values = rows[:, col]
        if kind == "binary":
            if np.any((values != 0) & (values != 1)):
                raise SchemaError(f"column {col}: binary value outside {{0, 1}}")
            blocks.append(values[:, None].astype(np.uint8))
            continue
        k = int(kind)
        if k < 2:
            raise SchemaError(f"column {col}: categorical arity must be >= 2, got {k}")
        if np.any((values < 0) | (values >= k) | (values != np.floor(values))):
            raise SchemaError(f"column {col}: value outside declared arity {k}")
        blocks.append(np.eye(k, dtype=np.uint8)[values.astype(np.intp)])
    return np.concatenate(blocks, axis=1)


def assign_semantic_ids(manifest: DatasetManifest) -> DatasetManifest:
    """Give images with identical attribute vectors one shared, dense semantic id.

    Ids are numbered in order of first occurrence (by image id).
    """
    if manifest.flavor != "reid-style":
        raise ConfigurationError("semantic ids are only assigned for reid-style datasets")
    table: dict[tuple, int] = {}
    for im in sorted(manifest.images, key=lambda r: r.id):
        key = tuple(int(a) for a in im.attributes)
        im.semantic_id = table.setdefault(key, len(table))
    return manifest


def make_split(identities: Sequence[int], ratio=None, counts=None, seed: int = 0):
    """Identity-level train/test partition; returns two sorted lists."""
    ids = list(identities)
    if (ratio is None) == (counts is None):
        raise ConfigurationError("give exactly one of ratio or counts")
    n = len(ids)
    if counts is not None:
        n_train, n_test = (int(c) for c in counts)
        if n_train + n_test != n:
            raise ConfigurationError(f"counts {counts} do not add up to {n} identities")
    else:
        a, b = ratio
        n_train = int(round(n * a / (a + b)))
        n_test = n - n_train
    if n_train < 1 or n_test < 1:
        raise ConfigurationError(f"split leaves an empty side ({n_train} train / {n_test} test)")
    order = np.random.default_rng(seed).permutation(n)
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


# ---------------------------------------------------------------------------
# In-memory view


@dataclass
class Dataset:
    """Arrays for one dataset directory, rows ordered by image id."""

    manifest: DatasetManifest
    image_ids: np.ndarray
    identities: np.ndarray
    attributes: np.ndarray
    features: np.ndarray
    splits: np.ndarray
    semantic_ids: Optional[np.ndarray] = None
    root: Optional[Path] = None

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.manifest.feature_shape)

    @property
    def num_attributes(self) -> int:
        return self.manifest.num_attributes

    def indices(self, *splits: str) -> np.ndarray:
        return np.flatnonzero(np.isin(self.splits, splits))

    def class_labels(self, use_semantic: bool) -> np.ndarray:
        if use_semantic:
            if self.semantic_ids is None:
                raise ConfigurationError("dataset has no semantic ids")
            return self.semantic_ids
        return self.identities


def load_dataset(root, validate: bool = True) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root)
    if validate:
        validate_manifest(manifest)
    images = sorted(manifest.images, key=lambda r: r.id)
    shape = tuple(manifest.feature_shape)
    features = np.empty((len(images),) + shape, dtype=np.float32)
    for row, im in enumerate(images):
        path = root / im.path
        if not path.is_file():
            raise ManifestError(f"image {im.id}: missing tensor file {path}")
        arr = read_tensor(path)
        if arr.shape != shape:
            raise ManifestError(f"image {im.id}: feature shape {arr.shape} != {shape}")
        features[row] = arr
    semantic = None
    if manifest.flavor == "reid-style":
        if any(im.semantic_id is None for im in images):
            raise ManifestError("reid-style manifest without semantic ids")
        semantic = np.array([im.semantic_id for im in images], dtype=np.int64)
    return Dataset(
        manifest=manifest,
        image_ids=np.array([im.id for im in images], dtype=np.int64),
        identities=np.array([im.identity for im in images], dtype=np.int64),
        attributes=np.array([im.attributes for im in images], dtype=np.float32),
        features=features,
        splits=np.array([im.split for im in images]),
        semantic_ids=semantic,
        root=root,
    )


def category_vectors(attributes: np.ndarray, labels: np.ndarray):
    """Per-label mean attribute vector; returns ``(sorted labels, L x Q means)``."""
    keys = np.unique(labels)
    means = np.stack([attributes[labels == k].mean(axis=0) for k in keys])
    return keys, means


# ---------------------------------------------------------------------------
# Planted generator


@dataclass(frozen=True)
class SyntheticConfig:
    num_train_identities: int = 40
    num_test_identities: int = 10
    num_attributes: int = 12
    channels: int = 16
    height: int = 8
    width: int = 8
    images_per_identity: int = 6
    probes_per_identity: int = 2
    flip_prob: float = 0.05
    feature_noise: float = 0.1
    flavor: str = "face-style"
    seed: int = 0

    def __post_init__(self):
        if self.num_train_identities < 2 or self.num_test_identities < 2:
            raise ConfigurationError("need at least 2 train and 2 test identities")
        if self.num_attributes < 2:
            raise ConfigurationError("need at least 2 attributes")
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigurationError("feature extents must be >= 1")
        if not 0 <= self.flip_prob < 0.5:
            raise ConfigurationError("flip probability must lie in [0, 0.5)")
        if self.feature_noise < 0:
            raise ConfigurationError("feature noise must be >= 0")
        if self.images_per_identity < 1:
            raise ConfigurationError("need at least one image per identity")
        if not 0 <= self.probes_per_identity < self.images_per_identity:
            raise ConfigurationError("probes per identity must leave at least one gallery image")
        if self.flavor not in FLAVORS:
            raise ConfigurationError(f"unknown flavor {self.flavor!r}")


def rectangle_side(n: int) -> int:
    return math.ceil(n / 3)


def _draw_identity_vectors(cfg: SyntheticConfig, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    total = cfg.num_train_identities + cfg.num_test_identities
    vectors: list = []
    seen = set()
    for _ in range(total):
        for _try in range(max_tries):
            g = (rng.random(cfg.num_attributes) < 0.5).astype(np.uint8)
            key = g.tobytes()
            if not g.any():
                continue
            if cfg.flavor == "face-style" and key in seen:
                continue
            break
        else:
            raise ConfigurationError(
                f"could not draw {total} distinct attribute vectors after {max_tries} tries; "
                f"increase the number of attributes (Q={cfg.num_attributes})"
            )
        seen.add(key)
        vectors.append(g)
    return np.stack(vectors)


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write a planted dataset to ``out_dir`` and return its manifest.

    Each attribute owns a basis map that is zero outside one random rectangle;
    an image is the sum of its identity's active basis maps plus Gaussian noise,
    and its annotation is the identity vector with random bit flips.
    """
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    Q, C, H, W = cfg.num_attributes, cfg.channels, cfg.height, cfg.width
    rh, rw = rectangle_side(H), rectangle_side(W)

    rects = [(int(rng.integers(0, H - rh + 1)), int(rng.integers(0, W - rw + 1)), rh, rw) for _ in range(Q)]
    signatures = rng.standard_normal((Q, C))
    profiles = rng.uniform(0.5, 1.5, size=(Q, rh, rw))
    basis = np.zeros((Q, C, H, W))
    for q, (top, left, h, w) in enumerate(rects):
        basis[q, :, top:top + h, left:left + w] = signatures[q][:, None, None] * profiles[q][None]
    basis = basis.astype(np.float32)

    truth = _draw_identity_vectors(cfg, rng)
    n_ident = len(truth)
    train_ids, test_ids = make_split(range(n_ident), counts=(cfg.num_train_identities, cfg.num_test_identities), seed=cfg.seed)
    test_set = set(test_ids)

    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "planted").mkdir(exist_ok=True)
    manifest = DatasetManifest(
        attribute_names=[f"attr{q:02d}" for q in range(Q)],
        feature_shape=[C, H, W],
        flavor=cfg.flavor,
    )
    flat_basis = basis.reshape(Q, -1)
    image_id = 0
    for ident in range(n_ident):
        g = truth[ident]
        probe_slots = set()
        if ident in test_set:
            probe_slots = set(rng.permutation(cfg.images_per_identity)[: cfg.probes_per_identity].tolist())
        for k in range(cfg.images_per_identity):
            clean = (g.astype(np.float32) @ flat_basis).reshape(C, H, W)
            noise = rng.standard_normal((C, H, W)) * cfg.feature_noise
            feat = (clean + noise).astype(np.float32)
            flips = rng.random(Q) < cfg.flip_prob
            attrs = np.where(flips, 1 - g, g).astype(int)
            if ident in test_set:
                split = "probe" if k in probe_slots else "gallery"
            else:
                split = "train"
            rel = f"features/{image_id:06d}.mft"
            write_tensor(out / rel, feat)
            manifest.images.append(ImageRecord(image_id, ident, rel, attrs.tolist(), split))
            image_id += 1

    if cfg.flavor == "reid-style":
        assign_semantic_ids(manifest)
    save_manifest(manifest, out)
    write_tensor(out / "planted" / "basis.mft", basis)
    planted = {
        "config": asdict(cfg),
        "rectangles": [list(r) for r in rects],
        "ground_truth": [g.tolist() for g in truth],
        "train_identities": train_ids,
        "test_identities": test_ids,
    }
    (out / "planted.json").write_text(json.dumps(planted, indent=1, sort_keys=True) + "\n")
    return manifest


def load_planted(root):
    """Generator internals: ``(planted dict, basis Q x C x H x W)``."""
    root = Path(root)
    planted = json.loads((root / "planted.json").read_text())
    return planted, read_tensor(root / "planted" / "basis.mft")
