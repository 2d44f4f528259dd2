"""Interaction logs, modality feature tables, the item cold-start split,
BPR triplet sampling and the synthetic benchmark generator.

On-disk layout of a dataset directory::

    interactions.tsv         user<TAB>item
    features_<modality>.tsv  item<TAB>f1,f2,...,fd
    manifest.txt             key=value lines (modality=..., dim=..., ...)
"""
from __future__ import annotations

import hashlib
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyDatasetError, FormatError, ParameterError, ParseError

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
PARTITIONS = {"train": TRAIN, "valid": VALID, "test": TEST}

INTERACTIONS_FILE = "interactions.tsv"
MANIFEST_FILE = "manifest.txt"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream derived from a root seed and a stream name."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass
class InteractionSet:
    """Binary implicit feedback with interned ids.

    ``records`` is an (n, 2) int array of (user_index, item_index). After
    :func:`cold_start_split`, ``partition`` labels every item and
    ``train_records`` / ``valid_truth`` / ``test_truth`` hold the records
    split by the partition of their item.
    """

    user_ids: list
    item_ids: list
    records: np.ndarray
    partition: np.ndarray | None = None
    train_records: np.ndarray | None = None
    valid_truth: np.ndarray | None = None
    test_truth: np.ndarray | None = None

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def is_split(self) -> bool:
        return self.partition is not None

    def items_in(self, partition: str) -> np.ndarray:
        return np.flatnonzero(self.partition == PARTITIONS[partition])

    def truth(self, partition: str) -> np.ndarray:
        return {"train": self.train_records, "valid": self.valid_truth, "test": self.test_truth}[partition]

    def with_items(self, extra_item_ids) -> "InteractionSet":
        """Append item ids (e.g. feature-only cold items) not yet known."""
        known = set(self.item_ids)
        new = [i for i in extra_item_ids if i not in known]
        if not new:
            return self
        return replace(self, item_ids=list(self.item_ids) + new)


@dataclass
class ModalityFeatureTable:
    modalities: list = field(default_factory=list)
    dims: dict = field(default_factory=dict)
    vectors: dict = field(default_factory=dict)

    def add(self, modality: str, item_id: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if modality not in self.dims:
            self.modalities.append(modality)
            self.dims[modality] = vec.size
            self.vectors[modality] = {}
        elif vec.size != self.dims[modality]:
            raise FormatError(
                f"{modality}: expected dim {self.dims[modality]}, got {vec.size} for item {item_id!r}")
        self.vectors[modality][item_id] = vec

    def item_ids(self) -> list:
        seen = {}
        for m in self.modalities:
            for i in self.vectors[m]:
                seen.setdefault(i, None)
        return list(seen)

    def matrices(self, item_ids) -> tuple[list, np.ndarray]:
        """Dense (n_items, dim) matrix per modality (zeros where absent) and the presence mask."""
        mats = []
        present = np.zeros((len(item_ids), len(self.modalities)), dtype=bool)
        for j, m in enumerate(self.modalities):
            mat = np.zeros((len(item_ids), self.dims[m]))
            table = self.vectors[m]
            for row, iid in enumerate(item_ids):
                vec = table.get(iid)
                if vec is not None:
                    mat[row] = vec
                    present[row, j] = True
            mats.append(mat)
        return mats, present


@dataclass
class Dataset:
    """Interactions aligned with per-item feature matrices."""

    interactions: InteractionSet
    modalities: list
    features: list
    present: np.ndarray

    @classmethod
    def build(cls, interactions: InteractionSet, table: ModalityFeatureTable) -> "Dataset":
        interactions = interactions.with_items(table.item_ids())
        mats, present = table.matrices(interactions.item_ids)
        missing = np.flatnonzero(~present.any(axis=1))
        if missing.size:
            log.warning("%d items have no modality features", missing.size)
        return cls(interactions, list(table.modalities), mats, present)

    @property
    def dims(self) -> list:
        return [f.shape[1] for f in self.features]

    def split(self, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> "Dataset":
        return replace(self, interactions=cold_start_split(self.interactions, ratios, seed))


@dataclass
class TripletBatch:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.users)


# ---------------------------------------------------------------------------
# loading


def _nonblank_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def load_interactions(path) -> InteractionSet:
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    pairs: dict[tuple, None] = {}
    for lineno, line in _nonblank_lines(path):
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0] or not fields[1]:
            raise ParseError(f"{path}:{lineno}: expected 'user<TAB>item', got {len(fields)} field(s)")
        u = users.setdefault(fields[0], len(users))
        i = items.setdefault(fields[1], len(items))
        pairs.setdefault((u, i), None)
    if not pairs:
        raise EmptyDatasetError(f"{path}: no interactions")
    records = np.array(list(pairs), dtype=np.int64).reshape(-1, 2)
    return InteractionSet(list(users), list(items), records)


def load_features(path, modality: str, table: ModalityFeatureTable | None = None) -> ModalityFeatureTable:
    table = table if table is not None else ModalityFeatureTable()
    dim = table.dims.get(modality)
    for lineno, line in _nonblank_lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'item<TAB>v1,...,vd'")
        try:
            vec = np.array([float(v) for v in fields[1].split(",")])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: non-numeric value ({exc})") from None
        if not np.all(np.isfinite(vec)):
            raise ParseError(f"{path}:{lineno}: non-finite value")
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise FormatError(f"{path}:{lineno}: dimension {vec.size} does not match dimension {dim}")
        table.add(modality, fields[0], vec)
    if modality not in table.dims:
        raise EmptyDatasetError(f"{path}: no feature vectors for {modality}")
    return table


def read_manifest(path) -> tuple[list, dict]:
    """Return ``([(modality, dim), ...], other_keys)``."""
    modalities, extra = [], {}
    for lineno, line in _nonblank_lines(path):
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected key=value")
        key, value = key.strip(), value.strip()
        if key == "modality":
            modalities.append([value, None])
        elif key == "dim":
            if not modalities:
                raise ParseError(f"{path}:{lineno}: dim before any modality")
            modalities[-1][1] = int(value)
        else:
            extra[key] = value
    return [tuple(m) for m in modalities], extra


def features_file(modality: str) -> str:
    return f"features_{modality}.tsv"


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_FILE
    if not manifest.exists():
        raise DataError(f"missing {manifest}")
    modalities, _ = read_manifest(manifest)
    interactions = load_interactions(data_dir / INTERACTIONS_FILE)
    table = ModalityFeatureTable()
    for modality, dim in modalities:
        path = data_dir / features_file(modality)
        if not path.exists():
            raise DataError(f"missing feature file for modality {modality!r}: {path}")
        load_features(path, modality, table)
        if dim is not None and table.dims[modality] != dim:
            raise FormatError(f"{modality}: manifest dim {dim} != file dim {table.dims[modality]}")
    return Dataset.build(interactions, table)


def data_hash(data_dir) -> str:
    data_dir = Path(data_dir)
    modalities, _ = read_manifest(data_dir / MANIFEST_FILE)
    names = [MANIFEST_FILE, INTERACTIONS_FILE] + [features_file(m) for m, _ in modalities]
    digest = hashlib.sha256()
    for name in names:
        digest.update(name.encode())
        digest.update((data_dir / name).read_bytes())
    return digest.hexdigest()


def write_dataset(out_dir, interactions: InteractionSet, table: ModalityFeatureTable, extra=None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / INTERACTIONS_FILE, "w", encoding="utf-8") as fh:
        for u, i in interactions.records:
            fh.write(f"{interactions.user_ids[u]}\t{interactions.item_ids[i]}\n")
    for m in table.modalities:
        with open(out_dir / features_file(m), "w", encoding="utf-8") as fh:
            for iid, vec in table.vectors[m].items():
                fh.write(iid + "\t" + ",".join(repr(v) for v in vec.tolist()) + "\n")
    with open(out_dir / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        for m in table.modalities:
            fh.write(f"modality={m}\ndim={table.dims[m]}\n")
        for k, v in (extra or {}).items():
            fh.write(f"{k}={v}\n")


def write_split(out_dir, interactions: InteractionSet) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in PARTITIONS:
        with open(out_dir / f"{name}_items.txt", "w", encoding="utf-8") as fh:
            for i in interactions.items_in(name):
                fh.write(f"{interactions.item_ids[i]}\n")


# ---------------------------------------------------------------------------
# splitting and sampling


def cold_start_split(interactions: InteractionSet, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionSet:
    """Partition ITEMS by the ratios; every record of a held-out item leaves the training set."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ParameterError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = interactions.n_items
    if n < 10:
        raise ParameterError(f"cold-start split needs at least 10 items, got {n}")
    n_valid = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    order = substream(seed, "split").permutation(n)
    partition = np.full(n, TRAIN, dtype=np.int8)
    partition[order[n - n_valid - n_test:n - n_test]] = VALID
    partition[order[n - n_test:]] = TEST
    rec = interactions.records
    rec_part = partition[rec[:, 1]] if len(rec) else np.zeros(0, dtype=np.int8)
    return replace(
        interactions,
        partition=partition,
        train_records=rec[rec_part == TRAIN],
        valid_truth=rec[rec_part == VALID],
        test_truth=rec[rec_part == TEST],
    )


class TripletSampler:
    """Uniform BPR triplets from training records with rejection-resampled negatives."""

    def __init__(self, interactions: InteractionSet, rng: np.random.Generator):
        if not interactions.is_split:
            raise DataError("sample triplets only after cold_start_split")
        self.rng = rng
        self.n_items = interactions.n_items
        self.train_items = interactions.items_in("train")
        rec = interactions.train_records
        if len(rec) == 0:
            raise EmptyDatasetError("no training records")
        per_user = np.bincount(rec[:, 0], minlength=interactions.n_users)
        saturated = np.flatnonzero(per_user >= len(self.train_items))
        if saturated.size:
            log.warning("skipping %d user(s) who interacted with every training item", saturated.size)
            rec = rec[~np.isin(rec[:, 0], saturated)]
            if len(rec) == 0:
                raise EmptyDatasetError("every user interacted with every training item")
        self.records = rec
        self._keys = np.unique(interactions.train_records[:, 0] * self.n_items + interactions.train_records[:, 1])

    def is_positive(self, users, items) -> np.ndarray:
        keys = users * self.n_items + items
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def sample(self, batch_size: int) -> TripletBatch:
        rows = self.rng.integers(0, len(self.records), size=batch_size)
        users = self.records[rows, 0]
        positives = self.records[rows, 1]
        negatives = self.train_items[self.rng.integers(0, len(self.train_items), size=batch_size)]
        bad = self.is_positive(users, negatives)
        while bad.any():
            idx = np.flatnonzero(bad)
            negatives[idx] = self.train_items[self.rng.integers(0, len(self.train_items), size=idx.size)]
            bad[idx] = self.is_positive(users[idx], negatives[idx])
        return TripletBatch(users, positives, negatives)


def sample_triplets(interactions: InteractionSet, batch_size: int, rng: np.random.Generator) -> TripletBatch:
    return TripletSampler(interactions, rng).sample(batch_size)


# ---------------------------------------------------------------------------
# synthetic benchmark


def generate_synthetic(n_users: int, n_items: int, dim: int, text_signal: float = 1.0,
                       image_signal: float = 0.0, interactions_per_user: int = 10, seed: int = 0):
    """Latent-factor dataset with two noisy views of the item latents.

    ``feature = signal * latent + N(0, 1)`` per modality; each user's
    interactions are their top-scoring items by latent dot product.
    """
    if dim < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    if n_users < 1 or n_items < 1:
        raise ParameterError(f"need n_users >= 1 and n_items >= 1, got {n_users}, {n_items}")
    if text_signal < 0 or image_signal < 0:
        raise ParameterError("signal weights must be non-negative")
    if not 1 <= interactions_per_user <= n_items:
        raise ParameterError(f"interactions_per_user must be in [1, {n_items}]")
    user_lat = substream(seed, "synth.users").standard_normal((n_users, dim))
    item_lat = substream(seed, "synth.items").standard_normal((n_items, dim))
    image = image_signal * item_lat + substream(seed, "synth.image").standard_normal((n_items, dim))
    text = text_signal * item_lat + substream(seed, "synth.text").standard_normal((n_items, dim))

    scores = user_lat @ item_lat.T
    top = np.argsort(-scores, axis=1, kind="stable")[:, :interactions_per_user]
    users = np.repeat(np.arange(n_users), interactions_per_user)
    records = np.stack([users, top.reshape(-1)], axis=1).astype(np.int64)

    user_ids = [f"u{u}" for u in range(n_users)]
    item_ids = [f"i{i}" for i in range(n_items)]
    table = ModalityFeatureTable()
    for name, mat in (("image", image), ("text", text)):
        for i, iid in enumerate(item_ids):
            table.add(name, iid, mat[i])
    interactions = InteractionSet(user_ids, item_ids, records)
    return interactions, table


def generate_synthetic_latents(n_users: int, n_items: int, dim: int, seed: int = 0):
    """The latent user/item vectors behind :func:`generate_synthetic` (for analysis)."""
    return (substream(seed, "synth.users").standard_normal((n_users, dim)),
            substream(seed, "synth.items").standard_normal((n_items, dim)))


def random_recall_baseline(k: int, n_candidates: int) -> float:
    """Expected Recall@k of a uniformly random ranking over n_candidates items."""
    return min(k, n_candidates) / n_candidates


def epoch_batches(n_records: int, batch_size: int) -> int:
    return max(1, math.ceil(n_records / batch_size))
