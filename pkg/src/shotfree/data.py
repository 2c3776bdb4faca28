"""Datasets with disjoint class splits, CSV I/O and episodic samplers."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, ProtocolError

SPLIT_RATIO = (64, 16, 20)


class Split(enum.Enum):
    BASE = "base"
    VAL = "val"
    NOVEL = "novel"

    @classmethod
    def parse(cls, tag) -> "Split":
        if isinstance(tag, Split):
            return tag
        try:
            return cls(str(tag).strip().lower())
        except ValueError:
            raise ValueError(f"unknown split tag {tag!r}; expected base, val or novel") from None


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Labeled feature rows whose classes are partitioned into BASE/VAL/NOVEL."""

    features: np.ndarray
    labels: np.ndarray
    split_of_class: dict
    _rows: dict = field(init=False, repr=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ValueError(f"features {features.shape} and labels {labels.shape} do not line up")
        splits = {int(c): Split.parse(s) for c, s in self.split_of_class.items()}
        rows = {}
        for c in np.unique(labels):
            rows[int(c)] = np.flatnonzero(labels == c)
        missing = sorted(set(rows) - set(splits))
        if missing:
            raise ValueError(f"classes {missing} have no split assignment")
        small = sorted(c for c, r in rows.items() if len(r) < 2)
        if small:
            raise ValueError(f"classes {small} have fewer than 2 samples")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split_of_class", {c: splits[c] for c in sorted(rows)})
        object.__setattr__(self, "_rows", rows)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def classes(self, split) -> list:
        split = Split.parse(split)
        return [c for c, s in self.split_of_class.items() if s is split]

    def rows_of(self, class_id: int) -> np.ndarray:
        return self._rows[int(class_id)]

    def rows_in(self, split) -> np.ndarray:
        classes = self.classes(split)
        if not classes:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([self._rows[c] for c in classes]))


@dataclass(frozen=True, eq=False)
class Episode:
    """K classes with a block of row indices per class.

    ``support_count`` is None for unsplit episodes; otherwise the first
    ``support_count[k]`` indices of class ``k`` are its support set.
    """

    class_ids: tuple
    sample_indices: tuple
    support_count: tuple | None = None

    @property
    def ways(self) -> int:
        return len(self.class_ids)

    def indices(self) -> np.ndarray:
        return np.concatenate(self.sample_indices)

    def labels(self) -> np.ndarray:
        return np.concatenate([np.full(len(ix), c) for c, ix in zip(self.class_ids, self.sample_indices)])

    def support(self) -> tuple:
        """(indices, labels) of the support part of a split episode."""
        self._require_split()
        idx = [ix[:n] for ix, n in zip(self.sample_indices, self.support_count)]
        return self._flatten(idx)

    def query(self) -> tuple:
        self._require_split()
        idx = [ix[n:] for ix, n in zip(self.sample_indices, self.support_count)]
        return self._flatten(idx)

    def _flatten(self, idx):
        labels = np.concatenate([np.full(len(ix), c) for c, ix in zip(self.class_ids, idx)])
        return np.concatenate(idx), labels

    def _require_split(self):
        if self.support_count is None:
            raise ProtocolError("episode was sampled without a support/query split")


def gen_synthetic(num_classes: int = 100, dim: int = 16, samples_per_class: int = 60, intra_spread: float = 0.1,
                  seed: int = 0, anisotropy: float = 0.0, split_ratio=SPLIT_RATIO) -> SplitDataset:
    """Gaussian class clusters around means drawn uniformly on the unit sphere of R^dim.

    With ``anisotropy > 0`` every class gets its own per-dimension standard
    deviation ``intra_spread * exp(anisotropy * g)``, ``g ~ N(0, 1)``, giving
    heteroscedastic, anisotropic clusters.  Classes are shuffled into BASE,
    VAL and NOVEL in proportion ``split_ratio``.
    """
    if num_classes < 3:
        raise ValueError("need at least 3 classes, one per split")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    sigma = np.full((num_classes, dim), float(intra_spread))
    if anisotropy > 0:
        sigma = sigma * np.exp(anisotropy * rng.standard_normal((num_classes, dim)))
    noise = rng.standard_normal((num_classes, samples_per_class, dim))
    features = (means[:, None, :] + noise * sigma[:, None, :]).reshape(-1, dim)
    labels = np.repeat(np.arange(num_classes), samples_per_class)

    return SplitDataset(features, labels, _assign_splits(num_classes, split_ratio, rng))


def _assign_splits(num_classes: int, split_ratio, rng) -> dict:
    total = float(sum(split_ratio))
    n_base = max(1, int(round(num_classes * split_ratio[0] / total)))
    n_val = max(1, int(round(num_classes * split_ratio[1] / total)))
    n_base = min(n_base, num_classes - n_val - 1)
    order = rng.permutation(num_classes)
    split_of_class = {}
    for pos, c in enumerate(order):
        split_of_class[int(c)] = Split.BASE if pos < n_base else Split.VAL if pos < n_base + n_val else Split.NOVEL
    return split_of_class


def gen_heteroscedastic(num_classes: int = 100, clean_dim: int = 8, noisy_dim: int = 8, samples_per_class: int = 60,
                        clean_sep: float = 0.3, clean_spread: float = 0.2, noisy_sep: float = 1.5,
                        noisy_spread: float = 2.0, class_jitter: float = 0.3, seed: int = 0,
                        split_ratio=SPLIT_RATIO) -> SplitDataset:
    """Classes separated weakly along clean dimensions and strongly along noisy ones.

    Means are ``N(0, clean_sep^2)`` on the first ``clean_dim`` coordinates and
    ``N(0, noisy_sep^2)`` on the remaining ``noisy_dim``.  The noisy block has
    a per-class standard deviation ``noisy_spread * exp(class_jitter * g)``.
    With one support point the noisy block mostly hurts, while averaging
    several supports makes it the more informative one, so the best
    representation depends on how many shots are available.
    """
    if num_classes < 3:
        raise ValueError("need at least 3 classes, one per split")
    if clean_dim < 0 or noisy_dim < 0 or clean_dim + noisy_dim < 1:
        raise ValueError("need at least one feature dimension")
    rng = np.random.default_rng(seed)
    n = samples_per_class
    mean_c = rng.standard_normal((num_classes, clean_dim)) * clean_sep
    mean_n = rng.standard_normal((num_classes, noisy_dim)) * noisy_sep
    sigma_n = noisy_spread * np.exp(class_jitter * rng.standard_normal((num_classes, 1)))
    clean = mean_c[:, None, :] + clean_spread * rng.standard_normal((num_classes, n, clean_dim))
    noisy = mean_n[:, None, :] + sigma_n[:, :, None] * rng.standard_normal((num_classes, n, noisy_dim))
    features = np.concatenate([clean, noisy], axis=2).reshape(-1, clean_dim + noisy_dim)
    labels = np.repeat(np.arange(num_classes), n)
    return SplitDataset(features, labels, _assign_splits(num_classes, split_ratio, rng))


def save_csv(ds: SplitDataset, path, comment: str | None = None) -> None:
    """Write ``class_id,split,v0..v{D-1}``; floats use repr so loading is lossless."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["class_id", "split"] + [f"v{i}" for i in range(ds.input_dim)])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([int(label), ds.split_of_class[int(label)].value] + [repr(float(v)) for v in row])


def load_csv(path) -> SplitDataset:
    """Parse a dataset CSV; every malformed line is reported in the raised error."""
    path = Path(path)
    problems = []
    features, labels = [], []
    split_of_class = {}
    first_line_of_class = {}
    with path.open(newline="") as fh:
        lines = [(n, line) for n, line in enumerate(fh, start=1) if line.strip() and not line.startswith("#")]
    if not lines:
        raise DatasetFormatError(f"{path}: empty dataset file")
    reader = csv.reader(line for _, line in lines)
    header = next(reader)
    if len(header) < 3 or [h.strip().lower() for h in header[:2]] != ["class_id", "split"]:
        raise DatasetFormatError(f"{path}: header must start with class_id,split and name >= 1 feature column")
    width = len(header)
    for (lineno, _), row in zip(lines[1:], reader):
        if len(row) != width:
            problems.append(f"line {lineno}: expected {width} fields, found {len(row)}")
            continue
        try:
            cid = int(row[0])
            split = Split.parse(row[1])
            values = [float(v) for v in row[2:]]
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        if cid in split_of_class and split_of_class[cid] is not split:
            problems.append(f"line {lineno}: class {cid} tagged {split.value} but line "
                            f"{first_line_of_class[cid]} tagged it {split_of_class[cid].value}")
            continue
        split_of_class.setdefault(cid, split)
        first_line_of_class.setdefault(cid, lineno)
        labels.append(cid)
        features.append(values)
    if problems:
        raise DatasetFormatError(f"{path}: {len(problems)} invalid line(s)", problems)
    if not labels:
        raise DatasetFormatError(f"{path}: no data rows")
    try:
        return SplitDataset(np.array(features), np.array(labels), split_of_class)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None


def _pick_classes(ds: SplitDataset, split, ways: int, need: int, rng) -> list:
    classes = ds.classes(split)
    if ways < 1 or ways > len(classes):
        raise ProtocolError(f"{Split.parse(split).value} split has {len(classes)} classes; cannot draw {ways} ways")
    chosen = rng.choice(len(classes), size=ways, replace=False)
    picked = [classes[i] for i in chosen]
    short = [c for c in picked if len(ds.rows_of(c)) < need]
    if short:
        raise ProtocolError(f"classes {short} have fewer than {need} samples")
    return picked


def sample_episode_unsplit(ds: SplitDataset, split, ways: int, per_class: int, rng: np.random.Generator) -> Episode:
    """K classes without replacement, then ``per_class`` rows per class without replacement."""
    if per_class < 1:
        raise ProtocolError("per_class must be >= 1")
    classes = _pick_classes(ds, split, ways, per_class, rng)
    idx = tuple(rng.choice(ds.rows_of(c), size=per_class, replace=False) for c in classes)
    return Episode(tuple(classes), idx, None)


def sample_episode_support_query(ds: SplitDataset, split, ways: int, shots: int, queries: int,
                                 rng: np.random.Generator) -> Episode:
    """Like the unsplit sampler, with the first ``shots`` rows of each class as support."""
    if shots < 1 or queries < 0:
        raise ProtocolError("need shots >= 1 and queries >= 0")
    classes = _pick_classes(ds, split, ways, shots + queries, rng)
    idx = tuple(rng.choice(ds.rows_of(c), size=shots + queries, replace=False) for c in classes)
    return Episode(tuple(classes), idx, tuple([shots] * ways))
