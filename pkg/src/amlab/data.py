"""Synthetic datasets, IDX parsing and verification / identification protocols."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from amlab.numeric import Rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"inputs must be a non-empty 2-D array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError("one label per input row required")
        if y.min() < 0 or y.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count)

    def class_indices(self):
        return [np.flatnonzero(self.labels == k) for k in range(self.class_count)]


def synth_blobs(class_count, dim, samples_per_class, spread, seed):
    """Gaussian blobs around class centers drawn uniformly on the unit sphere."""
    if class_count < 2:
        raise ValueError("need at least two classes")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = Rng(seed)
    centers = rng.normals((class_count, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = rng.normals((class_count, samples_per_class, dim), 0.0, spread)
    x = (centers[:, None, :] + noise).reshape(-1, dim)
    y = np.repeat(np.arange(class_count), samples_per_class)
    return LabeledDataset(x, y, class_count)


def split_per_class(dataset, eval_per_class, seed):
    """Hold out ``eval_per_class`` samples of each class; returns (train, eval)."""
    rng = Rng(seed)
    train_idx, eval_idx = [], []
    for idx in dataset.class_indices():
        if len(idx) <= eval_per_class:
            raise InsufficientSamplesError(f"class has {len(idx)} samples, cannot hold out {eval_per_class}")
        perm = idx[rng.permutation(len(idx))]
        eval_idx.extend(sorted(perm[:eval_per_class]))
        train_idx.extend(sorted(perm[eval_per_class:]))
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(eval_idx))


def _read_header(data, magic, fields, path):
    need = 4 * (1 + fields)
    if len(data) < need:
        raise TruncatedFileError(f"{path}: truncated header ({len(data)} of {need} bytes)")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{fields}I", data[4:need]), need


def parse_idx(images_path, labels_path, scaling="unit"):
    """Read an IDX image/label file pair.

    ``scaling="unit"`` maps bytes to [0, 1] by /255; ``scaling="face"`` uses
    (x - 128) / 128.  Images are flattened row-major.
    """
    with open(images_path, "rb") as fh:
        img = fh.read()
    with open(labels_path, "rb") as fh:
        lab = fh.read()
    (count, rows, cols), off = _read_header(img, IMAGES_MAGIC, 3, images_path)
    pixels = count * rows * cols
    if len(img) < off + pixels:
        raise TruncatedFileError(f"{images_path}: truncated pixel data ({len(img) - off} of {pixels} bytes)")
    (lcount,), loff = _read_header(lab, LABELS_MAGIC, 1, labels_path)
    if len(lab) < loff + lcount:
        raise TruncatedFileError(f"{labels_path}: truncated label data ({len(lab) - loff} of {lcount} bytes)")
    if lcount != count:
        raise CountMismatchError(f"count mismatch: {count} images but {lcount} labels")
    raw = np.frombuffer(img, dtype=np.uint8, count=pixels, offset=off).reshape(count, rows * cols)
    if scaling == "unit":
        x = raw / 255.0
    elif scaling == "face":
        x = (raw.astype(np.float64) - 128.0) / 128.0
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    y = np.frombuffer(lab, dtype=np.uint8, count=lcount, offset=loff).astype(np.int64)
    return LabeledDataset(x, y, int(y.max()) + 1 if y.size else 1)


def write_idx(images, labels, images_path, labels_path, rows, cols):
    """Write uint8 images (count x rows*cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, rows * cols)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, images.shape[0], rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


@dataclass(frozen=True)
class VerificationProtocol:
    pairs: list  # (index_a, index_b, same)

    def __post_init__(self):
        flags = {same for _, _, same in self.pairs}
        if flags != {True, False}:
            raise ValueError("protocol needs at least one same and one different pair")


def make_verification_pairs(dataset, pair_count, seed):
    """Half same-class, half different-class pairs without repeated unordered pairs."""
    if pair_count < 2 or pair_count % 2:
        raise ValueError("pair_count must be a positive even number")
    per_class = dataset.class_indices()
    if any(len(idx) < 2 for idx in per_class):
        raise InsufficientSamplesError("every class needs at least two samples")
    half = pair_count // 2
    n = len(dataset)
    same_total = sum(len(i) * (len(i) - 1) // 2 for i in per_class)
    diff_total = n * (n - 1) // 2 - same_total
    if same_total < half or diff_total < half:
        raise InsufficientSamplesError(
            f"only {same_total} same / {diff_total} different pairs available for {half} of each"
        )
    rng = Rng(seed)
    labels = dataset.labels

    def draw(want_same, total):
        if total <= 4 * half:
            # small pools: enumerate and sample without replacement
            pool = [
                (a, b)
                for a, b in combinations(range(n), 2)
                if (labels[a] == labels[b]) == want_same
            ]
            return sorted(rng.choice(pool, half))
        seen = set()
        while len(seen) < half:
            if want_same:
                idx = per_class[rng.below(len(per_class))]
                a, b = idx[rng.below(len(idx))], idx[rng.below(len(idx))]
            else:
                a, b = rng.below(n), rng.below(n)
            if a == b or (labels[a] == labels[b]) != want_same:
                continue
            seen.add((min(a, b), max(a, b)))
        return sorted(seen)

    same = draw(True, same_total)
    diff = draw(False, diff_total)
    pairs = [(int(a), int(b), True) for a, b in same] + [(int(a), int(b), False) for a, b in diff]
    return VerificationProtocol(pairs)


@dataclass(frozen=True)
class IdentificationProtocol:
    """Sample-index roles for (open-set) identification.

    ``probe_truth[i]`` is the identity (class label) of ``probes[i]``; every
    such identity has gallery samples.  Distractor samples come from classes
    that never appear among probes.
    """

    gallery: np.ndarray
    probes: np.ndarray
    probe_truth: np.ndarray
    distractors: np.ndarray
    distractor_classes: tuple

    @property
    def closed_set(self):
        return self.distractors.size == 0


def make_identification_protocol(dataset, gallery_per_class, probe_per_class, distractor_classes, seed):
    if gallery_per_class < 1 or probe_per_class < 1:
        raise ValueError("gallery_per_class and probe_per_class must be >= 1")
    c = dataset.class_count
    if distractor_classes >= c:
        raise InsufficientSamplesError(f"{distractor_classes} distractor classes leave no identities of {c}")
    rng = Rng(seed)
    class_order = rng.permutation(c)
    distractor_set = sorted(int(k) for k in class_order[:distractor_classes])
    per_class = dataset.class_indices()
    gallery, probes, truth, distractors = [], [], [], []
    for k in range(c):
        idx = per_class[k]
        if k in distractor_set:
            distractors.extend(int(i) for i in idx)
            continue
        need = gallery_per_class + probe_per_class
        if len(idx) < need:
            raise InsufficientSamplesError(f"class {k} has {len(idx)} samples, needs {need}")
        perm = idx[rng.permutation(len(idx))]
        gallery.extend(int(i) for i in perm[:gallery_per_class])
        chosen = perm[gallery_per_class:need]
        probes.extend(int(i) for i in chosen)
        truth.extend([k] * len(chosen))
    return IdentificationProtocol(
        np.array(gallery, dtype=np.int64),
        np.array(probes, dtype=np.int64),
        np.array(truth, dtype=np.int64),
        np.array(sorted(distractors), dtype=np.int64),
        tuple(distractor_set),
    )
