"""Cosine-similarity verification and identification metrics.

Conventions: a comparison is accepted when ``score >= threshold``; VR@FAR
reads the ROC without interpolation; CMC ranks count only entries scoring
strictly above the mate, so ties favor the mate.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from amlab import kernels
from amlab.norm import normalize_rows


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    far: np.ndarray
    vr: np.ndarray

    def points(self):
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.vr.tolist()))


@dataclass(frozen=True)
class CmcCurve:
    rank_accuracies: np.ndarray

    def rank(self, k):
        """Accuracy at rank k (1-based)."""
        return float(self.rank_accuracies[min(k, len(self.rank_accuracies)) - 1])


@dataclass(frozen=True)
class FeatureStats:
    mean_intra_class_angle_rad: float
    min_inter_center_angle_rad: float
    centers: np.ndarray


def cosine_similarity(f1, f2):
    a = np.asarray(f1, dtype=np.float64)
    b = np.asarray(f2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if not (na > 1e-12 and nb > 1e-12):
        raise ValueError("cosine similarity of a degenerate vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b):
    a_hat, _ = normalize_rows(a)
    b_hat, _ = normalize_rows(b)
    return np.clip(a_hat @ b_hat.T, -1.0, 1.0)


def _count_at_least(sorted_scores, thresholds):
    return sorted_scores.size - np.searchsorted(sorted_scores, thresholds, side="left")


def roc(genuine_scores, impostor_scores):
    gen = np.sort(np.asarray(genuine_scores, dtype=np.float64).ravel())
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64).ravel())
    if gen.size == 0 or imp.size == 0:
        raise ValueError("roc needs non-empty genuine and impostor score lists")
    thresholds = np.unique(np.concatenate([gen, imp]))
    far = _count_at_least(imp, thresholds) / imp.size
    vr = _count_at_least(gen, thresholds) / gen.size
    return RocCurve(thresholds, far, vr)


def vr_at_far(curve, far_target):
    """VR at the smallest threshold whose FAR <= far_target; 0 if only accept-none qualifies."""
    if not 0.0 <= far_target <= 1.0:
        raise ValueError("far_target must lie in [0, 1]")
    ok = np.flatnonzero(curve.far <= far_target)
    if ok.size == 0:
        return 0.0
    return float(curve.vr[ok[0]])


def cmc(probe_features, gallery_features, distractor_features, probe_truth):
    """Rank-k identification accuracy for k = 1 .. gallery + distractors.

    ``probe_truth[i]`` is the index of probe i's mate in ``gallery_features``.
    """
    probes = np.asarray(probe_features, dtype=np.float64)
    gallery = np.asarray(gallery_features, dtype=np.float64)
    search = gallery
    if distractor_features is not None and len(distractor_features):
        distract = np.asarray(distractor_features, dtype=np.float64)
        if distract.ndim != 2 or distract.shape[1] != gallery.shape[1]:
            raise ValueError(f"distractor shape {distract.shape} does not match gallery {gallery.shape}")
        search = np.vstack([gallery, distract])
    if probes.ndim != 2 or probes.shape[1] != gallery.shape[1]:
        raise ValueError(f"probe shape {probes.shape} does not match gallery {gallery.shape}")
    truth = np.asarray(probe_truth, dtype=np.int64)
    if truth.shape != (probes.shape[0],) or (truth.size and (truth.min() < 0 or truth.max() >= gallery.shape[0])):
        raise ValueError("probe_truth must give one valid gallery index per probe")
    scores = cosine_matrix(probes, search)
    ranks = kernels.count_greater(scores, truth) + 1
    k = np.arange(1, search.shape[0] + 1)
    acc = (ranks[None, :] <= k[:, None]).mean(axis=1) if ranks.size else np.zeros(k.size)
    return CmcCurve(acc)


def dir_at_far(probe_features, gallery_features, probe_truth, far_target):
    """Open-set detection-and-identification rate at a false accept rate.

    ``probe_truth[i]`` is the gallery index of probe i's mate, or ``None`` / a
    negative value for an impostor probe.  Candidate thresholds are the
    distinct top-1 scores of all probes; the smallest one whose impostor FAR
    is <= far_target is used.  If none qualifies nothing is accepted and the
    rate is 0.
    """
    truth = np.array([-1 if t is None else int(t) for t in probe_truth], dtype=np.int64)
    impostor = truth < 0
    if not impostor.any():
        raise ValueError("dir_at_far needs at least one impostor probe")
    if impostor.all():
        raise ValueError("dir_at_far needs at least one mated probe")
    scores = cosine_matrix(probe_features, gallery_features)
    top_idx = np.argmax(scores, axis=1)
    top = scores[np.arange(scores.shape[0]), top_idx]
    imp_top = np.sort(top[impostor])
    candidates = np.unique(top)
    far = _count_at_least(imp_top, candidates) / imp_top.size
    ok = np.flatnonzero(far <= far_target)
    if ok.size == 0:
        return 0.0
    t = candidates[ok[0]]
    mated = ~impostor
    hits = (top_idx[mated] == truth[mated]) & (top[mated] >= t)
    return float(hits.mean())


def class_templates(features, labels, classes):
    """One template per class: the mean of that class's normalized features."""
    f_hat, _ = normalize_rows(features)
    return np.array([f_hat[labels == k].mean(axis=0) for k in classes])


def feature_stats(features, labels):
    f_hat, _ = normalize_rows(features)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    means = np.array([f_hat[labels == k].mean(axis=0) for k in classes])
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms <= 1e-12):
        raise ValueError(f"class {classes[np.argmin(norms)]} has a zero mean direction")
    centers = means / norms[:, None]
    pos = np.searchsorted(classes, labels)
    intra = np.arccos(np.clip(np.einsum("ij,ij->i", f_hat, centers[pos]), -1.0, 1.0))
    if len(classes) > 1:
        cc = np.clip(centers @ centers.T, -1.0, 1.0)
        iu = np.triu_indices(len(classes), 1)
        inter = float(np.arccos(cc[iu]).min())
    else:
        inter = math.pi
    return FeatureStats(float(intra.mean()), inter, centers)


def export_features(features, labels, path=None):
    """CSV of L2-normalized features plus label, in input order."""
    f_hat, _ = normalize_rows(features)
    d = f_hat.shape[1]
    header = ["x", "y", "z"] if d == 3 else [f"x{i}" for i in range(d)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*header, "label"])
    for row, lab in zip(f_hat, labels):
        writer.writerow([*(repr(float(v)) for v in row), int(lab)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def verification_scores(features, protocol):
    a = np.array([p[0] for p in protocol.pairs])
    b = np.array([p[1] for p in protocol.pairs])
    same = np.array([p[2] for p in protocol.pairs], dtype=bool)
    f_hat, _ = normalize_rows(features)
    scores = np.clip(np.einsum("ij,ij->i", f_hat[a], f_hat[b]), -1.0, 1.0)
    return scores[same], scores[~same]


def metrics_json(report):
    """Serialize a metrics report deterministically."""
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
