"""L2 normalization with its exact backward pass, and the gradient-norm scan."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-12


class DegenerateFeatureError(ValueError):
    """Raised when a vector is too short to normalize."""


@dataclass(frozen=True)
class NormCache:
    input: np.ndarray
    norm: float
    output: np.ndarray


def l2_normalize(v, eps=DEFAULT_EPS):
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if not n > eps:
        raise DegenerateFeatureError(f"cannot normalize vector with norm {n} <= {eps}")
    return v / n, NormCache(v, n, v / n)


def l2_normalize_backward(cache, upstream):
    """Pull ``upstream`` back through y = x/|x|: (I - y y^T) upstream / |x|."""
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ValueError(f"upstream shape {g.shape} does not match cached {cache.output.shape}")
    y = cache.output
    return (g - y * (y @ g)) / cache.norm


def normalize_rows(x, eps=DEFAULT_EPS):
    """Row-wise version of ``l2_normalize``; returns (unit rows, row norms)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(~(norms > eps))
    if bad.size:
        raise DegenerateFeatureError(f"row {bad[0]} has norm {norms[bad[0]]} <= {eps}")
    return x / norms[:, None], norms


def normalize_rows_backward(unit, norms, upstream):
    """Row-wise version of ``l2_normalize_backward``."""
    dot = np.einsum("ij,ij->i", unit, upstream)
    return (upstream - unit * dot[:, None]) / norms[:, None]


def default_direction(head_weights, target=0):
    """Normalized mean of one class weight and its nearest other class weight."""
    w, _ = normalize_rows(head_weights)
    cos = w @ w[target]
    cos[target] = -np.inf
    nearest = int(np.argmax(cos))
    d, _ = l2_normalize(w[target] + w[nearest])
    return d


def gradnorm_curve(head_weights, direction, norms, s, target=0):
    """Feature-gradient norm against feature norm, with and without feature normalization.

    The feature is ``r * direction`` labelled ``target``.  The normalized
    column uses logits ``s * cos`` (weight rows normalized too); the plain
    column uses raw logits ``W f`` on the same head.  Returns an (k, 3) array
    of ``(r, |dL/df| normalized, |dL/df| plain)``.
    """
    from amlab.losses import Batch, ClassifierHead, LossConfig, Variant, loss_forward_backward

    norms = [float(r) for r in norms]
    if not norms:
        raise ValueError("norms must be non-empty")
    if any(r <= 0 for r in norms):
        raise ValueError("norms must be positive")
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    head = ClassifierHead(np.asarray(head_weights, dtype=np.float64))
    fn_cfg = LossConfig(variant=Variant.NORMFACE, s=s, m_add=0.0)
    plain_cfg = LossConfig(variant=Variant.SOFTMAX)
    rows = []
    for r in norms:
        batch = Batch(np.array([r * direction]), np.array([target]))
        g_fn = loss_forward_backward(batch, head, fn_cfg).grad_features[0]
        g_plain = loss_forward_backward(batch, head, plain_cfg).grad_features[0]
        rows.append((r, float(np.linalg.norm(g_fn)), float(np.linalg.norm(g_plain))))
    return np.array(rows)


def crossing_abscissa(curve):
    """Feature norm where the two gradient columns cross (log-linear interpolation)."""
    r, a, b = curve[:, 0], curve[:, 1], curve[:, 2]
    diff = np.log(a) - np.log(b)
    idx = np.flatnonzero(np.sign(diff[:-1]) != np.sign(diff[1:]))
    if idx.size == 0:
        return None
    i = idx[0]
    t = diff[i] / (diff[i] - diff[i + 1])
    return float(np.exp(np.log(r[i]) + t * (np.log(r[i + 1]) - np.log(r[i]))))


def export_gradnorm(curve, path=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["feature_norm", "grad_fn", "grad_plain"])
    for r, a, b in curve:
        writer.writerow([f"{r:.6g}", f"{a:.6g}", f"{b:.6g}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
