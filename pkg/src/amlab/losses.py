"""Forward/backward for softmax, NormFace, A-Softmax and AM-Softmax losses.

All four losses share one form.  For sample i with label y, every class j
gets a cosine ``u_ij`` (or a raw logit for plain softmax) and the row scale
``r_i`` multiplies them into logits; the target logit is ``r_i * psi(u_iy)``.

    variant      r_i        psi(u)              normalization
    softmax      1          u (raw W.f)         none
    normface     s          u                   features + weights
    am_softmax   s          u - m               features + weights
    am (w/o FN)  |f_i|      u - m               weights
    a_softmax    |f_i|      piecewise cos(m*t)  weights

The row pass itself runs in :mod:`amlab.kernels`; this module handles the
normalizations and the chain rule around it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from amlab import kernels
from amlab.margin import LambdaSchedule, lambda_at
from amlab.norm import DEFAULT_EPS, normalize_rows, normalize_rows_backward
from amlab.numeric import Rng


class Variant(str, Enum):
    SOFTMAX = "softmax"
    NORMFACE = "normface"
    A_SOFTMAX = "a_softmax"
    AM_SOFTMAX = "am_softmax"


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``m_add`` defaults to 0.35 for am_softmax and 0 otherwise; the norm flags
    default per variant.  ``feature_norm=False`` with am_softmax selects the
    "without feature normalization" ablation, which scales by ``|f_i|``.
    """

    variant: Variant = Variant.AM_SOFTMAX
    s: float = 30.0
    m_add: float | None = None
    m_mult: int = 4
    lambda_schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    feature_norm: bool | None = None
    weight_norm: bool | None = None

    def __post_init__(self):
        v = Variant(self.variant)
        object.__setattr__(self, "variant", v)
        m_add = self.m_add
        if m_add is None:
            m_add = 0.35 if v is Variant.AM_SOFTMAX else 0.0
        defaults = {
            Variant.SOFTMAX: (False, False),
            Variant.NORMFACE: (True, True),
            Variant.A_SOFTMAX: (False, True),
            Variant.AM_SOFTMAX: (True, True),
        }[v]
        fn = defaults[0] if self.feature_norm is None else bool(self.feature_norm)
        wn = defaults[1] if self.weight_norm is None else bool(self.weight_norm)
        object.__setattr__(self, "m_add", float(m_add))
        object.__setattr__(self, "feature_norm", fn)
        object.__setattr__(self, "weight_norm", wn)

        if self.s <= 0:
            raise ValueError("s must be positive")
        if not 0 <= self.m_add < 1:
            raise ValueError("m_add must lie in [0, 1)")
        if self.m_mult < 1:
            raise ValueError("m_mult must be >= 1")
        if v is Variant.SOFTMAX and (fn or wn):
            raise ValueError("softmax uses neither feature nor weight normalization")
        if v is Variant.NORMFACE and not (fn and wn and self.m_add == 0):
            raise ValueError("normface requires both normalizations and m_add = 0")
        if v is Variant.A_SOFTMAX and (fn or not wn):
            raise ValueError("a_softmax normalizes weights only")
        if v is Variant.AM_SOFTMAX and not wn:
            raise ValueError("am_softmax requires weight normalization")

    def with_margin(self, m_add):
        from dataclasses import replace

        return replace(self, m_add=m_add)


class ClassifierHead:
    """Class weight vectors stored as rows of a c x d matrix."""

    def __init__(self, weights):
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"head weights must be 2-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("head weights have non-finite entries")
        self.weights = w

    @property
    def class_count(self):
        return self.weights.shape[0]

    @property
    def embed_dim(self):
        return self.weights.shape[1]

    def renormalize(self):
        self.weights, _ = normalize_rows(self.weights)

    @classmethod
    def random(cls, class_count, embed_dim, rng, normalized=True):
        """Gaussian rows; unit-normalized, or small (stddev 0.01) so raw logits start near zero."""
        w = rng.normals((class_count, embed_dim), 0.0, 1.0 if normalized else 0.01)
        head = cls(w)
        if normalized:
            head.renormalize()
        return head


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        if y.shape != (f.shape[0],):
            raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {f.shape[0]} features")
        if not np.all(np.isfinite(f)):
            raise ValueError("features have non-finite entries")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y.astype(np.int64))


@dataclass
class LossOutput:
    loss: float
    grad_features: np.ndarray
    grad_weights: np.ndarray
    target_logits: np.ndarray
    probabilities: np.ndarray


def _psi_kind(cfg):
    if cfg.variant is Variant.AM_SOFTMAX:
        return kernels.PSI_ADDITIVE
    if cfg.variant is Variant.A_SOFTMAX:
        return kernels.PSI_ANGULAR
    return kernels.PSI_IDENTITY


def row_losses(batch, head, config, iteration=0):
    """Per-sample losses (the batch loss is their mean)."""
    return _forward(batch, head, config, iteration, rows_only=True)


def loss_forward_backward(batch, head, config, iteration=0):
    """Mean loss over the batch with exact gradients for features and head weights."""
    return _forward(batch, head, config, iteration)


def _forward(batch, head, config, iteration, rows_only=False):
    f, y = batch.features, batch.labels
    w = head.weights
    n, d = f.shape
    if w.shape[1] != d:
        raise ValueError(f"features have dim {d} but head has dim {w.shape[1]}")
    c = w.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= c:
        bad = y[(y < 0) | (y >= c)][0]
        raise ValueError(f"label {bad} out of range for {c} classes")

    lam = lambda_at(config.lambda_schedule, iteration) if config.variant is Variant.A_SOFTMAX else 0.0
    kind = _psi_kind(config)

    if config.variant is Variant.SOFTMAX:
        z = f @ w.T
        loss, prob, tl, dz, _ = kernels.margin_softmax_rows(z, y, np.ones(n), kind)
        if rows_only:
            return loss
        dz /= n
        return LossOutput(float(loss.mean()), dz @ w, dz.T @ f, tl, prob)

    w_hat, w_norm = normalize_rows(w, DEFAULT_EPS)
    f_hat, f_norm = normalize_rows(f, DEFAULT_EPS)
    u = f_hat @ w_hat.T
    scale = np.full(n, float(config.s)) if config.feature_norm else f_norm
    loss, prob, tl, du, dscale = kernels.margin_softmax_rows(
        u, y, scale, kind, config.m_add, config.m_mult, lam
    )
    if rows_only:
        return loss
    du /= n
    grad_f = normalize_rows_backward(f_hat, f_norm, du @ w_hat)
    if not config.feature_norm:
        grad_f += (dscale / n)[:, None] * f_hat
    grad_w = normalize_rows_backward(w_hat, w_norm, du.T @ f_hat)
    return LossOutput(float(loss.mean()), grad_f, grad_w, tl, prob)


def predict(features, head):
    """Label with the highest cosine; ties go to the lowest class index."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != head.embed_dim:
        raise ValueError(f"features of shape {f.shape} do not match head dim {head.embed_dim}")
    f_hat, _ = normalize_rows(f)
    w_hat, _ = normalize_rows(head.weights)
    return np.argmax(f_hat @ w_hat.T, axis=1)


def _sample_instance(config, c, d, n, rng):
    w = rng.normals((c, d))
    if config.weight_norm:
        w /= np.linalg.norm(w, axis=1, keepdims=True)
    f = rng.normals((n, d))
    labels = np.array([rng.below(c) for _ in range(n)])
    return Batch(f, labels), ClassifierHead(w)


def _away_from_branches(batch, head, m_mult, tol=1e-3):
    f_hat, _ = normalize_rows(batch.features)
    w_hat, _ = normalize_rows(head.weights)
    cos = np.einsum("ij,ij->i", f_hat, w_hat[batch.labels])
    theta = np.arccos(np.clip(cos, -1, 1))
    edges = np.arange(m_mult + 1) * np.pi / m_mult
    return bool(np.all(np.abs(theta[:, None] - edges[None, :]).min(axis=1) > tol))


def reference_row_losses(features, weights, labels, config, iteration=0):
    """Direct evaluation of the per-sample losses in extended precision.

    Written straight from the loss definitions without the kernels; it is the
    function the finite-difference oracle differentiates.
    """
    ld = np.longdouble
    f = np.asarray(features, dtype=ld)
    w = np.asarray(weights, dtype=ld)
    y = np.asarray(labels)
    rows = np.arange(f.shape[0])
    if config.variant is Variant.SOFTMAX:
        z = f @ w.T
    else:
        f_norm = np.sqrt((f * f).sum(axis=1))
        u = (f / f_norm[:, None]) @ (w / np.sqrt((w * w).sum(axis=1))[:, None]).T
        target = u[rows, y]
        if config.variant is Variant.AM_SOFTMAX:
            psi = target - ld(config.m_add)
        elif config.variant is Variant.A_SOFTMAX:
            m = config.m_mult
            lam = ld(lambda_at(config.lambda_schedule, iteration))
            x = np.clip(target, ld(-1) + ld(1e-7), ld(1) - ld(1e-7))
            theta = np.arccos(x)
            k = np.clip(np.floor(m * theta / ld(np.pi)), 0, m - 1)
            psi = ((-1) ** k * np.cos(m * theta) - 2 * k + lam * np.cos(theta)) / (1 + lam)
        else:
            psi = target
        u = u.copy()
        u[rows, y] = psi
        scale = np.full(f.shape[0], ld(config.s)) if config.feature_norm else f_norm
        z = scale[:, None] * u
    gap = z - z[rows, y][:, None]
    gap[rows, y] = -np.inf
    # log(sum_j e^z_j) - z_y == log1p(sum_{j != y} e^(z_j - z_y))
    return np.log1p(np.exp(gap).sum(axis=1))


def grad_check(config, c=5, d=4, n=6, seed=0, step=1e-5, iteration=0, perturb=0.0):
    """Max relative error between analytic and central-difference gradients.

    The differences are taken on :func:`reference_row_losses` (extended
    precision), so round-off in the loss does not swamp small gradient
    entries at s = 30, and central differences at steps h and 2h are
    Richardson-combined to cancel the O(h^2) truncation term.  Relative error per entry is ``|a - b| / max(|a|, |b|, 1e-8)``.  A-Softmax
    instances are resampled until every target angle is at least 1e-3 rad away
    from a branch boundary.  ``perturb`` scales the analytic gradients by
    ``1 + perturb`` (negative control).
    """
    rng = Rng(seed)
    for _ in range(1000):
        batch, head = _sample_instance(config, c, d, n, rng)
        if config.variant is not Variant.A_SOFTMAX or _away_from_branches(batch, head, config.m_mult):
            break
    else:
        raise RuntimeError("could not sample an instance away from branch boundaries")

    out = loss_forward_backward(batch, head, config, iteration)
    analytic_f = out.grad_features * (1.0 + perturb)
    analytic_w = out.grad_weights * (1.0 + perturb)

    def rows_at(f, w):
        return reference_row_losses(f, w, batch.labels, config, iteration)

    def central(arr, other, which, idx, h):
        hi = arr.copy()
        lo = arr.copy()
        hi[idx] += h
        lo[idx] -= h
        if which == "f":
            diff = rows_at(hi, other) - rows_at(lo, other)
        else:
            diff = rows_at(other, hi) - rows_at(other, lo)
        # difference row losses before summing: unchanged rows cancel exactly
        return diff.sum() / (2 * h * n)

    def numeric(arr, other, which):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            d1 = central(arr, other, which, idx, step)
            d2 = central(arr, other, which, idx, 2 * step)
            g[idx] = float((4 * d1 - d2) / 3)
        return g

    num_f = numeric(batch.features, head.weights, "f")
    num_w = numeric(head.weights, batch.features, "w")

    def rel(a, b):
        return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))

    return max(rel(analytic_f, num_f), rel(analytic_w, num_w))
