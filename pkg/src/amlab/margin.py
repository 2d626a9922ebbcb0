"""Target-logit transforms, lambda annealing and two-class boundary geometry."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class PsiVariant(str, Enum):
    SOFTMAX = "softmax"
    A_SOFTMAX = "a_softmax"
    AM_SOFTMAX = "am_softmax"


@dataclass(frozen=True)
class PsiParams:
    variant: PsiVariant = PsiVariant.SOFTMAX
    m_mult: int = 4
    m_add: float = 0.35
    lam: float = 0.0
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", PsiVariant(self.variant))
        if self.m_mult < 1:
            raise ValueError("m_mult must be >= 1")
        if not 0 <= self.m_add < 1:
            raise ValueError("m_add must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def label(self):
        if self.name:
            return self.name
        if self.variant is PsiVariant.SOFTMAX:
            return "softmax"
        if self.variant is PsiVariant.A_SOFTMAX:
            return f"a_softmax_m{self.m_mult}_l{self.lam:g}"
        return f"am_softmax_m{self.m_add:g}"

    def __call__(self, theta):
        if self.variant is PsiVariant.SOFTMAX:
            return math.cos(theta)
        if self.variant is PsiVariant.A_SOFTMAX:
            return psi_a_softmax(theta, self.m_mult, self.lam)
        return psi_am(math.cos(theta), self.m_add)


@dataclass(frozen=True)
class LambdaSchedule:
    """lambda(t) = max(lambda_min, lambda_base * (1 + gamma*t) ** -power)."""

    lambda_base: float = 1000.0
    lambda_min: float = 5.0
    gamma: float = 0.12
    power: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0 or self.power <= 0:
            raise ValueError("gamma and power must be positive")

    @classmethod
    def constant(cls, value):
        return cls(lambda_base=value, lambda_min=value)


@dataclass(frozen=True)
class BoundaryGeometry:
    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    margin_width_rad: float


def _check_theta(theta):
    if not 0.0 <= theta <= math.pi:
        raise ValueError(f"theta must lie in [0, pi], got {theta}")


def psi_a_softmax(theta, m_mult, lam):
    """Piecewise multiplicative-margin target transform.

    ``k = floor(m*theta/pi)`` picks the branch; it is clamped to ``m-1`` so
    that theta == pi stays on the last branch.
    """
    _check_theta(theta)
    k = min(max(math.floor(m_mult * theta / math.pi), 0), m_mult - 1)
    return ((-1) ** k * math.cos(m_mult * theta) - 2 * k + lam * math.cos(theta)) / (1 + lam)


def psi_am(cos_theta, m_add):
    if not -1 - 1e-9 <= cos_theta <= 1 + 1e-9:
        raise ValueError(f"cos_theta must lie in [-1, 1], got {cos_theta}")
    return min(max(cos_theta, -1.0), 1.0) - m_add


def lambda_at(schedule, iteration):
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    decayed = schedule.lambda_base * (1.0 + schedule.gamma * iteration) ** (-schedule.power)
    return max(schedule.lambda_min, decayed)


def cosine_to_angular_margin(theta, m_add):
    """Angular margin equivalent to a cosine margin at operating angle ``theta``."""
    shifted = math.cos(theta) - m_add
    if shifted < -1:
        raise ValueError(f"cos({theta}) - {m_add} < -1: margin pushes past the antipode")
    return math.acos(shifted) - theta


def _unit2(v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (2,):
        raise ValueError(f"{name} must be a 2-vector")
    n = np.linalg.norm(v)
    if abs(n - 1.0) > 1e-9:
        raise ValueError(f"{name} must be unit norm, got norm {n}")
    return v / n


def _arc(w1, w2):
    """Angle from w1 to w2 (signed, short way) and the in-plane rotation sign."""
    if abs(abs(float(w1 @ w2)) - 1.0) < 1e-12:
        raise ValueError("w1 and w2 are parallel or antiparallel")
    cross = w1[0] * w2[1] - w1[1] * w2[0]
    return math.atan2(cross, float(w1 @ w2))


def _rot(w, angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * w[0] - s * w[1], s * w[0] + c * w[1]])


def softmax_boundary(w1, w2):
    w1 = _unit2(w1, "w1")
    w2 = _unit2(w2, "w2")
    phi = _arc(w1, w2)
    return _rot(w1, phi / 2)


def _bisect(f, lo, hi, tol=1e-12):
    flo = f(lo)
    if flo == 0:
        return lo
    if np.sign(flo) == np.sign(f(hi)):
        raise ValueError("no root on the arc")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def am_boundary(w1, w2, m_add):
    """Boundaries P1 (class 1 side) and P2 (class 2 side) of the AM-Softmax margin region.

    P1 satisfies ``w1.P1 - m = w2.P1`` and P2 satisfies ``w2.P2 - m = w1.P2``;
    both are found by bisection along the short arc from w1 to w2.
    """
    w1 = _unit2(w1, "w1")
    w2 = _unit2(w2, "w2")
    phi = _arc(w1, w2)
    p0 = _rot(w1, phi / 2)
    if m_add == 0:
        return BoundaryGeometry(p0, p0.copy(), p0.copy(), 0.0)

    def gap(a):
        p = _rot(w1, a)
        return float((w1 - w2) @ p)

    # gap decreases monotonically from 1 - cos(phi) at w1 to cos(phi) - 1 at w2
    try:
        a1 = _bisect(lambda a: gap(a) - m_add, 0.0, phi) if phi > 0 else _bisect(lambda a: gap(a) - m_add, phi, 0.0)
        a2 = _bisect(lambda a: gap(a) + m_add, 0.0, phi) if phi > 0 else _bisect(lambda a: gap(a) + m_add, phi, 0.0)
    except ValueError:
        raise ValueError(f"margin {m_add} too large for a pair separated by {abs(phi)} rad") from None
    p1 = _rot(w1, a1)
    p2 = _rot(w1, a2)
    width = math.acos(min(1.0, max(-1.0, float(p1 @ p2))))
    return BoundaryGeometry(p0, p1, p2, width)


def psi_curve(configs, grid_points):
    """Uniform theta grid over [0, 180] degrees with one psi column per config."""
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    theta_deg = np.linspace(0.0, 180.0, grid_points)
    cols = {}
    for cfg in configs:
        cols[cfg.label] = np.array([cfg(math.radians(t)) for t in theta_deg])
    return theta_deg, cols


DEFAULT_PSI_CONFIGS = (
    PsiParams(PsiVariant.SOFTMAX),
    PsiParams(PsiVariant.A_SOFTMAX, m_mult=2, lam=0.0),
    PsiParams(PsiVariant.A_SOFTMAX, m_mult=4, lam=5.0),
    PsiParams(PsiVariant.A_SOFTMAX, m_mult=4, lam=0.0),
    PsiParams(PsiVariant.AM_SOFTMAX, m_add=0.35),
)


def export_psi_curve(configs, grid_points, path=None):
    """Write the psi curves as CSV (6 significant digits, LF endings); return the text."""
    theta_deg, cols = psi_curve(configs, grid_points)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["theta_deg", *cols])
    for i, t in enumerate(theta_deg):
        writer.writerow([f"{t:.6g}", *(f"{c[i]:.6g}" for c in cols.values())])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
