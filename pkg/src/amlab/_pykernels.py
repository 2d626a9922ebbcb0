"""Pure-Python / numpy versions of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same results (bit-identical for the RNG, within round-off for the
floating point kernels).
"""
import math

import numpy as np

MASK64 = (1 << 64) - 1

# target-logit transform codes shared with the compiled kernel
PSI_IDENTITY = 0
PSI_ADDITIVE = 1
PSI_ANGULAR = 2

ACOS_CLAMP = 1e-7


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def xoshiro_next(state):
    """Advance a 4-word xoshiro256++ state (uint64 ndarray, in place)."""
    s0, s1, s2, s3 = (int(v) for v in state)
    result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
    t = (s1 << 17) & MASK64
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return result


def fill_normals(state, out, mean, stddev):
    """Box-Muller fill: each draw consumes two uniforms, keeps the cosine branch."""
    for i in range(out.shape[0]):
        u1 = (xoshiro_next(state) >> 11) * (1.0 / 9007199254740992.0)
        u2 = (xoshiro_next(state) >> 11) * (1.0 / 9007199254740992.0)
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        out[i] = mean + stddev * (r * math.cos(2.0 * math.pi * u2))


def _psi_angular(u, m_mult, lam):
    """A-Softmax target transform on cosines, returning (psi, dpsi/du)."""
    x = np.clip(u, -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)
    inside = (u > -1.0 + ACOS_CLAMP) & (u < 1.0 - ACOS_CLAMP)
    theta = np.arccos(x)
    k = np.clip(np.floor(m_mult * theta / math.pi), 0, m_mult - 1)
    sign = 1.0 - 2.0 * (k % 2)
    psi = (sign * np.cos(m_mult * theta) - 2.0 * k + lam * x) / (1.0 + lam)
    dpsi_dtheta = (-sign * m_mult * np.sin(m_mult * theta) - lam * np.sin(theta)) / (1.0 + lam)
    dpsi = np.where(inside, dpsi_dtheta * (-1.0 / np.sqrt(1.0 - x * x)), 0.0)
    return psi, dpsi


def margin_softmax_rows(cos, labels, scale, psi_kind, m_add, m_mult, lam):
    """Per-row margin softmax cross-entropy over a cosine (or raw logit) matrix.

    Row i has logits ``scale[i] * cos[i, j]`` for non-target classes and
    ``scale[i] * psi(cos[i, y_i])`` for its target.  Returns per-row losses,
    probabilities, target logits, d(row loss)/d(cos) and d(row loss)/d(scale).
    """
    cos = np.asarray(cos, dtype=np.float64)
    n, c = cos.shape
    rows = np.arange(n)
    target = cos[rows, labels]
    if psi_kind == PSI_IDENTITY:
        psi, dpsi = target, np.ones(n)
    elif psi_kind == PSI_ADDITIVE:
        psi, dpsi = target - m_add, np.ones(n)
    elif psi_kind == PSI_ANGULAR:
        psi, dpsi = _psi_angular(target, m_mult, lam)
    else:
        raise ValueError(f"unknown psi kind {psi_kind}")

    values = cos.copy()
    values[rows, labels] = psi
    logits = scale[:, None] * values
    top = logits.max(axis=1)
    ex = np.exp(logits - top[:, None])
    target_logit = logits[rows, labels]
    e_target = ex[rows, labels]
    ex[rows, labels] = 0.0
    rest = ex.sum(axis=1)
    total = e_target + rest
    ex[rows, labels] = e_target
    prob = ex / total[:, None]
    # log1p keeps precision for confidently classified rows
    loss = np.where(target_logit >= top, np.log1p(rest), top - target_logit + np.log(total))

    dz = prob.copy()
    dz[rows, labels] = -rest / total
    dscale = np.einsum("ij,ij->i", dz, values)
    dcos = dz * scale[:, None]
    dcos[rows, labels] *= dpsi
    return loss, prob, target_logit, dcos, dscale


def count_greater(scores, mate):
    """For each row, count entries other than ``mate[i]`` strictly above the mate score."""
    scores = np.asarray(scores, dtype=np.float64)
    rows = np.arange(scores.shape[0])
    mate_score = scores[rows, mate]
    above = scores > mate_score[:, None]
    above[rows, mate] = False
    return above.sum(axis=1).astype(np.int64)
