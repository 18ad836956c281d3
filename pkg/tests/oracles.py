"""Independent reference implementations used to freeze expected values.

Each oracle is written directly from the mathematical definition, with loops
or closed forms, and shares no code with the package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv3d_loops(x, w, b=None, stride=1, padding=0):
    """Direct cross-correlation; x [B,Ci,D,H,W], w [Co,Ci,k,k,k]."""
    B, Ci, D, H, W = x.shape
    Co, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    Do, Ho, Wo = ((n + 2 * padding - k) // stride + 1 for n in (D, H, W))
    out = np.zeros((B, Co, Do, Ho, Wo))
    for d, h, ww in itertools.product(range(Do), range(Ho), range(Wo)):
        patch = xp[:, :, d * stride:d * stride + k, h * stride:h * stride + k, ww * stride:ww * stride + k]
        out[:, :, d, h, ww] = np.einsum("bcijk,ocijk->bo", patch, w)
    if b is not None:
        out += np.asarray(b)[None, :, None, None, None]
    return out


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one of 6 face neighbours outside it or off the grid."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    inner = np.ones_like(m)
    for axis in range(3):
        for shift in (-1, 1):
            inner &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~inner


def hd95_bruteforce(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """O(n^2) pooled 95th-percentile surface distance with nearest-rank indexing."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float(np.sqrt(np.sum(((np.array(a.shape) - 1) * np.asarray(spacing)) ** 2)))
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface(a)) * sp
    pb = np.argwhere(surface(b)) * sp
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    pooled = np.sort(np.concatenate([d.min(axis=1), d.min(axis=0)]))
    rank = math.ceil(0.95 * len(pooled))
    return float(pooled[rank - 1])


def dice_percent(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    total = a.sum() + b.sum()
    return 100.0 if total == 0 else 200.0 * np.logical_and(a, b).sum() / total


def soft_dice_loss(p, t, eps=1e-5) -> float:
    """Mean over regions (axis 1) of 1 - (2 sum pt + eps) / (sum p + sum t + eps)."""
    p, t = np.asarray(p, np.float64), np.asarray(t, np.float64)
    losses = []
    for r in range(p.shape[1]):
        pr, tr = p[:, r].ravel(), t[:, r].ravel()
        losses.append(1 - (2 * float(pr @ tr) + eps) / (pr.sum() + tr.sum() + eps))
    return float(np.mean(losses))


def psnr_db(recon, ref) -> float:
    recon, ref = np.asarray(recon, np.float64), np.asarray(ref, np.float64)
    mse = np.mean((recon - ref) ** 2)
    rng = ref.max() - ref.min()
    return 10 * math.log10(rng * rng / mse)


def pog(mus, variances, prior=True):
    """Product of scalar Gaussians: precisions add, mean is precision weighted."""
    prec = sum(1 / v for v in variances) + (1.0 if prior else 0.0)
    mean = sum(m / v for m, v in zip(mus, variances)) / prec
    return mean, 1 / prec


def kl_scalar(mu, logvar) -> float:
    return 0.5 * (mu * mu + math.exp(logvar) - logvar - 1)


def mlstm_scalar(steps, d=1):
    """Stabilized mLSTM recurrence for d = 1 written with plain floats.

    ``steps`` is a list of (q, k, v, i_pre, f_pre, o_pre); returns the outputs.
    """
    C = n = m = 0.0
    outs = []
    for q, k, v, i_pre, f_pre, o_pre in steps:
        k = k / math.sqrt(d)
        log_f = -math.log1p(math.exp(-f_pre))
        m_new = max(log_f + m, i_pre)
        i_g = math.exp(i_pre - m_new)
        f_g = math.exp(log_f + m - m_new)
        C = f_g * C + i_g * v * k
        n = f_g * n + i_g * k
        m = m_new
        h_tilde = C * q / max(abs(n * q), 1.0)
        outs.append(h_tilde / (1 + math.exp(-o_pre)))
    return outs
