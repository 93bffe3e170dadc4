"""Training objectives: denoising MSE, Chamfer distance, the two-headed
completion loss, grouped NT-Xent, and cross-entropy.

All losses return a LossValue whose scalar stays on the active tape, plus a
diagnostics map of plain floats for logging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Tensor,
    add,
    broadcast_to,
    exp,
    index_select,
    log,
    matmul,
    mean_reduce,
    multiply,
    scalar_multiply,
    subtract,
    sum_reduce,
    transpose,
)


@dataclass
class LossValue:
    scalar: Tensor  # shape-() or shape-(1,) scalar on tape
    diagnostics: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.scalar.values.reshape(()))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_all(x: Tensor) -> Tensor:
    out = x
    for _ in range(x.values.ndim):
        out = sum_reduce(out, 0)
    return out


def mse_denoise(denoised, clean) -> LossValue:
    """Mean over points of the squared Euclidean distance between the
    denoised cloud and its noiseless ground truth (row correspondence)."""
    d, c = _as_tensor(denoised), _as_tensor(clean)
    if d.shape != c.shape:
        raise ShapeMismatchError(f"mse_denoise: shape {d.shape} vs {c.shape}")
    n = d.shape[0]
    diff = subtract(d, c)
    total = _sum_all(multiply(diff, diff))
    scalar = scalar_multiply(total, 1.0 / n)
    return LossValue(scalar, {"mse": float(scalar.values.reshape(()))})


def _directed_sq_dists(src: Tensor, dst: Tensor) -> np.ndarray:
    """Plain [S x D] squared-distance matrix used only to pick nearest
    neighbors; gradients flow through the selected pairs, not through the
    argmin itself."""
    s, d = src.values, dst.values
    ss = np.einsum("ij,ij->i", s, s)
    dd = np.einsum("ij,ij->i", d, d)
    m = ss[:, None] + dd[None, :] - 2.0 * (s @ d.T)
    np.maximum(m, 0.0, out=m)
    return m


def _nn_sq_dist_sum(src: Tensor, dst: Tensor) -> Tensor:
    """sum over rows of src of min over rows of dst of ||src_i - dst_j||^2,
    differentiable through the selected pairs (ties pick the lowest index)."""
    idx = np.argmin(_directed_sq_dists(src, dst), axis=1)
    sel = index_select(dst, 0, idx)
    diff = subtract(src, sel)
    return _sum_all(multiply(diff, diff))


def chamfer(pred, gt, normalizer: int) -> LossValue:
    """Symmetric Chamfer distance: both directed nearest-neighbor sums,
    scaled by 1/(2*normalizer)."""
    p, g = _as_tensor(pred), _as_tensor(gt)
    if p.values.ndim != 2 or g.values.ndim != 2 or p.shape[1] != g.shape[1]:
        raise ShapeMismatchError(f"chamfer: shape {p.shape} vs {g.shape}")
    if p.shape[0] < 1 or g.shape[0] < 1:
        raise ValueError("chamfer: point sets must be non-empty")
    if normalizer < 1:
        raise ValueError("chamfer: normalizer must be >= 1")
    total = add(_nn_sq_dist_sum(g, p), _nn_sq_dist_sum(p, g))
    scalar = scalar_multiply(total, 0.5 / normalizer)
    return LossValue(scalar, {"chamfer": float(scalar.values.reshape(()))})


def completion_loss(y_m, x_m, y_fm, x_fm) -> LossValue:
    """Missing-region Chamfer plus the auxiliary frame+missing Chamfer.
    Each term is normalized by its ground-truth cardinality; the prediction
    of the auxiliary head may hold more rows than the ground truth."""
    x_m_t, x_fm_t = _as_tensor(x_m), _as_tensor(x_fm)
    m = x_m_t.shape[0]
    mf = x_fm_t.shape[0]
    missing = chamfer(y_m, x_m_t, normalizer=m)
    frame = chamfer(y_fm, x_fm_t, normalizer=mf)
    scalar = add(missing.scalar, frame.scalar)
    return LossValue(scalar, {
        "total": float(scalar.values.reshape(())),
        "missing": missing.item(),
        "frame": frame.item(),
    })


def nt_xent_grouped(embeddings, group_size: int, tau: float) -> LossValue:
    """Grouped normalized temperature-scaled cross entropy.

    Rows are L2-normalized; each consecutive block of ``group_size`` rows is
    one positive group. For anchor i the positives are its group mates and
    the denominator runs over all other rows of the batch. The result is the
    mean over anchors.
    """
    z = _as_tensor(embeddings)
    if z.values.ndim != 2:
        raise ShapeMismatchError(f"nt_xent_grouped: expected B x E, got {z.shape}")
    b, _ = z.shape
    g = int(group_size)
    if g < 2:
        raise ValueError("nt_xent_grouped: group_size must be >= 2")
    if b % g != 0:
        raise ValueError(
            f"nt_xent_grouped: batch size {b} not divisible by group size {g}")
    if tau <= 0:
        raise ValueError("nt_xent_grouped: tau must be positive")
    norms_sq = np.einsum("ij,ij->i", z.values, z.values)
    if np.any(norms_sq == 0.0):
        raise ValueError("nt_xent_grouped: zero-norm embedding row")

    # unit-normalize rows: x / sqrt(sum x^2), sqrt via exp(log(.)/2)
    sq = sum_reduce(multiply(z, z), axis=1, keepdims=True)
    inv_norm = exp(scalar_multiply(log(sq), -0.5))
    zn = multiply(z, broadcast_to(inv_norm, z.shape))

    sim = matmul(zn, transpose(zn))  # cosine similarities [B, B]
    scaled = scalar_multiply(sim, 1.0 / tau)

    off_diag = 1.0 - np.eye(b)
    group_ids = np.repeat(np.arange(b // g), g)
    pos_mask = (group_ids[:, None] == group_ids[None, :]).astype(float) * off_diag

    # |sim|/tau <= 1/tau, so the plain exp-sum is already well conditioned
    denom = log(sum_reduce(multiply(exp(scaled), Tensor(off_diag)), axis=1))  # [B]
    pos_sum = sum_reduce(multiply(scaled, Tensor(pos_mask)), axis=1)  # [B]
    per_anchor = subtract(scalar_multiply(pos_sum, 1.0 / (g - 1)), denom)
    scalar = scalar_multiply(mean_reduce(per_anchor, 0), -1.0)
    return LossValue(scalar, {"nt_xent": float(scalar.values.reshape(()))})


def cross_entropy(logits, labels) -> LossValue:
    """Mean negative log softmax probability of the true class, stabilized
    by max subtraction."""
    lg = _as_tensor(logits)
    if lg.values.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy: expected B x C, got {lg.shape}")
    b, c = lg.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (b,):
        raise ShapeMismatchError(
            f"cross_entropy: {b} logit rows vs {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")

    shift = Tensor(lg.values.max(axis=1, keepdims=True))  # constant shift
    shifted = subtract(lg, broadcast_to(shift, lg.shape))
    lse = log(sum_reduce(exp(shifted), axis=1))  # [B]
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = sum_reduce(multiply(shifted, Tensor(onehot)), axis=1)  # [B]
    scalar = mean_reduce(subtract(lse, picked), 0)
    return LossValue(scalar, {"cross_entropy": float(scalar.values.reshape(()))})
