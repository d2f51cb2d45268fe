"""Training objectives: bidirectional contrastive loss, multi-label focal
loss, and their weighted combination.

The contrastive loss matches each clip's audio embedding to its own video
embedding against the other clips in the batch, in both directions.  Note the
denominator sums only over the negatives (j != i) -- there is no positive
term in it -- so the loss can go below zero once positives dominate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# keeps log() away from 0 when rows are normalized; squared-norm floor
_NORM_FLOOR = 1e-24
# clamp for focal probabilities
_PT_EPS = 1e-7
# additive logit mask that the row softmax/logsumexp maps to an exact zero
_NEG_MASK = -1e30


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    temperature: float = 0.1
    omega_fl: float = 1.0
    omega_cl: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.temperature <= 0:
            raise LossConfigError(f"temperature must be positive, got {self.temperature}")
        if self.omega_fl < 0 or self.omega_cl < 0:
            raise LossConfigError("loss weights must be non-negative")
        if self.focal_gamma < 0:
            raise LossConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not (0 < self.focal_alpha <= 1):
            raise LossConfigError(f"focal_alpha must be in (0, 1], got {self.focal_alpha}")


def _normalize_rows(x: Tensor) -> Tensor:
    """Divide each row by its Euclidean norm (floored to avoid a zero split)."""
    n, m = x.shape
    ones_col = Tensor(np.ones((m, 1), dtype=x.dtype))
    ones_row = Tensor(np.ones((1, m), dtype=x.dtype))
    sq_norm = T.matmul(T.mul_elementwise(x, x), ones_col)  # (n, 1)
    inv_norm = T.exp(T.scale(T.log(T.clip(sq_norm, _NORM_FLOOR, None)), -0.5))
    return T.mul_elementwise(x, T.matmul(inv_norm, ones_row))


def cosine_matrix(x_a: Tensor, x_v: Tensor) -> Tensor:
    """All pairwise cosine similarities: entry (i, j) = cos(x_a[i], x_v[j])."""
    if x_a.shape != x_v.shape or x_a.ndim != 2:
        raise T.ShapeError("cosine_matrix", [x_a.shape, x_v.shape], "expected matching (B, h) matrices")
    return T.matmul(_normalize_rows(x_a), T.transpose(_normalize_rows(x_v)))


def contrastive_loss(x_audio: Tensor, x_video: Tensor, temperature: float) -> Tensor:
    """Sum of the video->audio and audio->video clip-matching losses.

    Each direction is -mean_i [ cos(pos_i)/t - logsumexp_{j != i} cos(neg_ij)/t ].
    Requires at least two clips so every positive has a negative.
    """
    if temperature <= 0:
        raise LossConfigError(f"temperature must be positive, got {temperature}")
    b = x_audio.shape[0]
    if b < 2:
        raise LossConfigError("contrastive loss undefined for batch < 2")

    sim = T.scale(cosine_matrix(x_audio, x_video), 1.0 / temperature)  # (B, B)
    dtype = sim.dtype
    eye = Tensor(np.eye(b, dtype=dtype))
    ones_col = Tensor(np.ones((b, 1), dtype=dtype))
    diag = T.matmul(T.mul_elementwise(sim, eye), ones_col)  # (B, 1) positives
    mask = Tensor(np.where(np.eye(b, dtype=bool), dtype.type(_NEG_MASK), dtype.type(0.0)))

    loss_v_to_a = T.scale(T.mean_all(T.sub(diag, T.logsumexp_rows(T.add(sim, mask)))), -1.0)
    loss_a_to_v = T.scale(T.mean_all(T.sub(diag, T.logsumexp_rows(T.add(T.transpose(sim), mask)))), -1.0)
    return T.add(loss_v_to_a, loss_a_to_v)


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float, alpha: float) -> Tensor:
    """Mean over batch x classes of -alpha * (1 - p_t)^gamma * log(p_t).

    ``labels`` is a {0,1} matrix; p_t is the predicted probability of the
    true side, clamped to [1e-7, 1 - 1e-7].  gamma=0, alpha=1 reduces to
    plain binary cross-entropy.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise T.ShapeError("focal_loss", [logits.shape, labels.shape], "labels must match logits")
    if not np.isin(labels, (0, 1)).all():
        raise LossConfigError("labels must be binary 0/1")

    dtype = logits.dtype
    y = Tensor(labels.astype(dtype))
    ones = Tensor(np.ones(logits.shape, dtype=dtype))
    p = T.sigmoid(logits)
    p_t = T.add(T.mul_elementwise(y, p), T.mul_elementwise(T.sub(ones, y), T.sub(ones, p)))
    p_t = T.clip(p_t, _PT_EPS, 1.0 - _PT_EPS)
    log_p_t = T.log(p_t)
    if gamma == 0.0:
        weighted = log_p_t
    else:
        modulator = T.exp(T.scale(T.log(T.sub(ones, p_t)), gamma))  # (1 - p_t)^gamma
        weighted = T.mul_elementwise(modulator, log_p_t)
    return T.scale(T.mean_all(weighted), -alpha)


def total_loss(loss_focal: Tensor, loss_contrastive: Tensor | None, cfg: LossConfig) -> Tensor:
    """omega_fl * focal + omega_cl * contrastive (contrastive may be absent)."""
    combined = T.scale(loss_focal, cfg.omega_fl)
    if loss_contrastive is not None:
        combined = T.add(combined, T.scale(loss_contrastive, cfg.omega_cl))
    return combined
