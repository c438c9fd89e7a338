"""Attribute classification loss and angular-margin prototype loss.

The prototype loss scores a feature against every prototype in the episode by
cosine similarity, scales by ``r`` and adds an angular margin ``d`` to the
target angle only::

    logit_y = r * cos(theta_y + d),   logit_l = r * cos(theta_l)  (l != y)

followed by softmax cross-entropy.  With ``d = 0`` the target logit is
exactly ``r * cos(theta_y)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateInputError, DimensionError, Tensor

PROB_EPS = 1e-7
COS_EPS = 1e-7
STABILITY_MODES = ("arcface-fallback", "strict")


@dataclass(frozen=True)
class DcmConfig:
    r: float = 32.0
    d: float = 0.2
    stability: str = "arcface-fallback"

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"feature scale r must be > 0, got {self.r}")
        if not 0 <= self.d < math.pi / 2:
            raise ValueError(f"angular margin d must lie in [0, pi/2), got {self.d}")
        if self.stability not in STABILITY_MODES:
            raise ValueError(f"unknown stability mode {self.stability!r}")


@dataclass
class EpisodeBatch:
    """Loss inputs for one episode.  ``labels`` index rows of ``prototypes``."""

    features: Tensor  # B x C
    labels: np.ndarray  # B
    prototypes: Tensor  # N x C
    attribute_targets: Optional[np.ndarray] = None  # B x Q, binary
    scores: Optional[Tensor] = None  # B x Q
    prototype_ids: Optional[Sequence] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        n = self.prototypes.shape[0]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n):
            raise ValueError(f"labels must index the {n} episode prototypes")


def cea_loss(p: Tensor, targets) -> Tensor:
    """Binary cross-entropy summed over attributes, averaged over the batch."""
    t = np.asarray(targets, dtype=p.dtype)
    if t.shape != p.shape:
        raise DimensionError(f"targets {t.shape} do not match scores {p.shape}")
    if np.any((t != 0) & (t != 1)):
        raise ValueError("attribute targets must be 0 or 1")
    pc = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    ll = ad.log(pc) * t + ad.log(1.0 - pc) * (1.0 - t)
    per_sample = ad.tensor_sum(ll, axis=-1)
    return -ad.mean(per_sample) if per_sample.ndim else -per_sample


def _check_norms(x: np.ndarray, what: str, ids=None) -> None:
    norms = np.sqrt((np.asarray(x, dtype=np.float64) ** 2).sum(axis=-1))
    bad = np.flatnonzero(np.atleast_1d(norms) <= ad.NORM_EPS)
    if bad.size:
        names = [ids[i] for i in bad] if ids is not None else bad.tolist()
        raise DegenerateInputError(f"zero-norm {what}: {names[:10]}")


def cosine_angles(v: Tensor, M: Tensor, ids=None) -> Tensor:
    """Cosine of the angle between each feature row and each prototype, clamped off +-1."""
    single = v.ndim == 1
    if single:
        v = v.reshape(1, -1)
    if v.shape[-1] != M.shape[-1]:
        raise DimensionError(f"feature width {v.shape[-1]} != prototype width {M.shape[-1]}")
    _check_norms(v.data, "feature")
    _check_norms(M.data, "prototype for identity", ids)
    cos = ad.matmul(ad.l2_normalize(v), ad.transpose(ad.l2_normalize(M)))
    cos = ad.clip(cos, -1.0 + COS_EPS, 1.0 - COS_EPS)
    return cos.reshape(-1) if single else cos


def margin_logits(cos: Tensor, labels, cfg: DcmConfig) -> Tensor:
    """Scaled logits with the additive angular margin on each row's target column."""
    single = cos.ndim == 1
    if single:
        cos = cos.reshape(1, -1)
    y = np.asarray(labels, dtype=np.intp).reshape(-1, 1)
    if y.shape[0] != cos.shape[0]:
        raise DimensionError(f"{y.shape[0]} labels for {cos.shape[0]} rows")
    cos_y = ad.take_along(cos, y, axis=1)
    sin_y = ad.sqrt(1.0 - cos_y * cos_y)
    target = (cos_y * math.cos(cfg.d) - sin_y * math.sin(cfg.d)) * cfg.r
    if cfg.stability == "arcface-fallback":
        # theta_y + d past pi: cos(theta + d) stops decreasing in theta
        past = cos_y.data <= math.cos(math.pi - cfg.d)
        if np.any(past):
            target = ad.where(past, (cos_y - cfg.d * math.sin(cfg.d)) * cfg.r, target)
    onehot = np.zeros(cos.shape, dtype=cos.dtype)
    np.put_along_axis(onehot, y, 1.0, axis=1)
    logits = cos * cfg.r + ad.Tensor(onehot) * (target - cos_y * cfg.r)
    return logits.reshape(-1) if single else logits


def dcm_probability(cosines, y, cfg: DcmConfig) -> np.ndarray:
    """Class probabilities under the margin softmax (``N`` or ``B x N``).

    Cosines are clamped off +-1 as in ``cosine_angles`` (a no-op on its output).
    """
    raw = cosines.data if isinstance(cosines, Tensor) else np.asarray(cosines, dtype=np.float64)
    cos = Tensor(np.clip(raw, -1.0 + COS_EPS, 1.0 - COS_EPS))
    single = cos.ndim == 1
    labels = np.atleast_1d(np.asarray(y))
    logits = margin_logits(cos, labels, cfg).data
    logits = logits.reshape(1, -1) if single else logits
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def dcm_loss_from_cosines(cos: Tensor, labels, cfg: DcmConfig) -> Tensor:
    logits = margin_logits(cos, labels, cfg)
    y = np.asarray(labels, dtype=np.intp).reshape(-1, 1)
    target = ad.take_along(logits, y, axis=1).reshape(-1)
    return ad.mean(ad.logsumexp(logits, axis=1) - target)


def dcm_loss(batch: EpisodeBatch, cfg: DcmConfig) -> Tensor:
    """Mean negative log-probability of each sample's own prototype."""
    cos = cosine_angles(batch.features, batch.prototypes, batch.prototype_ids)
    return dcm_loss_from_cosines(cos, batch.labels, cfg)


@dataclass
class LossTerms:
    total: Tensor
    cea: Tensor
    dcm: Tensor


def total_loss(batch: EpisodeBatch, cfg: DcmConfig, cea_weight: float = 1.0, dcm_weight: float = 1.0) -> LossTerms:
    """``cea_weight * CEA + dcm_weight * DCM``; both terms are always evaluated and reported."""
    if batch.scores is None or batch.attribute_targets is None:
        raise ValueError("total_loss needs attribute scores and targets")
    cea = cea_loss(batch.scores, batch.attribute_targets)
    dcm = dcm_loss(batch, cfg)
    total = cea * cea_weight + dcm * dcm_weight
    return LossTerms(total, cea, dcm)
