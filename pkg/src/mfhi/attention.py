"""Semantics-guided spatial attention.

An attribute classifier on pooled features gives per-attribute confidences.
Its weight rows double as channel weights for per-attribute activation maps;
the maps of the most confident attributes are max-aggregated into a spatial
attention map that re-weights the feature map residually before pooling.

All functions accept a single ``C x H x W`` map or a batch ``B x C x H x W``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .tensor_io import write_tensor

ATTENTION_EPS = 1e-8


@dataclass
class ApmParams:
    weight: Tensor  # Q x C
    bias: Optional[Tensor] = None  # Q

    @property
    def num_attributes(self) -> int:
        return self.weight.shape[0]

    @property
    def channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class AttentionOutput:
    scores: Tensor
    selected: Optional[np.ndarray]
    attention: Optional[Tensor]
    fused: Tensor
    feature: Tensor


def _check_map(F: Tensor, params: ApmParams) -> None:
    if F.ndim not in (3, 4):
        raise DimensionError(f"feature map must be C x H x W (optionally batched), got {F.shape}")
    if F.shape[-3] != params.channels:
        raise DimensionError(f"feature map has {F.shape[-3]} channels, classifier expects {params.channels}")


def apm_scores(F: Tensor, params: ApmParams) -> Tensor:
    """Sigmoid attribute confidences from the pooled feature map."""
    _check_map(F, params)
    pooled = ad.gap(F)
    single = pooled.ndim == 1
    if single:
        pooled = pooled.reshape(1, -1)
    logits = ad.matmul(pooled, ad.transpose(params.weight))
    if params.bias is not None:
        logits = logits + params.bias
    p = ad.sigmoid(logits)
    return p.reshape(-1) if single else p


def all_cams(F: Tensor, weight: Tensor) -> Tensor:
    """Activation maps of every attribute: ``(B x) Q x H x W``."""
    c, h, w = F.shape[-3:]
    flat = F.reshape(F.shape[:-2] + (h * w,))
    maps = ad.matmul(weight, flat)
    return maps.reshape(maps.shape[:-1] + (h, w))


def cam(F: Tensor, params: ApmParams, i: int) -> Tensor:
    """Channel-weighted sum of ``F`` with classifier row ``i``; may be negative."""
    _check_map(F, params)
    if not 0 <= i < params.num_attributes:
        raise IndexError(f"attribute index {i} outside [0, {params.num_attributes})")
    row = ad.take_rows(params.weight, [i])
    return all_cams(F, row).reshape(F.shape[:-3] + F.shape[-2:])


def select_top_d(p, D: int) -> np.ndarray:
    """Indices of the ``D`` largest scores, ties by ascending index.

    ``p`` may be a vector (returns ``D`` indices) or a ``B x Q`` matrix.
    """
    scores = np.asarray(p.data if isinstance(p, Tensor) else p)
    q = scores.shape[-1]
    if not 1 <= D <= q:
        raise ValueError(f"D={D} outside [1, {q}]")
    if scores.ndim == 1:
        return np.lexsort((np.arange(q), -scores))[:D]
    return np.stack([np.lexsort((np.arange(q), -row))[:D] for row in scores])


def attention_map(cams: Union[Tensor, Sequence[Tensor]], normalize: bool = True) -> Tensor:
    """Pointwise max over ``D`` activation maps, then rectify and scale to [0, 1].

    ``cams`` is either a list of ``H x W`` maps or a tensor ``(B x) D x H x W``.
    Returns ``(B x) 1 x H x W``.  With ``normalize=False`` the raw max is kept.
    """
    if not isinstance(cams, Tensor):
        if len(cams) == 0:
            raise ValueError("attention_map needs at least one activation map")
        cams = ad.stack(list(cams), axis=0)
    if cams.ndim not in (3, 4):
        raise DimensionError(f"expected (B x) D x H x W maps, got {cams.shape}")
    raw = ad.amax(cams, axis=-3, keepdims=True)
    if not normalize:
        return raw
    rect = ad.relu(raw)
    h, w = rect.shape[-2:]
    flat = rect.reshape(rect.shape[:-2] + (h * w,))
    peak = ad.amax(flat, axis=-1, keepdims=True).reshape(rect.shape[:-2] + (1, 1))
    return rect / (peak + ATTENTION_EPS)


def fuse(F: Tensor, M: Tensor) -> Tensor:
    """``F * M + F`` with ``M`` broadcast over channels."""
    if F.shape[-2:] != M.shape[-2:] or M.shape[-3] != 1:
        raise DimensionError(f"attention {M.shape} does not match feature map {F.shape}")
    return F * M + F


def visual_feature(
    F: Tensor,
    params: ApmParams,
    D: int,
    normalize: bool = True,
    attention: bool = True,
) -> AttentionOutput:
    """Scores, Top-D selection, attention, fused map and pooled feature.

    With ``attention=False`` the attention flow is skipped and the feature is
    plain global pooling of ``F``; scores are still produced.
    """
    scores = apm_scores(F, params)
    if not attention:
        return AttentionOutput(scores, None, None, F, ad.gap(F))
    selected = select_top_d(scores, D)
    maps = all_cams(F, params.weight)
    h, w = F.shape[-2:]
    if F.ndim == 3:
        chosen = ad.take_rows(maps, selected)
    else:
        b = F.shape[0]
        flat = maps.reshape(b, params.num_attributes, h * w)
        idx = np.broadcast_to(selected[:, :, None], (b, D, h * w))
        chosen = ad.take_along(flat, idx, axis=1).reshape(b, D, h, w)
    M = attention_map(chosen, normalize=normalize)
    fused = fuse(F, M)
    return AttentionOutput(scores, selected, M, fused, ad.gap(fused))


# ---------------------------------------------------------------------------
# Dumps


def render_pgm(M: np.ndarray) -> bytes:
    """8-bit binary PGM of a 2-D map, linearly scaled so its range spans 0..255."""
    m = np.asarray(M, dtype=np.float64).reshape(M.shape[-2:])
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def dump_attention(out_dir, image_id: int, scores: np.ndarray, selected: np.ndarray, M: np.ndarray) -> list:
    """Write ``<id>.txt`` header, ``<id>.mft`` map and ``<id>.pgm`` rendering."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{int(image_id):06d}"
    lines = [
        f"image_id\t{int(image_id)}",
        "selected\t" + ",".join(str(int(i)) for i in selected),
        "scores\t" + ",".join(repr(float(scores[i])) for i in selected),
        f"map\t{stem}.mft",
    ]
    txt = out / f"{stem}.txt"
    txt.write_text("\n".join(lines) + "\n")
    mft = write_tensor(out / f"{stem}.mft", np.asarray(M, dtype=np.float32).reshape((1,) + M.shape[-2:]))
    pgm = out / f"{stem}.pgm"
    pgm.write_bytes(render_pgm(M))
    return [txt, mft, pgm]
