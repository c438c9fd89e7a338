"""Identity prototypes from category-level attribute vectors (or classifier rows)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class MlpParams:
    w1: Tensor  # Q x hidden
    b1: Optional[Tensor]
    w2: Tensor  # hidden x C
    b2: Optional[Tensor]
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> list:
        return [t for t in (self.w1, self.b1, self.w2, self.b2) if t is not None]


@dataclass
class PrototypeSet:
    prototypes: Tensor  # N x C, unnormalized
    ids: list = field(default_factory=list)
    source: str = "plm"

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(self.prototypes.shape[0]))
        if len(self.ids) != self.prototypes.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {self.prototypes.shape[0]} prototypes")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("prototype ids must be unique")
        if self.source not in ("plm", "fc-weights"):
            raise ValueError(f"unknown prototype source {self.source!r}")

    def __len__(self) -> int:
        return len(self.ids)


def hidden_size_for(channels: int, num_attributes: int) -> int:
    """Default hidden width: half the feature size, but never a bottleneck below Q."""
    return max(channels // 2, num_attributes, 1)


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_mlp(num_attributes: int, hidden: int, channels: int, rng: np.random.Generator,
             dtype=np.float32, bias: bool = True, activation: str = "relu") -> MlpParams:
    w1 = Tensor(uniform_fan_in(rng, (num_attributes, hidden), num_attributes, dtype), requires_grad=True, name="plm.w1")
    b1 = Tensor(uniform_fan_in(rng, (hidden,), num_attributes, dtype), requires_grad=True, name="plm.b1") if bias else None
    w2 = Tensor(uniform_fan_in(rng, (hidden, channels), hidden, dtype), requires_grad=True, name="plm.w2")
    b2 = Tensor(uniform_fan_in(rng, (channels,), hidden, dtype), requires_grad=True, name="plm.b2") if bias else None
    return MlpParams(w1, b1, w2, b2, activation)


def category_attribute(image_attrs: Sequence) -> np.ndarray:
    """Coordinate-wise mean of one identity's image-level attribute vectors."""
    arr = np.asarray(image_attrs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("category_attribute needs a non-empty list of attribute vectors")
    if np.any((arr < 0) | (arr > 1)):
        raise ValueError("attribute entries must lie in [0, 1]")
    return arr.mean(axis=0)


def prototype(a_hat, params: MlpParams) -> Tensor:
    """Two-layer perceptron ``W2 . act(W1 . a + b1) + b2``; accepts ``Q`` or ``N x Q``."""
    a = a_hat if isinstance(a_hat, Tensor) else Tensor(np.asarray(a_hat, dtype=params.w1.dtype))
    single = a.ndim == 1
    if single:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.shape[1] != params.in_dim:
        raise DimensionError(f"attribute vector of width {a.shape[-1]} does not match MLP input {params.in_dim}")
    h = ad.matmul(a, params.w1)
    if params.b1 is not None:
        h = h + params.b1
    h = ad.activation(h, params.activation)
    m = ad.matmul(h, params.w2)
    if params.b2 is not None:
        m = m + params.b2
    return m.reshape(-1) if single else m


def fc_prototypes(weights: Tensor, ids: Optional[list] = None) -> PrototypeSet:
    """Classifier weight rows as prototypes, row ``j`` for identity ``ids[j]``."""
    if weights.ndim != 2:
        raise DimensionError(f"fc weights must be K x C, got {weights.shape}")
    return PrototypeSet(weights, list(ids) if ids is not None else [], source="fc-weights")
