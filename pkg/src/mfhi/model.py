"""Trainable parameter set and the batched forward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import ApmParams, AttentionOutput, visual_feature
from .autodiff import Tensor
from .prototypes import MlpParams, PrototypeSet, fc_prototypes, init_mlp, prototype, uniform_fan_in

MODES = ("i2a", "i2i")


@dataclass(frozen=True)
class ModelSpec:
    num_attributes: int
    channels: int
    hidden: int
    top_d: int
    mode: str = "i2a"
    num_classes: int = 0  # fc rows, i2i mode only
    attention: bool = True
    normalize_attention: bool = True
    mlp_activation: str = "relu"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.top_d <= self.num_attributes:
            raise ValueError(f"D={self.top_d} outside [1, {self.num_attributes}]")
        if self.mode == "i2i" and self.num_classes < 1:
            raise ValueError("i2i mode needs the number of seen identities")


class MfhiModel:
    """Attribute classifier plus either a prototype MLP (i2a) or fc prototypes (i2i).

    ``params`` maps stable names to leaf tensors; the order of the dict is the
    serialization order.
    """

    def __init__(self, spec: ModelSpec, params: dict):
        self.spec = spec
        self.params = params

    @classmethod
    def initialize(cls, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> "MfhiModel":
        Q, C = spec.num_attributes, spec.channels
        params = {
            "apm.weight": Tensor(uniform_fan_in(rng, (Q, C), C, dtype), requires_grad=True, name="apm.weight"),
            "apm.bias": Tensor(uniform_fan_in(rng, (Q,), C, dtype), requires_grad=True, name="apm.bias"),
        }
        if spec.mode == "i2a":
            mlp = init_mlp(Q, spec.hidden, C, rng, dtype, activation=spec.mlp_activation)
            params.update({"plm.w1": mlp.w1, "plm.b1": mlp.b1, "plm.w2": mlp.w2, "plm.b2": mlp.b2})
        else:
            params["fc.weight"] = Tensor(
                uniform_fan_in(rng, (spec.num_classes, C), C, dtype), requires_grad=True, name="fc.weight"
            )
        return cls(spec, params)

    @property
    def dtype(self):
        return self.params["apm.weight"].dtype

    @property
    def apm(self) -> ApmParams:
        return ApmParams(self.params["apm.weight"], self.params["apm.bias"])

    @property
    def mlp(self) -> Optional[MlpParams]:
        if "plm.w1" not in self.params:
            return None
        p = self.params
        return MlpParams(p["plm.w1"], p["plm.b1"], p["plm.w2"], p["plm.b2"], self.spec.mlp_activation)

    def embed(self, F, D: Optional[int] = None) -> AttentionOutput:
        F = F if isinstance(F, Tensor) else Tensor(np.asarray(F, dtype=self.dtype))
        return visual_feature(
            F,
            self.apm,
            self.spec.top_d if D is None else D,
            normalize=self.spec.normalize_attention,
            attention=self.spec.attention,
        )

    def prototypes(self, a_hat, ids=None) -> PrototypeSet:
        mlp = self.mlp
        if mlp is None:
            raise ValueError("this model has no prototype MLP (trained in i2i mode)")
        a = np.asarray(a_hat, dtype=self.dtype)
        return PrototypeSet(prototype(Tensor(a), mlp), list(ids) if ids is not None else [], "plm")

    def fc_rows(self, rows, ids=None) -> PrototypeSet:
        if "fc.weight" not in self.params:
            raise ValueError("this model has no fc prototypes (trained in i2a mode)")
        return fc_prototypes(ad.take_rows(self.params["fc.weight"], rows), ids)

    def spec_dict(self) -> dict:
        return asdict(self.spec)
