"""Low-rank adapters and the missing-modality freeze protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError, ProtocolError
from .tensor import Tensor


@dataclass
class LoraAdapter:
    """Adds ``scaling * B @ A`` to a frozen ``[d_out, k_in]`` base weight."""

    base_layer_name: str
    A: Tensor
    B: Tensor
    scaling: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)

    def named(self) -> dict[str, Tensor]:
        return {"lora_A": self.A, "lora_B": self.B}

    def num_params(self) -> int:
        return self.A.size + self.B.size


def lora_init(d_out: int, k_in: int, r: int, seed: int = 0,
              base_layer_name: str = "", scaling: Optional[float] = None) -> LoraAdapter:
    if not 1 <= r <= min(d_out, k_in):
        raise DomainError(f"lora rank {r} must lie in [1, min({d_out}, {k_in})]")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(k_in)
    A = Tensor(rng.uniform(-bound, bound, size=(r, k_in)), requires_grad=False)
    B = Tensor(np.zeros((d_out, r)), requires_grad=False)
    return LoraAdapter(base_layer_name, A, B, 1.0 / r if scaling is None else float(scaling))


def lora_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor],
                adapter: Optional[LoraAdapter]) -> Tensor:
    base = T.linear(x, weight, bias)
    if adapter is None:
        return base
    if adapter.A.shape[1] != weight.shape[1] or adapter.B.shape[0] != weight.shape[0]:
        raise DimensionError(
            f"adapter {adapter.B.shape}x{adapter.A.shape} does not fit base weight {weight.shape}")
    low = T.linear(T.linear(x, adapter.A), adapter.B)
    return T.add(base, T.mul(low, adapter.scaling))


def lora_forward(W0: Tensor, adapter: LoraAdapter, x: Tensor) -> Tensor:
    """``W0 x + scaling * B A x`` for a single vector or a batch of row vectors."""
    W0, x = T.as_tensor(W0), T.as_tensor(x)
    if x.shape[-1] != W0.shape[1]:
        raise DimensionError(f"lora_forward: x {x.shape} vs W0 {W0.shape}")
    return lora_linear(x, W0, None, adapter)


def merge_adapter(W0: Tensor, adapter: LoraAdapter) -> Tensor:
    W0 = T.as_tensor(W0)
    if W0.shape != (adapter.out_features, adapter.in_features):
        raise DimensionError(f"merge_adapter: W0 {W0.shape} vs adapter "
                             f"({adapter.out_features}, {adapter.in_features})")
    return Tensor(W0.data + adapter.delta())


@dataclass
class FreezePlan:
    trainable_names: set = field(default_factory=set)
    frozen_names: set = field(default_factory=set)
    available_modalities: set = field(default_factory=set)

    def apply(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            p.requires_grad = name in self.trainable_names
            p.grad = None


def build_freeze_plan(model, available: Iterable[str]) -> FreezePlan:
    """Partition ``model`` parameters for missing-modality adaptation.

    All base weights and the adapters of absent modalities are frozen; the
    adapters of available modalities and the fusion adapter train.
    """
    available = set(available)
    if not available:
        raise ProtocolError("no modality to adapt with")
    unknown = available - set(model.modality_names)
    if unknown:
        raise ProtocolError(f"unknown modalities {sorted(unknown)}")
    params = model.named_parameters()
    trainable = set(model.adapter_param_names("fusion"))
    for m in available:
        trainable |= set(model.adapter_param_names(m))
    return FreezePlan(trainable, set(params) - trainable, available)


def trainable_fraction(model, plan: FreezePlan) -> float:
    params = model.named_parameters()
    total = sum(p.size for p in params.values())
    live = sum(params[n].size for n in plan.trainable_names)
    return live / total
