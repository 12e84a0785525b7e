"""Multimodal model: per-modality encoders, Gram alignment, concat fusion, head."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, ProtocolError
from .gram import GramMatrix, gram_det_loss, gram_matrix, l2_normalize
from .lora import LoraAdapter, lora_init, lora_linear
from .ssm import MambaBlockParams, encode_modality, init_block
from .tensor import Tensor

MODES = ("classification", "regression")


@dataclass
class ModalitySpec:
    name: str
    channels: int
    sample_rate: float = 100.0


@dataclass
class ModelConfig:
    modalities: list
    n_outputs: int
    mode: str = "classification"
    feature_dim: int = 16
    state_dim: int = 16
    inner_dim: Optional[int] = None
    depth: int = 2
    fusion_dim: int = 128
    lora_rank: int = 8
    lora_scaling: Optional[float] = None
    beta: float = 0.1
    delta_init: float = 0.05
    feature_bias_init: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m)
                           for m in self.modalities]
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.modalities) < 1:
            raise ConfigError("at least one modality is required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names {names}")
        for key in ("feature_dim", "state_dim", "depth", "fusion_dim", "lora_rank", "n_outputs"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.mode == "classification" and self.n_outputs < 2:
            raise ConfigError("classification needs n_outputs >= 2")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")

    def inner_for(self, channels: int) -> int:
        if self.inner_dim is not None:
            return int(self.inner_dim)
        return max(8, 8 * math.ceil(2 * channels / 8))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    prediction: Tensor
    gram: Optional[GramMatrix]
    normalized_features: dict
    partial: bool = False


class GramMambaModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        k, F = cfg.feature_dim, cfg.fusion_dim
        self.encoders: "OrderedDict[str, list[MambaBlockParams]]" = OrderedDict()
        for spec in cfg.modalities:
            D = cfg.inner_for(spec.channels)
            blocks = []
            for i in range(cfg.depth):
                c_in = spec.channels if i == 0 else k
                blocks.append(init_block(c_in, D, cfg.state_dim, k, rng, cfg.delta_init))
            # common offset keeps initial features of all modalities in one half-space
            blocks[-1].out_b.data[:] = cfg.feature_bias_init
            self.encoders[spec.name] = blocks
        N = len(cfg.modalities)
        b1 = 1.0 / math.sqrt(N * k)
        b2 = 1.0 / math.sqrt(F)
        p = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
        self.fc1_w = p(rng.uniform(-b1, b1, (F, N * k)))
        self.fc1_b = p(np.zeros(F))
        self.fc2_w = p(rng.uniform(-b2, b2, (F, F)))
        self.fc2_b = p(np.zeros(F))
        self.head_w = p(rng.uniform(-b2, b2, (cfg.n_outputs, F)))
        self.head_b = p(np.zeros(cfg.n_outputs))
        self.adapters: "OrderedDict[str, LoraAdapter]" = OrderedDict()
        for i, spec in enumerate(cfg.modalities):
            last = self.encoders[spec.name][-1]
            self.adapters[spec.name] = lora_init(
                k, last.inner_dim, cfg.lora_rank, seed=cfg.seed * 1000 + i + 1,
                base_layer_name=f"encoders.{spec.name}.{cfg.depth - 1}.proj_out",
                scaling=cfg.lora_scaling)
        self.adapters["fusion"] = lora_init(
            F, N * k, cfg.lora_rank, seed=cfg.seed * 1000, base_layer_name="fusion.fc1",
            scaling=cfg.lora_scaling)

    # ------------------------------------------------------------ parameters

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.config.modalities]

    @property
    def mode(self) -> str:
        return self.config.mode

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, blocks in self.encoders.items():
            for i, blk in enumerate(blocks):
                for pname, t in blk.named().items():
                    out[f"encoders.{name}.{i}.{pname}"] = t
        out["fusion.fc1.weight"] = self.fc1_w
        out["fusion.fc1.bias"] = self.fc1_b
        out["fusion.fc2.weight"] = self.fc2_w
        out["fusion.fc2.bias"] = self.fc2_b
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        for key, ad in self.adapters.items():
            for pname, t in ad.named().items():
                out[f"adapters.{key}.{pname}"] = t
        return out

    def adapter_param_names(self, key: str) -> list[str]:
        if key not in self.adapters:
            raise KeyError(key)
        return [f"adapters.{key}.lora_A", f"adapters.{key}.lora_B"]

    def base_param_names(self) -> list[str]:
        return [n for n in self.named_parameters() if not n.startswith("adapters.")]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters().items())

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise ContractError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        for n, p in self.named_parameters().items():
            p.requires_grad = n in names
            p.grad = None

    def reset_adapters(self) -> None:
        """Zero every adapter's B so adapters are no-ops again."""
        for ad in self.adapters.values():
            ad.B.data[...] = 0.0

    # ------------------------------------------------------------ forward

    def _check_batch(self, batch: Mapping[str, np.ndarray], names) -> int:
        sizes = set()
        for spec in self.config.modalities:
            if spec.name not in names:
                continue
            if spec.name not in batch:
                raise ContractError(f"batch lacks modality {spec.name!r}")
            x = np.asarray(batch[spec.name] if not isinstance(batch[spec.name], Tensor)
                           else batch[spec.name].data)
            if x.ndim != 3 or x.shape[2] != spec.channels:
                raise DimensionError(f"{spec.name}: expected [B, L, {spec.channels}], got {x.shape}")
            sizes.add(x.shape[0])
        if len(sizes) != 1:
            raise DimensionError(f"inconsistent batch sizes across modalities: {sorted(sizes)}")
        return sizes.pop()

    def _forward(self, batch, available: list[str], partial: bool) -> ForwardOutput:
        nb = self._check_batch(batch, available)
        k = self.config.feature_dim
        feats: "OrderedDict[str, Tensor]" = OrderedDict()
        slots = []
        for i, name in enumerate(self.modality_names):
            if name in available:
                x = T.as_tensor(batch[name])
                enc = encode_modality(x, self.encoders[name], self.adapters[name], modality_id=i)
                z = l2_normalize(enc.raw)
                feats[name] = z
                slots.append(z)
            else:
                slots.append(Tensor(np.zeros((nb, k))))
        gram = gram_matrix(list(feats.values())) if len(feats) >= 2 else None
        z_concat = T.concat(slots, axis=-1)
        h = T.silu(lora_linear(z_concat, self.fc1_w, self.fc1_b, self.adapters["fusion"]))
        h = T.silu(T.linear(h, self.fc2_w, self.fc2_b))
        pred = T.linear(h, self.head_w, self.head_b)
        return ForwardOutput(pred, gram, dict(feats), partial)


def forward_full(model: GramMambaModel, batch) -> ForwardOutput:
    missing = [n for n in model.modality_names if n not in batch]
    if missing:
        raise ContractError(f"forward_full: modalities {missing} absent; use forward_partial")
    return model._forward(batch, model.modality_names, partial=False)


def forward_partial(model: GramMambaModel, batch, available: Iterable[str]) -> ForwardOutput:
    """Forward pass with absent modalities replaced by zero feature slots."""
    available = [n for n in model.modality_names if n in set(available)]
    if not available:
        raise ProtocolError("forward_partial: no available modality")
    return model._forward(batch, available, partial=True)


def total_loss(out: ForwardOutput, y, beta: float, mode: str = "classification") -> Tensor:
    """Task loss plus ``beta`` times the mean per-sample Gram determinant.

    The alignment term is skipped for partial-modality outputs.
    """
    if beta < 0:
        raise ContractError("beta must be non-negative")
    y = np.asarray(y)
    if mode == "classification":
        if not np.issubdtype(y.dtype, np.integer) or y.ndim != 1:
            raise ContractError("classification loss needs a 1-D integer label array")
        task = T.softmax_cross_entropy(out.prediction, y)
    elif mode == "regression":
        if y.ndim != 2 or not np.issubdtype(y.dtype, np.floating):
            raise ContractError("regression loss needs a [B, d] float target array")
        task = T.squared_error(out.prediction, y)
    else:
        raise ContractError(f"unknown mode {mode!r}")
    if out.partial or out.gram is None or beta == 0.0:
        return task
    return T.add(task, T.mul(gram_det_loss(out.gram), beta))


def predict(model: GramMambaModel, batch, available: Optional[Iterable[str]] = None) -> np.ndarray:
    with T.no_grad():
        if available is None or set(available) == set(model.modality_names):
            out = forward_full(model, batch) if available is None else forward_partial(model, batch, available)
        else:
            out = forward_partial(model, batch, available)
    if model.mode == "classification":
        return np.argmax(out.prediction.data, axis=-1)
    return out.prediction.data.copy()
