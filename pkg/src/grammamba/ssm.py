"""Selective state-space encoder.

Each block projects its input to an inner width, runs a diagonal selective
scan whose step size and input/output vectors depend on the current input,
gates the result with a silu branch and projects to the feature width.

Continuous dynamics per state coordinate s are ``h' = F_s h + G_s x`` with
``F_s = -exp(a_log_s) < 0``. Zero-order hold with step ``dt`` gives

    F_bar = exp(dt * F)
    G_bar = (exp(dt * F) - 1) / (dt * F) * dt * G

and the recurrence ``h_t = F_bar h_{t-1} + G_bar x_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .lora import LoraAdapter, lora_linear
from .tensor import Tensor

# below this |dt*F| the closed form is replaced by its series
SERIES_THRESHOLD = 1e-4
_DPHI_THRESHOLD = 1e-3


def phi_series(x: np.ndarray) -> np.ndarray:
    """Truncated Taylor series of :func:`phi` about 0 (error below x**4 / 100)."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 + x / 2.0 + x * x / 6.0 + x ** 3 / 24.0


def phi(x: np.ndarray) -> np.ndarray:
    """``(exp(x) - 1) / x`` with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, x)
    return np.where(small, phi_series(x), np.expm1(safe) / safe)


def dphi(x: np.ndarray) -> np.ndarray:
    """Derivative of :func:`phi`."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < _DPHI_THRESHOLD
    safe = np.where(small, 1.0, x)
    out = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + x / 3.0 + x * x / 8.0 + x ** 3 / 30.0
    return np.where(small, series, out)


def zoh_discretize(F_diag: Tensor, G_vec: Tensor, delta) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization of a diagonal continuous system.

    ``delta`` may be a positive float or a single-element tensor (in which
    case it is differentiated too).
    """
    F_diag, G_vec = T.as_tensor(F_diag), T.as_tensor(G_vec)
    if F_diag.shape != G_vec.shape:
        raise DimensionError(f"zoh_discretize: F {F_diag.shape} vs G {G_vec.shape}")
    dt_t = T.as_tensor(delta)
    if dt_t.data.size != 1:
        raise DimensionError("zoh_discretize: delta must be a scalar")
    dt = float(dt_t.data.reshape(-1)[0])
    if not dt > 0.0:
        raise DomainError(f"zoh_discretize: delta must be positive, got {dt}")
    f, g = F_diag.data, G_vec.data
    x = dt * f
    a_bar = np.exp(x)
    ph = phi(x)
    g_bar = ph * dt * g

    def bw_a(ga):
        gx = ga * a_bar
        return gx * dt, None, np.asarray(np.sum(gx * f)).reshape(dt_t.shape)

    def bw_g(gg):
        dp = dphi(x)
        gf = gg * dp * dt * g * dt
        gG = gg * ph * dt
        gd = np.sum(gg * (dp * f * dt * g + ph * g))
        return gf, gG, np.asarray(gd).reshape(dt_t.shape)

    inputs = (F_diag, G_vec, dt_t)
    return T.make_op(a_bar, inputs, bw_a, "zoh_F"), T.make_op(g_bar, inputs, bw_g, "zoh_G")


def run_recurrence(a_bar: np.ndarray, gu: np.ndarray) -> np.ndarray:
    """Unroll ``h_t = a_bar_t * h_{t-1} + gu_t`` from ``h_{-1} = 0`` along axis 1."""
    h = np.empty_like(gu)
    L = gu.shape[1]
    h[:, 0] = gu[:, 0]
    for t in range(1, L):
        np.multiply(a_bar[:, t], h[:, t - 1], out=h[:, t])
        h[:, t] += gu[:, t]
    return h


def ssm_scan(u: Tensor, dt: Tensor, Bm: Tensor, Cm: Tensor, a_log: Tensor) -> Tensor:
    """Fused selective scan.

    Shapes: ``u [B, L, D]``, ``dt [B, L]`` (positive), ``Bm, Cm [B, L, n]``,
    ``a_log [n]``. Returns ``y [B, L, D]`` with ``y_t = sum_s C_ts h_t[:, s]``.
    Cost is linear in L.
    """
    ud, dtd, bd, cd = u.data, dt.data, Bm.data, Cm.data
    if ud.ndim != 3:
        raise DimensionError(f"ssm_scan: u must be [B, L, D], got {ud.shape}")
    nb, L, D = ud.shape
    n = a_log.shape[0]
    if L == 0:
        raise ContractError("ssm_scan: empty sequence")
    if dtd.shape != (nb, L) or bd.shape != (nb, L, n) or cd.shape != (nb, L, n):
        raise DimensionError(
            f"ssm_scan: inconsistent shapes u={ud.shape} dt={dtd.shape} B={bd.shape} C={cd.shape} n={n}")
    Fd = -np.exp(a_log.data)
    x = dtd[:, :, None] * Fd
    a_bar = np.exp(x)
    ph = phi(x)
    g_bar = ph * dtd[:, :, None] * bd
    A4 = a_bar[:, :, None, :]
    H = run_recurrence(np.broadcast_to(A4, (nb, L, D, n)), g_bar[:, :, None, :] * ud[:, :, :, None])
    y = np.einsum("btds,bts->btd", H, cd)

    def bw(gy):
        direct = gy[:, :, :, None] * cd[:, :, None, :]
        GH = np.empty_like(H)
        GH[:, L - 1] = direct[:, L - 1]
        for t in range(L - 2, -1, -1):
            np.multiply(A4[:, t + 1], GH[:, t + 1], out=GH[:, t])
            GH[:, t] += direct[:, t]
        gC = np.einsum("btd,btds->bts", gy, H)
        g_a = np.zeros_like(a_bar)
        if L > 1:
            g_a[:, 1:] = np.einsum("btds,btds->bts", GH[:, 1:], H[:, :-1])
        g_g = np.einsum("btds,btd->bts", GH, ud)
        gu = np.einsum("btds,bts->btd", GH, g_bar)
        gx = g_a * a_bar + g_g * dtd[:, :, None] * bd * dphi(x)
        gdt = np.sum(g_g * ph * bd + gx * Fd, axis=2)
        gB = g_g * ph * dtd[:, :, None]
        gF = np.sum(gx * dtd[:, :, None], axis=(0, 1))
        return gu, gdt, gB, gC, gF * Fd

    return T.make_op(y, (u, dt, Bm, Cm, a_log), bw, "ssm_scan")


@dataclass
class MambaBlockParams:
    """Parameters of one selective-scan block (weights stored ``[out, in]``)."""

    in_w: Tensor
    in_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    delta_w: Tensor
    delta_b: Tensor
    B_w: Tensor
    B_b: Tensor
    C_w: Tensor
    C_b: Tensor
    a_log: Tensor
    out_w: Tensor
    out_b: Tensor

    @property
    def in_channels(self) -> int:
        return self.in_w.shape[1]

    @property
    def inner_dim(self) -> int:
        return self.in_w.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.out_w.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            "proj_in.weight": self.in_w, "proj_in.bias": self.in_b,
            "gate_proj.weight": self.gate_w, "gate_proj.bias": self.gate_b,
            "proj_delta.weight": self.delta_w, "proj_delta.bias": self.delta_b,
            "proj_B.weight": self.B_w, "proj_B.bias": self.B_b,
            "proj_C.weight": self.C_w, "proj_C.bias": self.C_b,
            "a_log": self.a_log,
            "proj_out.weight": self.out_w, "proj_out.bias": self.out_b,
        }

    def state_matrix(self) -> np.ndarray:
        """Diagonal of the continuous state matrix F."""
        return -np.exp(self.a_log.data)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_block(in_channels: int, inner_dim: int, state_dim: int, feature_dim: int,
               rng: np.random.Generator, delta_init: float = 0.05) -> MambaBlockParams:
    D, n, c, k = inner_dim, state_dim, in_channels, feature_dim
    p = lambda arr: Tensor(arr, requires_grad=True)  # noqa: E731
    return MambaBlockParams(
        in_w=p(_uniform(rng, (D, c), c)), in_b=p(np.zeros(D)),
        gate_w=p(_uniform(rng, (D, c), c)), gate_b=p(np.zeros(D)),
        delta_w=p(_uniform(rng, (1, D), D)),
        # softplus(bias) == delta_init
        delta_b=p(np.array([math.log(math.expm1(delta_init))])),
        B_w=p(_uniform(rng, (n, D), D)), B_b=p(np.zeros(n)),
        C_w=p(_uniform(rng, (n, D), D)), C_b=p(np.zeros(n)),
        a_log=p(np.log(np.geomspace(1.0, float(n), n))),
        out_w=p(_uniform(rng, (k, D), D)), out_b=p(np.zeros(k)),
    )


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [L, C] or [B, L, C], got {x.shape}")
    return x, False


def selective_scan(x_inner: Tensor, params: MambaBlockParams) -> Tensor:
    """Input-dependent scan over ``x_inner`` of shape ``[L, D]`` or ``[B, L, D]``."""
    xb, squeeze = _batched(x_inner)
    nb, L, D = xb.shape
    if L == 0:
        raise ContractError("selective_scan: empty sequence")
    if D != params.inner_dim:
        raise DimensionError(f"selective_scan: inner width {D} != {params.inner_dim}")
    dt = T.softplus(T.reshape(T.linear(xb, params.delta_w, params.delta_b), (nb, L)))
    Bm = T.linear(xb, params.B_w, params.B_b)
    Cm = T.linear(xb, params.C_w, params.C_b)
    y = ssm_scan(xb, dt, Bm, Cm, params.a_log)
    return T.reshape(y, (L, D)) if squeeze else y


def block_mix(x: Tensor, params: MambaBlockParams) -> Tensor:
    """Everything in a block up to (not including) the output projection."""
    if x.shape[-1] != params.in_channels:
        raise DimensionError(f"block input has {x.shape[-1]} channels, expected {params.in_channels}")
    u = T.linear(x, params.in_w, params.in_b)
    gate = T.silu(T.linear(x, params.gate_w, params.gate_b))
    s = selective_scan(u, params)
    return T.add(T.mul(s, gate), u)


def mamba_block_forward(x: Tensor, params: MambaBlockParams) -> Tensor:
    """``[.., L, channels] -> [.., L, feature_dim]``."""
    return T.linear(block_mix(x, params), params.out_w, params.out_b)


@dataclass
class EncodedFeature:
    raw: Tensor
    modality_id: int = 0


def encode_modality(x: Tensor, blocks: Sequence[MambaBlockParams] | MambaBlockParams,
                    adapter: Optional[LoraAdapter] = None, modality_id: int = 0) -> EncodedFeature:
    """Mean-pooled encoder output.

    The last block's output projection is applied after pooling (identical by
    linearity), which is where the modality's adapter sits.
    """
    if isinstance(blocks, MambaBlockParams):
        blocks = [blocks]
    h = x
    for blk in blocks[:-1]:
        h = mamba_block_forward(h, blk)
    last = blocks[-1]
    pooled = T.mean(block_mix(h, last), axis=-2)
    raw = lora_linear(pooled, last.out_w, last.out_b, adapter)
    return EncodedFeature(raw=raw, modality_id=modality_id)
