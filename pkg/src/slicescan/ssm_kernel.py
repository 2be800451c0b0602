"""State-space kernels.

The numpy functions (``zoh_discretize``, ``ssm_recurrence``,
``ssm_conv_kernel``, ``ssm_conv_apply``, ``selective_scan_reference``) are the
plain float64 reference forms. ``selective_scan`` is the torch version used by
the network; it is differentiable and vectorised over batch and channels, with
the time recurrence kept as an explicit loop.

The state matrix is diagonal and stored as ``a_log`` with ``A = -exp(a_log)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import NonFiniteError, ShapeError

TAYLOR_THRESHOLD = 1e-6


def _phi(x):
    """(exp(x) - 1) / x with a two-term series near zero."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < TAYLOR_THRESHOLD
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x / 2.0, np.expm1(safe) / safe)


def zoh_discretize(A_diag, B, delta, exact=True):
    """Zero-order-hold discretisation of a diagonal system.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (delta*A)^-1 (exp(delta*A) - 1) delta*B``. With ``exact=False``
    the first-order ``B_bar = delta*B`` is used instead.
    """
    A_diag = np.asarray(A_diag, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(~(delta > 0)):
        raise ValueError(f"delta must be positive, got {delta}")
    if not np.all(np.isfinite(A_diag)):
        raise ValueError("A_diag must be finite")
    dA = delta * A_diag
    A_bar = np.exp(dA)
    if exact:
        B_bar = _phi(dA) * delta * B
    else:
        B_bar = delta * B
    return A_bar, B_bar


def _per_step(arr, L, N, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim <= 1:
        arr = np.broadcast_to(arr, (N,)) if arr.ndim == 0 else arr
        return np.broadcast_to(arr, (L, arr.shape[0]))
    if arr.shape[0] != L:
        raise ShapeError(f"{name} has {arr.shape[0]} steps but the input has {L}")
    return arr


def ssm_recurrence(A_bar, B_bar, C, x, D=0.0):
    """Run ``h_t = A_bar_t * h_{t-1} + B_bar_t x_t``, ``y_t = <C_t, h_t> + D x_t`` from ``h = 0``.

    Parameters may be constant ``(N,)`` vectors or per-step ``(L, N)`` arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    N = max(np.atleast_1d(np.asarray(a)).shape[-1] for a in (A_bar, B_bar, C))
    Ab = _per_step(A_bar, L, N, "A_bar")
    Bb = _per_step(B_bar, L, N, "B_bar")
    Cc = _per_step(C, L, N, "C")
    h = np.zeros(Ab.shape[1])
    y = np.empty(L)
    for t in range(L):
        h = Ab[t] * h + Bb[t] * x[t]
        y[t] = Cc[t] @ h + D * x[t]
    return y


def ssm_conv_kernel(A_bar, B_bar, C, L):
    """``K[k] = <C, A_bar**k * B_bar>`` for k < L (time-invariant parameters)."""
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    A_bar = np.atleast_1d(np.asarray(A_bar, dtype=np.float64))
    B_bar = np.atleast_1d(np.asarray(B_bar, dtype=np.float64))
    C = np.atleast_1d(np.asarray(C, dtype=np.float64))
    powers = A_bar[None, :] ** np.arange(L)[:, None]
    return powers @ (B_bar * C)


def ssm_conv_apply(K, x):
    """Causal convolution ``y[t] = sum_{k<=t} K[k] x[t-k]``."""
    K = np.asarray(K, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if K.shape != x.shape:
        raise ShapeError(f"kernel length {K.shape} does not match input length {x.shape}")
    return np.convolve(x, K)[: x.shape[0]]


def softplus_np(z):
    return np.logaddexp(0.0, z)


def selective_scan_reference(weights: dict, x, exact=True, skip=True):
    """Channel-by-channel numpy selective scan, built from the reference ops.

    ``weights`` holds numpy arrays named like the ``S6`` parameters; ``x`` is
    ``(L, D)``.
    """
    x = np.asarray(x, dtype=np.float64)
    w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    L, Dc = x.shape
    delta = softplus_np(x @ w["dt_down"] @ w["dt_up"] + w["dt_bias"])
    Bt = x @ w["w_B"] + w["b_B"]
    Ct = x @ w["w_C"] + w["b_C"]
    A = -np.exp(w["a_log"])
    y = np.empty_like(x)
    for ch in range(Dc):
        A_bar = np.empty((L, A.shape[1]))
        B_bar = np.empty_like(A_bar)
        for t in range(L):
            A_bar[t], B_bar[t] = zoh_discretize(A[ch], Bt[t], delta[t, ch], exact=exact)
        y[:, ch] = ssm_recurrence(A_bar, B_bar, Ct, x[:, ch], D=w["D"][ch] if skip else 0.0)
    return y


@dataclass(frozen=True)
class S6Options:
    exact_zoh: bool = True
    use_skip: bool = True


def selective_scan(weights, x, options: S6Options = S6Options()):
    """Selective scan over ``x`` of shape ``(batch, L, D)``; returns the same shape.

    ``weights`` is an :class:`S6` module (or anything exposing its parameter
    attributes). Delta, B and C are computed per token from ``x``.
    """
    if x.dim() != 3 or x.shape[-1] != weights.a_log.shape[0]:
        raise ShapeError(
            f"selective_scan expects (batch, L, {weights.a_log.shape[0]}), got {tuple(x.shape)}"
        )
    nb, L, Dc = x.shape
    delta = F.softplus(x @ weights.dt_down @ weights.dt_up + weights.dt_bias)
    Bt = x @ weights.w_B + weights.b_B
    Ct = x @ weights.w_C + weights.b_C
    A = -torch.exp(weights.a_log)
    dA = delta.unsqueeze(-1) * A
    A_bar = torch.exp(dA)
    if options.exact_zoh:
        small = dA.abs() < TAYLOR_THRESHOLD
        safe = torch.where(small, torch.ones_like(dA), dA)
        phi = torch.where(small, 1.0 + dA / 2.0, torch.expm1(safe) / safe)
        B_bar = phi * delta.unsqueeze(-1) * Bt.unsqueeze(2)
    else:
        B_bar = delta.unsqueeze(-1) * Bt.unsqueeze(2)
    BX = B_bar * x.unsqueeze(-1)

    h = x.new_zeros(nb, Dc, A.shape[1])
    states = []
    # unbind keeps the backward linear in L (per-step indexing would not)
    for a_t, b_t in zip(A_bar.unbind(1), BX.unbind(1)):
        h = torch.addcmul(b_t, a_t, h)
        states.append(h)
    hs = torch.stack(states, dim=1)
    y = (hs * Ct.unsqueeze(2)).sum(-1)
    if options.use_skip:
        y = y + x * weights.D
    if not torch.isfinite(y).all():
        raise NonFiniteError("selective scan produced non-finite values")
    return y


def inverse_softplus(y):
    return y + math.log(-math.expm1(-y))


class S6(nn.Module):
    """Parameters of one selective SSM branch over ``d_inner`` channels."""

    def __init__(self, d_inner, state_dim, dt_rank=None, options: S6Options = S6Options()):
        super().__init__()
        self.d_inner = d_inner
        self.state_dim = state_dim
        self.dt_rank = dt_rank or math.ceil(d_inner / 16)
        self.options = options
        self.a_log = nn.Parameter(torch.empty(d_inner, state_dim))
        self.D = nn.Parameter(torch.empty(d_inner))
        self.dt_down = nn.Parameter(torch.empty(d_inner, self.dt_rank))
        self.dt_up = nn.Parameter(torch.empty(self.dt_rank, d_inner))
        self.dt_bias = nn.Parameter(torch.empty(d_inner))
        self.w_B = nn.Parameter(torch.empty(d_inner, state_dim))
        self.b_B = nn.Parameter(torch.empty(state_dim))
        self.w_C = nn.Parameter(torch.empty(d_inner, state_dim))
        self.b_C = nn.Parameter(torch.empty(state_dim))

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator):
        d, N = self.d_inner, self.state_dim
        self.a_log.copy_(torch.log(torch.arange(1, N + 1, dtype=torch.float64)).expand(d, N))
        self.D.fill_(1.0)
        _uniform(self.dt_down, d, generator)
        _uniform(self.dt_up, self.dt_rank, generator)
        lo, hi = math.log(1e-3), math.log(1e-1)
        u = torch.rand(d, generator=generator, dtype=torch.float64)
        dt = torch.exp(lo + (hi - lo) * u)
        self.dt_bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        _uniform(self.w_B, d, generator)
        self.b_B.zero_()
        _uniform(self.w_C, d, generator)
        self.b_C.zero_()

    def forward(self, x):
        return selective_scan(self, x, self.options)

    def numpy_weights(self):
        return {k: v.detach().cpu().double().numpy() for k, v in self.named_parameters()}


def _uniform(param, fan_in, generator):
    bound = 1.0 / math.sqrt(fan_in)
    vals = torch.rand(param.shape, generator=generator, dtype=torch.float64) * 2 * bound - bound
    param.copy_(vals)
