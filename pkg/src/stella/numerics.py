"""Tensor substrate: thin functional wrappers over torch plus a finite-difference checker.

Every differentiable operation used by the model is exposed here so that the
gradient suite can exercise each one in isolation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch and return the numpy generator used for data shuffling."""
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ValueError(
            f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return a * b


def div(a: Tensor, b: Tensor, eps: float | None = None) -> Tensor:
    """Elementwise division. Without ``eps`` a zero anywhere in ``b`` is an error."""
    _check_broadcast(a, b, "div")
    if eps is None:
        if bool((b == 0).any()):
            raise ZeroDivisionError("div: zero in denominator and no epsilon guard given")
        return a / b
    return a / (b + eps)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ, {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return torch.matmul(a, b)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 3 or b.dim() != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.bmm(a, b)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def masked_softmax(scores: Tensor, allowed: Tensor, dim: int = -1) -> Tensor:
    """Softmax restricted to positions where ``allowed`` is True.

    Disallowed positions get exactly zero weight. A row with no allowed
    position is an error.
    """
    if bool((~allowed).all(dim=dim).any()):
        raise ValueError("masked_softmax: a row has no attendable positions")
    scores = scores.masked_fill(~allowed, float("-inf"))
    return torch.softmax(scores, dim=dim)


def mean(x: Tensor, dim: int, keepdim: bool = True) -> Tensor:
    return x.mean(dim=dim, keepdim=keepdim)


def variance(x: Tensor, dim: int, keepdim: bool = True) -> Tensor:
    """Population variance (1/N)."""
    return x.var(dim=dim, keepdim=keepdim, unbiased=False)


def sqrt(x: Tensor) -> Tensor:
    return torch.sqrt(x)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def dropout(x: Tensor, p: float, training: bool) -> Tensor:
    if p == 0.0 or not training:
        return x
    return F.dropout(x, p=p, training=True)


def causal_conv1d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1
) -> Tensor:
    """Dilated causal convolution, ``y_t = sum_k W_k x_{t - d k}``.

    ``x`` is (N, C_in, L), ``weight`` is (C_out, C_in, K). Output length is L.
    """
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"causal_conv1d: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}"
        )
    k = weight.shape[-1]
    pad = (k - 1) * dilation
    # torch conv is cross-correlation: flip taps so weight[..., 0] multiplies x_t
    return F.conv1d(F.pad(x, (pad, 0)), weight.flip(-1), bias, dilation=dilation)


def conv_transpose1d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1
) -> Tensor:
    """1-D transposed convolution; ``weight`` is (C_in, C_out, K)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv_transpose1d: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}"
        )
    return F.conv_transpose1d(x, weight, bias, stride=stride)


def depthwise_conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel scale and shift; ``x`` is (N, C, L), ``weight`` is (C, 1, 1)."""
    if x.dim() != 3 or weight.shape != (x.shape[1], 1, 1):
        raise ValueError(
            f"depthwise_conv1x1: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}"
        )
    return F.conv1d(x, weight, bias, groups=x.shape[1])


def concat(tensors: list[Tensor], dim: int) -> Tensor:
    return torch.cat(tensors, dim=dim)


# ---------------------------------------------------------------------------
# Parameterized layers shared across modules
# ---------------------------------------------------------------------------


def _weight_norm(v: Tensor, g: Tensor) -> Tensor:
    norm = v.flatten(1).norm(dim=1).clamp_min(1e-12)
    shape = (-1,) + (1,) * (v.dim() - 1)
    return v * (g / norm).view(shape)


class WeightNormConv(nn.Module):
    """Convolution kernel stored as direction ``v`` and magnitude ``g``.

    ``kind`` selects the op: "causal" (dilated causal conv1d), "transpose"
    (conv_transpose1d) or "depthwise" (1x1 depthwise conv1d).
    Direction is Kaiming (fan-in) initialized; ``g`` starts at ``||v||`` so the
    effective kernel equals ``v`` at construction.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 1,
        kind: str = "causal",
        dilation: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        if kind not in ("causal", "transpose", "depthwise"):
            raise ValueError(f"unknown conv kind {kind!r}")
        self.kind = kind
        self.dilation = dilation
        if kind == "causal":
            shape, fan_in = (out_channels, in_channels, kernel_size), in_channels * kernel_size
        elif kind == "transpose":
            # torch stores transposed kernels as (in, out, K); normalize per input row
            shape, fan_in = (in_channels, out_channels, kernel_size), in_channels * kernel_size
        else:
            if in_channels != out_channels:
                raise ValueError("depthwise conv needs in_channels == out_channels")
            shape, fan_in = (out_channels, 1, 1), 1
        if kind == "depthwise":
            # 1x1 per-channel scale: start at the identity recalibration
            v = torch.ones(shape)
        else:
            v = torch.randn(shape) / math.sqrt(fan_in)
        self.v = nn.Parameter(v)
        self.g = nn.Parameter(v.flatten(1).norm(dim=1).clone())
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.fan_in = fan_in

    @property
    def weight(self) -> Tensor:
        return _weight_norm(self.v, self.g)

    def forward(self, x: Tensor) -> Tensor:
        w = self.weight
        if self.kind == "causal":
            return causal_conv1d(x, w, self.bias, self.dilation)
        if self.kind == "transpose":
            return conv_transpose1d(x, w, self.bias)
        return depthwise_conv1x1(x, w, self.bias)


def init_linear_uniform(layer: nn.Linear, generator: torch.Generator | None = None) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    max_relative_error: float
    worst_index: int
    analytic: float
    numeric: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    tol: float = 1e-4,
    atol: float = 1e-6,
) -> GradReport:
    """Compare the reverse-mode gradient of scalar ``f`` at ``x`` to central differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, atol)``, so
    entries where both gradients vanish do not dominate the report.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = x.detach().clone()
    xr = x0.clone().requires_grad_(True)
    out = f(xr)
    if out.numel() != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise FloatingPointError("grad_check: non-finite forward value")
    (analytic,) = torch.autograd.grad(out, xr, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.detach().reshape(-1).double()

    flat = x0.reshape(-1)
    numeric = torch.empty(flat.numel(), dtype=torch.float64)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(x0).item()
            flat[i] = orig - eps
            fm = f(x0).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("grad_check: non-finite forward value")
            numeric[i] = (fp - fm) / (2 * eps)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(numeric, atol))
    rel = (analytic - numeric).abs() / denom
    worst = int(torch.argmax(rel))
    return GradReport(
        max_relative_error=float(rel[worst]),
        worst_index=worst,
        analytic=float(analytic[worst]),
        numeric=float(numeric[worst]),
        tol=tol,
    )


def grad_check_module(
    module: nn.Module,
    loss_fn: Callable[[], Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_entries: int | None = 200,
    generator: np.random.Generator | None = None,
    atol: float = 1e-6,
) -> dict[str, GradReport]:
    """Finite-difference check of every trainable parameter of ``module``.

    ``loss_fn`` recomputes a scalar from the module's current parameters.
    When ``max_entries`` is set, a random subset of each parameter's entries is
    perturbed (the full analytic gradient is still computed once).
    """
    rng = generator if generator is not None else np.random.default_rng(0)
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    reports: dict[str, GradReport] = {}
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        analytic = (p.grad if p.grad is not None else torch.zeros_like(p)).detach().reshape(-1)
        n = p.numel()
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(
            n, size=max_entries, replace=False)
        flat = p.data.view(-1)
        worst = (-1.0, 0, 0.0, 0.0)
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = analytic[i].item()
                rel = abs(ana - num) / max(abs(ana), abs(num), atol)
                if rel > worst[0]:
                    worst = (rel, int(i), ana, num)
        reports[name] = GradReport(max(worst[0], 0.0), worst[1], worst[2], worst[3], tol)
    module.zero_grad(set_to_none=True)
    return reports
