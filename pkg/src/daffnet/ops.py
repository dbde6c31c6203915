"""Differentiable tensor operations used by the network.

Every function takes and returns ``torch.Tensor`` objects laid out as
``[N, C, D, H, W]`` (channels first). Gradients come from torch autograd;
this module pins down the exact semantics (padding, interpolation
convention, tie-breaking) and validates shapes and finiteness so that a
bad value is caught at the operation that produced it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation, GradientError, NumericFault

__all__ = [
    "adaptive_pool3d",
    "activation",
    "backward",
    "channel_reduce",
    "check_finite",
    "conv3d",
    "finite_difference_check",
    "gaussian_filter3d",
    "gaussian_kernel1d",
    "instance_norm",
    "linear",
    "pool3d",
    "precision",
    "reflect_index",
    "trilinear_resize",
]

_CHECK_FINITE = True


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if _CHECK_FINITE and not bool(torch.isfinite(x).all()):
        raise NumericFault(f"non-finite values produced by {where}")
    return x


@contextlib.contextmanager
def precision(dtype: torch.dtype = torch.float64) -> Iterator[None]:
    """Temporarily switch the default floating dtype (gradient checks run in float64)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _require_5d(x: torch.Tensor, name: str) -> None:
    if x.dim() != 5:
        raise ContractViolation(f"{name}: expected a 5-D [N,C,D,H,W] tensor, got shape {tuple(x.shape)}")


def conv3d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int | None = None,
) -> torch.Tensor:
    """3-D cross-correlation with zero padding.

    ``padding=None`` selects the shape-preserving ``(k - 1) // 2``.
    """
    _require_5d(x, "conv3d")
    if kernel.dim() != 5:
        raise ContractViolation(f"conv3d: kernel must be [Cout,Cin,k,k,k], got {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[1]:
        raise ContractViolation(
            f"conv3d: input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    k = kernel.shape[2]
    if k % 2 == 0 or kernel.shape[3] != k or kernel.shape[4] != k:
        raise ContractViolation(f"conv3d: kernel must be cubic with odd size, got {tuple(kernel.shape[2:])}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ContractViolation(f"conv3d: bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)")
    if padding is None:
        padding = (k - 1) // 2
    out = F.conv3d(x, kernel, bias, stride=stride, padding=padding)
    return check_finite(out, "conv3d")


def pool3d(x: torch.Tensor, kind: str = "average", window: int = 2, stride: int | None = None) -> torch.Tensor:
    """Non-overlapping window pooling; max ties resolve to the first index in scan order."""
    _require_5d(x, "pool3d")
    stride = window if stride is None else stride
    if any(s % stride for s in x.shape[2:]):
        raise ContractViolation(f"pool3d: spatial dims {tuple(x.shape[2:])} not divisible by stride {stride}")
    if kind == "average":
        out = F.avg_pool3d(x, window, stride)
    elif kind == "max":
        out = F.max_pool3d(x, window, stride)
    else:
        raise ContractViolation(f"pool3d: unknown kind {kind!r}")
    return check_finite(out, "pool3d")


def adaptive_pool3d(x: torch.Tensor, kind: str = "average") -> torch.Tensor:
    """Global spatial reduction per channel to a 1x1x1 descriptor."""
    _require_5d(x, "adaptive_pool3d")
    if kind == "average":
        return x.mean(dim=(2, 3, 4), keepdim=True)
    if kind == "max":
        return x.amax(dim=(2, 3, 4), keepdim=True)
    raise ContractViolation(f"adaptive_pool3d: unknown kind {kind!r}")


def channel_reduce(x: torch.Tensor, kind: str = "average") -> torch.Tensor:
    _require_5d(x, "channel_reduce")
    if kind == "average":
        return x.mean(dim=1, keepdim=True)
    if kind == "max":
        return x.amax(dim=1, keepdim=True)
    raise ContractViolation(f"channel_reduce: unknown kind {kind!r}")


def trilinear_resize(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Trilinear resize by 2 or 0.5, half-pixel (align-corners false) convention."""
    _require_5d(x, "trilinear_resize")
    if scale not in (0.5, 2.0):
        raise ContractViolation(f"trilinear_resize: scale must be 0.5 or 2.0, got {scale}")
    if scale == 0.5 and any(s % 2 for s in x.shape[2:]):
        raise ContractViolation("trilinear_resize: downsampling needs even spatial dims")
    size = [int(s * scale) for s in x.shape[2:]]
    out = F.interpolate(x, size=size, mode="trilinear", align_corners=False)
    return check_finite(out, "trilinear_resize")


def instance_norm(
    x: torch.Tensor, gamma: torch.Tensor | None = None, beta: torch.Tensor | None = None, eps: float = 1e-5
) -> torch.Tensor:
    _require_5d(x, "instance_norm")
    if math.prod(x.shape[2:]) < 2:
        raise ContractViolation("instance_norm: needs at least 2 spatial positions")
    mean = x.mean(dim=(2, 3, 4), keepdim=True)
    var = (x - mean).pow(2).mean(dim=(2, 3, 4), keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma.view(1, -1, 1, 1, 1)
    if beta is not None:
        out = out + beta.view(1, -1, 1, 1, 1)
    return check_finite(out, "instance_norm")


def activation(x: torch.Tensor, kind: str, axis: int = 1, slope: float = 0.2) -> torch.Tensor:
    if kind == "leaky_relu":
        return F.leaky_relu(x, slope)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "softmax":
        # torch subtracts the running max internally
        return torch.softmax(x, dim=axis)
    raise ContractViolation(f"activation: unknown kind {kind!r}")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.dim() != 2 or weight.dim() != 2 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(
            f"linear: input {tuple(x.shape)} does not conform to weight {tuple(weight.shape)}"
        )
    return check_finite(F.linear(x, weight, bias), "linear")


def gaussian_kernel1d(sigma: float = 1.0, ksize: int = 5, dtype: torch.dtype | None = None) -> torch.Tensor:
    if ksize % 2 == 0 or ksize < 1:
        raise ContractViolation(f"gaussian kernel size must be odd, got {ksize}")
    if sigma <= 0:
        raise ContractViolation(f"gaussian sigma must be positive, got {sigma}")
    r = ksize // 2
    t = torch.arange(-r, r + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    return k.to(dtype or torch.get_default_dtype())


def reflect_index(n: int, pad: int) -> np.ndarray:
    """Source indices for reflect padding (edge not repeated) that work for any n >= 1."""
    i = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    m = np.mod(i, period)
    return np.where(m >= n, period - m, m)


def gaussian_filter3d(x: torch.Tensor, sigma: float = 1.0, ksize: int = 5) -> torch.Tensor:
    """Separable Gaussian low-pass with reflect padding; a linear operator."""
    _require_5d(x, "gaussian_filter3d")
    n, c = x.shape[:2]
    pad = ksize // 2
    k = gaussian_kernel1d(sigma, ksize, dtype=x.dtype).to(x.device)
    y = x.reshape(n * c, 1, *x.shape[2:])
    for axis in (2, 3, 4):
        idx = torch.as_tensor(reflect_index(y.shape[axis], pad), device=x.device)
        y = y.index_select(axis, idx)
        shape = [1, 1, 1, 1, 1]
        shape[axis] = ksize
        y = F.conv3d(y, k.view(shape))
    return check_finite(y.reshape(x.shape), "gaussian_filter3d")


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Propagate gradients of a scalar loss into every leaf with ``requires_grad``.

    Gradients accumulate into ``.grad``. Replaying a graph that was already
    consumed is an error rather than a silent double count.
    """
    if loss.numel() != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from every parameter; nothing to differentiate")
    try:
        loss.backward(retain_graph=retain_graph)
    except RuntimeError as exc:
        if "second time" in str(exc):
            raise GradientError("computation record already consumed by a previous backward") from exc
        raise


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    step: float = 1e-4,
    max_elements: int | None = None,
    generator: np.random.Generator | None = None,
) -> float:
    """Largest ``|analytic - central| / (|central| + 1e-8)`` over checked elements.

    ``fn`` must return a scalar built from ``tensors`` (leaves with
    ``requires_grad``). When ``max_elements`` is given, that many elements
    per tensor are sampled instead of all of them.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            flat = t.view(-1)
            idx = np.arange(flat.numel())
            if max_elements is not None and flat.numel() > max_elements:
                rng = generator or np.random.default_rng(0)
                idx = rng.choice(flat.numel(), size=max_elements, replace=False)
            gflat = g.view(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                err = abs(gflat[i].item() - numeric) / (abs(numeric) + 1e-8)
                worst = max(worst, err)
    for t in tensors:
        t.grad = None
    return worst
