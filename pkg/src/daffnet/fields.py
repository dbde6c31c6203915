"""Deformation-field geometry.

A displacement field is a tensor ``[N, 3, D, H, W]`` in voxel units of its
own resolution level; channel ``i`` displaces along spatial axis ``i``
(depth, height, width). The transform it represents maps a voxel ``p`` to
``p + u(p)``; warping samples the source at that location.
"""

from __future__ import annotations

import torch

from . import ops
from .errors import ContractViolation

__all__ = [
    "compose",
    "identity_grid",
    "integrate_velocity",
    "is_identity",
    "jacobian_det",
    "sample_velocity",
    "upsample_field",
    "warp",
]

DEFAULT_INTEGRATION_STEPS = 7


def identity_grid(shape, dtype=None, device=None) -> torch.Tensor:
    """Voxel coordinates ``[1, 3, D, H, W]`` of a grid with spatial ``shape``."""
    axes = [torch.arange(s, dtype=dtype or torch.get_default_dtype(), device=device) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij")).unsqueeze(0)


def is_identity(field: torch.Tensor) -> bool:
    return bool((field == 0).all())


def _check_field(field: torch.Tensor, spatial, name: str) -> None:
    if field.dim() != 5 or field.shape[1] != 3:
        raise ContractViolation(f"{name}: field must be [N,3,D,H,W], got {tuple(field.shape)}")
    if tuple(field.shape[2:]) != tuple(spatial):
        raise ContractViolation(
            f"{name}: field spatial dims {tuple(field.shape[2:])} != source dims {tuple(spatial)}"
        )


def warp(source: torch.Tensor, field: torch.Tensor, interp: str = "trilinear") -> torch.Tensor:
    """Resample ``source`` at ``p + u(p)`` with border clamping.

    The trilinear variant is differentiable in both arguments; a zero field
    reproduces the source bit-exactly because every corner weight other
    than the base corner is exactly zero.
    """
    ops._require_5d(source, "warp")
    spatial = source.shape[2:]
    _check_field(field, spatial, "warp")
    if field.shape[0] != source.shape[0]:
        raise ContractViolation("warp: batch sizes differ")
    n, c = source.shape[:2]
    d, h, w = spatial
    coords = identity_grid(spatial, dtype=field.dtype, device=field.device) + field
    z = coords[:, 0].clamp(0, d - 1)
    y = coords[:, 1].clamp(0, h - 1)
    x = coords[:, 2].clamp(0, w - 1)
    flat = source.reshape(n, c, -1)

    def gather(zi, yi, xi):
        idx = ((zi * h + yi) * w + xi).reshape(n, 1, -1).expand(n, c, -1)
        return torch.gather(flat, 2, idx).reshape(n, c, d, h, w)

    if interp == "nearest":
        out = gather(torch.round(z).long(), torch.round(y).long(), torch.round(x).long())
        return out
    if interp != "trilinear":
        raise ContractViolation(f"warp: unknown interpolation {interp!r}")

    z0f, y0f, x0f = torch.floor(z), torch.floor(y), torch.floor(x)
    wz, wy, wx = (z - z0f).unsqueeze(1), (y - y0f).unsqueeze(1), (x - x0f).unsqueeze(1)
    z0, y0, x0 = z0f.long(), y0f.long(), x0f.long()
    z1 = (z0 + 1).clamp(max=d - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    out = (1 - wz) * (1 - wy) * (1 - wx) * gather(z0, y0, x0)
    out = out + (1 - wz) * (1 - wy) * wx * gather(z0, y0, x1)
    out = out + (1 - wz) * wy * (1 - wx) * gather(z0, y1, x0)
    out = out + (1 - wz) * wy * wx * gather(z0, y1, x1)
    out = out + wz * (1 - wy) * (1 - wx) * gather(z1, y0, x0)
    out = out + wz * (1 - wy) * wx * gather(z1, y0, x1)
    out = out + wz * wy * (1 - wx) * gather(z1, y1, x0)
    out = out + wz * wy * wx * gather(z1, y1, x1)
    return ops.check_finite(out, "warp")


def compose(coarse: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Displacement of ``p -> p + r(p) -> (p + r(p)) + c(p + r(p))``."""
    if coarse.shape != residual.shape:
        raise ContractViolation(
            f"compose: field shapes differ {tuple(coarse.shape)} vs {tuple(residual.shape)}"
        )
    return residual + warp(coarse, residual)


def upsample_field(field: torch.Tensor) -> torch.Tensor:
    """Double the resolution; displacements double with the voxel size change."""
    _check_field(field, field.shape[2:], "upsample_field")
    return ops.trilinear_resize(field, 2.0) * 2.0


def integrate_velocity(velocity: torch.Tensor, steps: int = DEFAULT_INTEGRATION_STEPS) -> torch.Tensor:
    """Scaling and squaring: halve ``steps`` times, then self-compose ``steps`` times."""
    if steps < 0:
        raise ContractViolation("integrate_velocity: steps must be >= 0")
    _check_field(velocity, velocity.shape[2:], "integrate_velocity")
    u = velocity / (2.0**steps)
    for _ in range(steps):
        u = compose(u, u)
    return u


def sample_velocity(
    mu: torch.Tensor,
    log_var: torch.Tensor,
    mode: str = "infer",
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Reparameterised draw ``mu + eps * exp(log_var / 2)``; the mean in infer mode."""
    if mu.shape != log_var.shape:
        raise ContractViolation("sample_velocity: mean and log-variance shapes differ")
    if mode == "infer":
        return mu
    if mode != "train":
        raise ContractViolation(f"sample_velocity: unknown mode {mode!r}")
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + eps * torch.exp(0.5 * log_var)


def _forward_diff(u: torch.Tensor, axis: int) -> torch.Tensor:
    # last slice replicates the previous difference
    diff = torch.diff(u, dim=axis)
    last = diff.narrow(axis, diff.shape[axis] - 1, 1)
    return torch.cat([diff, last], dim=axis)


def jacobian_det(field: torch.Tensor) -> torch.Tensor:
    """Determinant of ``I + grad u`` per voxel, shape ``[N, 1, D, H, W]``."""
    _check_field(field, field.shape[2:], "jacobian_det")
    if min(field.shape[2:]) < 2:
        raise ContractViolation("jacobian_det: every spatial dim must be >= 2")
    # grads[j][:, i] = d u_i / d p_j
    grads = [_forward_diff(field, axis) for axis in (2, 3, 4)]

    def J(i, j):
        g = grads[j][:, i]
        return g + 1.0 if i == j else g

    det = (
        J(0, 0) * (J(1, 1) * J(2, 2) - J(1, 2) * J(2, 1))
        - J(0, 1) * (J(1, 0) * J(2, 2) - J(1, 2) * J(2, 0))
        + J(0, 2) * (J(1, 0) * J(2, 1) - J(1, 1) * J(2, 0))
    )
    return det.unsqueeze(1)
