"""Reusable network blocks: conv blocks, the flow estimator, and the fusion module."""

from __future__ import annotations

import torch
from torch import nn

from . import fields, ops
from .errors import ContractViolation

__all__ = [
    "CConv",
    "Conv",
    "ConvBlock",
    "ConvSubBlock",
    "DAFF",
    "FlowEstimator",
    "GlobalAttention",
    "LocalAttention",
    "MLP",
]

INIT_STD = 0.02
LOG_VAR_BIAS = -10.0


class Conv(nn.Module):
    """Shape-preserving 3-D convolution with its own parameters."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        k = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = nn.Parameter(torch.zeros(out_channels, in_channels, k, k, k))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def reset_parameters(self, generator: torch.Generator, std: float = INIT_STD, bias: float = 0.0) -> None:
        with torch.no_grad():
            self.weight.copy_(torch.randn(self.weight.shape, generator=generator) * std)
            self.bias.fill_(bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ops.conv3d(x, self.weight, self.bias)


class ConvSubBlock(nn.Module):
    """conv 3x3x3 -> LeakyReLU(0.2) -> instance norm."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = Conv(in_channels, out_channels, 3)
        self.gamma = nn.Parameter(torch.ones(out_channels))
        self.beta = nn.Parameter(torch.zeros(out_channels))

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.conv.reset_parameters(generator)
        with torch.no_grad():
            self.gamma.fill_(1.0)
            self.beta.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = ops.activation(self.conv(x), "leaky_relu")
        return ops.instance_norm(h, self.gamma, self.beta)


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.sub1 = ConvSubBlock(in_channels, out_channels)
        self.sub2 = ConvSubBlock(out_channels, out_channels)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.sub1.reset_parameters(generator)
        self.sub2.reset_parameters(generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ContractViolation(
                f"ConvBlock expects {self.in_channels} channels, got {x.shape[1]}"
            )
        return self.sub2(self.sub1(x))


class CConv(nn.Module):
    """Concatenate along channels, then one 3x3x3 conv and LeakyReLU(0.2)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = Conv(in_channels, out_channels, kernel_size)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.conv.reset_parameters(generator)

    def forward(self, *xs: torch.Tensor) -> torch.Tensor:
        x = torch.cat(xs, dim=1) if len(xs) > 1 else xs[0]
        return ops.activation(self.conv(x), "leaky_relu")


class FlowEstimator(nn.Module):
    """Velocity mean / log-variance heads followed by sampling and integration."""

    def __init__(self, channels: int, integration_steps: int = fields.DEFAULT_INTEGRATION_STEPS):
        super().__init__()
        self.sub = ConvSubBlock(channels, channels)
        self.mu_head = Conv(channels, 3, 3)
        self.log_var_head = Conv(channels, 3, 3)
        self.integration_steps = integration_steps

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.sub.reset_parameters(generator)
        self.log_var_head.reset_parameters(generator, bias=LOG_VAR_BIAS)
        # zero mean head: training starts from the identity transform
        self.mu_head.reset_parameters(generator, std=0.0)

    def forward(self, x: torch.Tensor, mode: str = "infer", generator: torch.Generator | None = None):
        h = self.sub(x)
        mu = self.mu_head(h)
        log_var = self.log_var_head(h)
        v = fields.sample_velocity(mu, log_var, mode, generator)
        return mu, log_var, fields.integrate_velocity(v, self.integration_steps)


class MLP(nn.Module):
    def __init__(self, in_features: int, hidden: int, out_features: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.zeros(hidden, in_features))
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(torch.zeros(out_features, hidden))
        self.b2 = nn.Parameter(torch.zeros(out_features))

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            self.w1.copy_(torch.randn(self.w1.shape, generator=generator) * INIT_STD)
            self.w2.copy_(torch.randn(self.w2.shape, generator=generator) * INIT_STD)
            self.b1.zero_()
            self.b2.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = ops.activation(ops.linear(x, self.w1, self.b1), "leaky_relu")
        return ops.linear(h, self.w2, self.b2)


class GlobalAttention(nn.Module):
    """One softmax weight per source, computed from pooled descriptors of all three."""

    def __init__(self, channels: tuple[int, int, int]):
        super().__init__()
        self.channels = tuple(channels)
        n_in = 2 * sum(channels)
        self.mlp = MLP(n_in, max(n_in // 2, 1), 3)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.mlp.reset_parameters(generator)

    def descriptors(self, *sources: torch.Tensor) -> torch.Tensor:
        parts = []
        for s in sources:
            parts.append(ops.adaptive_pool3d(s, "average").flatten(1))
            parts.append(ops.adaptive_pool3d(s, "max").flatten(1))
        return torch.cat(parts, dim=1)

    def logits(self, *sources: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.descriptors(*sources))

    def weights(self, *sources: torch.Tensor) -> torch.Tensor:
        return ops.activation(self.logits(*sources), "softmax", axis=1)

    def forward(self, seg: torch.Tensor, coupled: torch.Tensor, prior: torch.Tensor):
        if not (seg.shape[2:] == coupled.shape[2:] == prior.shape[2:]):
            raise ContractViolation("GlobalAttention: sources must share spatial dims")
        w = self.weights(seg, coupled, prior).view(-1, 3, 1, 1, 1, 1)
        return w[:, 0] * seg, w[:, 1] * coupled, w[:, 2] * prior


class LocalAttention(nn.Module):
    """Spatial importance map from channel-pooled statistics at three kernel sizes."""

    branch_sizes = (3, 5, 7)

    def __init__(self, branch_channels: int = 2, final_kernel: int = 7):
        super().__init__()
        self.branches = nn.ModuleList(Conv(2, branch_channels, k) for k in self.branch_sizes)
        self.final = Conv(branch_channels * len(self.branch_sizes), 1, final_kernel)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for b in self.branches:
            b.reset_parameters(generator)
        self.final.reset_parameters(generator)

    def importance_map(self, g: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([ops.channel_reduce(g, "average"), ops.channel_reduce(g, "max")], dim=1)
        multi = torch.cat([b(pooled) for b in self.branches], dim=1)
        return ops.activation(self.final(multi), "sigmoid")

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return g * self.importance_map(g)


class DAFF(nn.Module):
    """Dual-attention frequency fusion of encoder, segmentation and prior-level features."""

    def __init__(
        self,
        seg_channels: int,
        feat_channels: int,
        prior_channels: int,
        out_channels: int,
        sigma: float = 1.0,
        ksize: int = 5,
    ):
        super().__init__()
        self.seg_merge = CConv(2 * seg_channels, out_channels)
        self.feat_merge = CConv(2 * feat_channels, out_channels)
        self.global_attention = GlobalAttention((out_channels, out_channels, prior_channels))
        self.global_merge = CConv(2 * out_channels + prior_channels, out_channels)
        self.local_low = LocalAttention()
        self.local_high = LocalAttention()
        self.out_merge = CConv(2 * out_channels, out_channels)
        self.sigma = sigma
        self.ksize = ksize

    def reset_parameters(self, generator: torch.Generator) -> None:
        for m in (
            self.seg_merge,
            self.feat_merge,
            self.global_attention,
            self.global_merge,
            self.local_low,
            self.local_high,
            self.out_merge,
        ):
            m.reset_parameters(generator)

    def forward(
        self,
        warped: torch.Tensor,
        fixed: torch.Tensor,
        prior: torch.Tensor,
        seg_moving: torch.Tensor,
        seg_fixed: torch.Tensor,
        return_parts: bool = False,
    ):
        spatial = warped.shape[2:]
        for t in (fixed, prior, seg_moving, seg_fixed):
            if t.shape[2:] != spatial:
                raise ContractViolation("DAFF: all inputs must share spatial dims")
        s = self.seg_merge(seg_moving, seg_fixed)
        f = self.feat_merge(warped, fixed)
        g = self.global_merge(*self.global_attention(s, f, prior))
        g_low = ops.gaussian_filter3d(g, self.sigma, self.ksize)
        g_high = g - g_low
        out = self.out_merge(self.local_low(g_low), self.local_high(g_high))
        if return_parts:
            return out, {"G": g, "G_low": g_low, "G_high": g_high}
        return out
