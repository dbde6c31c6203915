"""Encoder, segmentation decoder and coarse-to-fine registration decoder.

One :class:`RegistrationNet` class covers the ablation family; the
``variant`` field of :class:`ArchitectureConfig` decides which pieces are
allocated and how each pyramid level fuses its inputs:

============  ===========  ===================  ==================
variant       seg head     seg features in reg  level fusion
============  ===========  ===================  ==================
PyramidReg    no           no                   concat + ConvB
AuxReg        no           no                   concat + ConvB
SimSReg       separate net no                   concat + ConvB
GloSReg       shared enc   no                   concat + ConvB
CcSReg        shared enc   yes                  CConv + ConvB
DAFFNet       shared enc   yes                  DAFF + ConvB
DAFFNetUns    no (decoder  yes                  DAFF + ConvB
              kept)
============  ===========  ===================  ==================
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import fields, fileio, ops
from .blocks import CConv, ConvBlock, Conv, DAFF, FlowEstimator
from .errors import ConfigError, ContractViolation, VolumeFormatError

__all__ = [
    "VARIANTS",
    "ArchitectureConfig",
    "ForwardOutputs",
    "RegistrationNet",
    "build_variant",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
]

VARIANTS = ("PyramidReg", "AuxReg", "SimSReg", "GloSReg", "CcSReg", "DAFFNet", "DAFFNetUns")
SEG_HEAD_VARIANTS = frozenset({"SimSReg", "GloSReg", "CcSReg", "DAFFNet"})
LABEL_VARIANTS = SEG_HEAD_VARIANTS | {"AuxReg"}
_FUSION = {
    "PyramidReg": "concat",
    "AuxReg": "concat",
    "SimSReg": "concat",
    "GloSReg": "concat",
    "CcSReg": "cconv",
    "DAFFNet": "daff",
    "DAFFNetUns": "daff",
}


@dataclass
class ArchitectureConfig:
    variant: str = "DAFFNet"
    encoder_channels: tuple[int, ...] = (16, 32, 32, 64, 64)
    # decoder layers coarse to fine, then the number of output classes
    seg_channels: tuple[int, ...] = (64, 32, 32, 16, 4)
    # registration fusion channels, coarsest level first
    fusion_channels: tuple[int, ...] = (64, 64, 32, 32, 16)
    integration_steps: int = fields.DEFAULT_INTEGRATION_STEPS
    gaussian_sigma: float = 1.0
    gaussian_ksize: int = 5

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.seg_channels = tuple(self.seg_channels)
        self.fusion_channels = tuple(self.fusion_channels)
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def num_classes(self) -> int:
        return self.seg_channels[-1]

    @property
    def has_seg_head(self) -> bool:
        return self.variant in SEG_HEAD_VARIANTS

    @property
    def uses_labels(self) -> bool:
        return self.variant in LABEL_VARIANTS

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.levels < 2:
            raise ConfigError("need at least two pyramid levels")
        if len(self.seg_channels) != self.levels:
            raise ConfigError(
                f"seg_channels needs {self.levels} entries ({self.levels - 1} decoder layers + classes)"
            )
        if len(self.fusion_channels) != self.levels:
            raise ConfigError(f"fusion_channels needs {self.levels} entries")
        for name in ("encoder_channels", "seg_channels", "fusion_channels"):
            if not all(isinstance(c, int) and c >= 1 for c in getattr(self, name)):
                raise ConfigError(f"{name} must be positive integers, got {getattr(self, name)}")
        if not isinstance(self.integration_steps, int) or self.integration_steps < 0:
            raise ConfigError("integration_steps must be an integer >= 0")
        if not self.gaussian_sigma > 0:
            raise ConfigError("gaussian_sigma must be > 0")
        if not isinstance(self.gaussian_ksize, int) or self.gaussian_ksize < 1 or self.gaussian_ksize % 2 == 0:
            raise ConfigError("gaussian_ksize must be a positive odd integer")

    def check_input(self, shape) -> None:
        factor = 2 ** (self.levels - 1)
        if any(s % factor for s in shape):
            raise ContractViolation(f"dims must be divisible by {factor}, got {tuple(shape)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutputs:
    field: torch.Tensor
    level_fields: dict[int, torch.Tensor] = field(default_factory=dict)
    residual_fields: dict[int, torch.Tensor] = field(default_factory=dict)
    upsampled_fields: dict[int, torch.Tensor] = field(default_factory=dict)
    fused: dict[int, torch.Tensor] = field(default_factory=dict)
    velocity_mean: dict[int, torch.Tensor] = field(default_factory=dict)
    velocity_log_var: dict[int, torch.Tensor] = field(default_factory=dict)
    seg_moving: torch.Tensor | None = None
    seg_fixed: torch.Tensor | None = None


def _up(x: torch.Tensor) -> torch.Tensor:
    return ops.trilinear_resize(x, 2.0)


class Encoder(nn.Module):
    def __init__(self, channels, in_channels: int = 1):
        super().__init__()
        blocks = []
        prev = in_channels
        for c in channels:
            blocks.append(ConvBlock(prev, c))
            prev = c
        self.blocks = nn.ModuleList(blocks)

    def reset_parameters(self, generator):
        for b in self.blocks:
            b.reset_parameters(generator)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = ops.pool3d(x, "average", 2)
            x = block(x)
            feats.append(x)
        return feats


class SegDecoder(nn.Module):
    """U-Net style decoder; ``forward`` returns features coarse to fine and optional probabilities."""

    def __init__(self, encoder_channels, seg_channels, head: bool = True):
        super().__init__()
        levels = len(encoder_channels)
        blocks = []
        prev = encoder_channels[-1]
        for j in range(levels - 1):
            skip = encoder_channels[levels - 2 - j]
            blocks.append(ConvBlock(prev + skip, seg_channels[j]))
            prev = seg_channels[j]
        self.blocks = nn.ModuleList(blocks)
        self.head = Conv(prev, seg_channels[-1], 1) if head else None

    def reset_parameters(self, generator):
        for b in self.blocks:
            b.reset_parameters(generator)
        if self.head is not None:
            self.head.reset_parameters(generator)

    def forward(self, feats):
        levels = len(feats)
        s = feats[-1]
        out = []
        for j, block in enumerate(self.blocks):
            s = block(torch.cat([_up(s), feats[levels - 2 - j]], dim=1))
            out.append(s)
        probs = None
        if self.head is not None:
            probs = ops.activation(self.head(s), "softmax", axis=1)
        return out, probs


class PyramidDecoder(nn.Module):
    """Coarse-to-fine residual field estimation."""

    def __init__(self, cfg: ArchitectureConfig, seg_features: bool):
        super().__init__()
        enc, fus, seg = cfg.encoder_channels, cfg.fusion_channels, cfg.seg_channels
        L = cfg.levels
        self.levels = L
        self.fusion = _FUSION[cfg.variant]
        self.seg_features = seg_features
        self.top = ConvBlock(2 * enc[-1], fus[0])
        febs = [FlowEstimator(fus[0], cfg.integration_steps)]
        fusers, blocks = [], []
        for level in range(L - 1, 0, -1):
            idx = L - level  # position in the coarse-to-fine lists
            feat_c, prior_c, out_c = enc[level - 1], fus[idx - 1], fus[idx]
            seg_c = seg[idx - 1]
            if self.fusion == "concat":
                fusers.append(nn.Identity())
                blocks.append(ConvBlock(2 * feat_c + prior_c, out_c))
            elif self.fusion == "cconv":
                fusers.append(CConv(2 * feat_c + prior_c + 2 * seg_c, out_c))
                blocks.append(ConvBlock(out_c, out_c))
            else:
                fusers.append(
                    DAFF(seg_c, feat_c, prior_c, out_c, sigma=cfg.gaussian_sigma, ksize=cfg.gaussian_ksize)
                )
                blocks.append(ConvBlock(out_c, out_c))
            febs.append(FlowEstimator(out_c, cfg.integration_steps))
        self.fusers = nn.ModuleList(fusers)
        self.blocks = nn.ModuleList(blocks)
        self.febs = nn.ModuleList(febs)

    def reset_parameters(self, generator):
        self.top.reset_parameters(generator)
        for f, b, e in zip(self.fusers, self.blocks, self.febs[1:]):
            if not isinstance(f, nn.Identity):
                f.reset_parameters(generator)
            b.reset_parameters(generator)
            e.reset_parameters(generator)
        self.febs[0].reset_parameters(generator)

    def forward(self, enc_m, enc_f, seg_m=None, seg_f=None, mode="infer", generator=None) -> ForwardOutputs:
        L = self.levels
        out = ForwardOutputs(field=None)
        fused = self.top(torch.cat([enc_m[-1], enc_f[-1]], dim=1))
        mu, log_var, phi = self.febs[0](fused, mode, generator)
        out.fused[L], out.level_fields[L], out.residual_fields[L] = fused, phi, phi
        out.velocity_mean[L], out.velocity_log_var[L] = mu, log_var
        for i, level in enumerate(range(L - 1, 0, -1)):
            prior = _up(fused)
            phi_hat = fields.upsample_field(phi)
            warped = fields.warp(enc_m[level - 1], phi_hat)
            fixed = enc_f[level - 1]
            if self.fusion == "concat":
                x = torch.cat([warped, fixed, prior], dim=1)
            elif self.fusion == "cconv":
                x = self.fusers[i](warped, fixed, prior, seg_m[i], seg_f[i])
            else:
                x = self.fusers[i](warped, fixed, prior, seg_m[i], seg_f[i])
            fused = self.blocks[i](x)
            mu, log_var, dphi = self.febs[i + 1](fused, mode, generator)
            phi = fields.compose(phi_hat, dphi)
            out.fused[level], out.level_fields[level] = fused, phi
            out.residual_fields[level], out.upsampled_fields[level] = dphi, phi_hat
            out.velocity_mean[level], out.velocity_log_var[level] = mu, log_var
        out.field = phi
        return out


class RegistrationNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.config = cfg
        v = cfg.variant
        self.encoder = Encoder(cfg.encoder_channels)
        self.seg_decoder = None
        self.aux_encoder = None
        if v in ("GloSReg", "CcSReg", "DAFFNet", "DAFFNetUns"):
            self.seg_decoder = SegDecoder(cfg.encoder_channels, cfg.seg_channels, head=v != "DAFFNetUns")
        elif v == "SimSReg":
            self.aux_encoder = Encoder(cfg.encoder_channels)
            self.seg_decoder = SegDecoder(cfg.encoder_channels, cfg.seg_channels, head=True)
        self.reg_decoder = PyramidDecoder(cfg, seg_features=_FUSION[v] != "concat")

    @property
    def variant(self) -> str:
        return self.config.variant

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.encoder.reset_parameters(generator)
        if self.aux_encoder is not None:
            self.aux_encoder.reset_parameters(generator)
        if self.seg_decoder is not None:
            self.seg_decoder.reset_parameters(generator)
        self.reg_decoder.reset_parameters(generator)

    def encode(self, image: torch.Tensor) -> list[torch.Tensor]:
        self.config.check_input(image.shape[2:])
        return self.encoder(image)

    def forward(
        self,
        moving: torch.Tensor,
        fixed: torch.Tensor,
        mode: str = "infer",
        generator: torch.Generator | None = None,
    ) -> ForwardOutputs:
        if moving.shape != fixed.shape:
            raise ContractViolation(
                f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} dims differ"
            )
        enc_m, enc_f = self.encode(moving), self.encode(fixed)
        seg_m = seg_f = probs_m = probs_f = None
        if self.aux_encoder is not None:
            seg_m, probs_m = self.seg_decoder(self.aux_encoder(moving))
            seg_f, probs_f = self.seg_decoder(self.aux_encoder(fixed))
        elif self.seg_decoder is not None:
            seg_m, probs_m = self.seg_decoder(enc_m)
            seg_f, probs_f = self.seg_decoder(enc_f)
        use_seg = self.reg_decoder.seg_features
        out = self.reg_decoder(
            enc_m, enc_f, seg_m if use_seg else None, seg_f if use_seg else None, mode, generator
        )
        out.seg_moving, out.seg_fixed = probs_m, probs_f
        return out


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_variant(config: ArchitectureConfig | str, seed: int | torch.Generator = 0) -> RegistrationNet:
    """Allocate and deterministically initialise the parameters one variant needs."""
    if isinstance(config, str):
        config = ArchitectureConfig(variant=config)
    generator = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    model = RegistrationNet(config)
    model.reset_parameters(generator)
    return model


def save_checkpoint(path, model: RegistrationNet, meta: dict | None = None, iteration: int = 0, optimizer=None):
    """Write parameters (and optional Adam moments) to the binary checkpoint format."""
    meta = dict(meta or {})
    meta["architecture"] = model.config.to_dict()
    params = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    opt = None
    if optimizer is not None:
        opt = (
            optimizer.step_count,
            {k: optimizer.m[k].detach().cpu().numpy() for k in params},
            {k: optimizer.v[k].detach().cpu().numpy() for k in params},
        )
    blob = fileio.encode_checkpoint(meta, params, iteration, opt)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(model, meta, iteration, optimizer_state)``; optimizer state may be ``None``."""
    meta, params, iteration, opt = fileio.decode_checkpoint(Path(path).read_bytes())
    if not isinstance(meta.get("architecture"), dict):
        raise VolumeFormatError(f"{path}: checkpoint metadata has no architecture record")
    try:
        cfg = ArchitectureConfig.from_dict(meta["architecture"])
    except (ConfigError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: checkpoint architecture is invalid: {exc}") from None
    model = RegistrationNet(cfg)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    found = {k: tuple(np.shape(v)) for k, v in params.items()}
    if found != expected:
        missing, extra = sorted(set(expected) - set(found)), sorted(set(found) - set(expected))
        bad = sorted(k for k in set(found) & set(expected) if found[k] != expected[k])
        raise VolumeFormatError(
            f"{path}: parameters do not match the {cfg.variant} architecture "
            f"(missing {missing[:3]}, unexpected {extra[:3]}, wrong shape {bad[:3]})"
        )
    state = {k: torch.from_numpy(np.array(v)) for k, v in params.items()}
    model.load_state_dict(state, strict=True)
    return model, meta, iteration, opt
