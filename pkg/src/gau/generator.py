"""U-Net generator split into an encoder and a decoder.

The encoder maps a conditioning image ``x_j`` to a bottleneck map ``r_x``
plus the pre-downscaling feature maps of every down block.  A linear
projection of a Gaussian latent is concatenated onto ``r_x`` and the
decoder upsamples back to the input resolution, consuming one skip per
level through a 1x1 convolution.

Layout (``L = num_blocks // 2`` levels, ``c_d = base_filters * 2**d``)::

    down d:  ResNetBlock(-> c_d)  ->  skip_d  ->  conv s2 (-> c_{d+1}) + lrelu + renorm + dropout
    up u:    [h ; 1x1(skip_{L-u})] -> ResNetBlock(-> c_{L-u}) -> deconv x2 (-> c_{L-u-1}) + ...
    head:    [h ; 1x1(skip_0)] -> conv 3x3 -> sigmoid

Tensors are NCHW; images are in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from gau.numerics import (BatchRenorm2d, Conv2d, Deconv2d, Dropout, LeakyReLU, attach_generator,
                          init_weights)

LATENT_CHANNELS = 64


@dataclass
class GeneratorConfig:
    input_size: int = 64
    base_filters: int = 32
    num_blocks: int = 8
    latent_dim: int = 128
    dropout_rate: float = 0.25
    class_conditioning: bool = False
    num_classes: int = 2
    layers_per_block: int = 4
    latent_channels: int = LATENT_CHANNELS
    latent_layout: str = "broadcast"  # or "grid": one projected value per bottleneck pixel
    channels: int = 3

    def __post_init__(self):
        if self.num_blocks < 2 or self.num_blocks % 2:
            raise ValueError(f"num_blocks must be even and >= 2, got {self.num_blocks}")
        if self.input_size & (self.input_size - 1):
            raise ValueError(f"input_size must be a power of two, got {self.input_size}")
        if self.input_size // 2 ** self.levels < 2:
            raise ValueError(
                f"input_size {self.input_size} is too small for {self.num_blocks} blocks "
                f"(bottleneck must be at least 2x2)"
            )
        if self.latent_layout not in ("broadcast", "grid"):
            raise ValueError(f"unknown latent_layout {self.latent_layout!r}")

    @property
    def levels(self) -> int:
        return self.num_blocks // 2

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.levels

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level


@dataclass
class LatentCode:
    z: torch.Tensor          # (N, latent_dim)
    projected: torch.Tensor  # (N, latent_channels, b, b)


class ResNetBlock(nn.Module):
    """Stacked conv -> batch renorm -> leaky ReLU layers plus a residual path."""

    def __init__(self, in_ch: int, out_ch: int, n_layers: int = 4):
        super().__init__()
        layers = []
        for i in range(n_layers):
            layers += [Conv2d(in_ch if i == 0 else out_ch, out_ch, 3), BatchRenorm2d(out_ch),
                       LeakyReLU()]
        self.body = nn.Sequential(*layers)
        self.residual = Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        return self.body(x) + self.residual(x)


class _Scale(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, direction: str, rate: float):
        layer = Conv2d(in_ch, out_ch, 3, stride=2) if direction == "down" else Deconv2d(in_ch, out_ch, 3, 2)
        super().__init__(layer, LeakyReLU(), BatchRenorm2d(out_ch), Dropout(rate))


class Generator(nn.Module):
    """Encoder/decoder U-Net with a Gaussian latent injected at the bottleneck."""

    def __init__(self, config: GeneratorConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        L = cfg.levels
        n = cfg.layers_per_block

        self.down_blocks = nn.ModuleList()
        self.down_scales = nn.ModuleList()
        for d in range(L):
            in_ch = cfg.channels if d == 0 else cfg.filters(d)
            self.down_blocks.append(ResNetBlock(in_ch, cfg.filters(d), n))
            self.down_scales.append(_Scale(cfg.filters(d), cfg.filters(d + 1), "down", cfg.dropout_rate))

        b = cfg.bottleneck_size
        proj_out = cfg.latent_channels * (b * b if cfg.latent_layout == "grid" else 1)
        self.latent_proj = nn.Linear(cfg.latent_dim, proj_out)

        self.skip_convs = nn.ModuleList(Conv2d(cfg.filters(d), cfg.filters(d), 1) for d in range(L))
        self.up_blocks = nn.ModuleList()
        self.up_scales = nn.ModuleList()
        for u in range(L):
            level = L - u
            if u == 0:
                in_ch = cfg.filters(L) + cfg.latent_channels
                if cfg.class_conditioning:
                    in_ch += cfg.num_classes
            else:
                in_ch = 2 * cfg.filters(level)
            self.up_blocks.append(ResNetBlock(in_ch, cfg.filters(level), n))
            self.up_scales.append(_Scale(cfg.filters(level), cfg.filters(level - 1), "up", cfg.dropout_rate))
        self.head = Conv2d(2 * cfg.filters(0), cfg.channels, 3)

        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        init_weights(self, torch.Generator().manual_seed(seed))

    def set_rng(self, generator: torch.Generator | None) -> None:
        attach_generator(self, generator)

    @property
    def num_skips(self) -> int:
        return len(self.skip_convs)

    def encode(self, x_j: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return the bottleneck map ``r_x`` and the per-level skip features."""
        cfg = self.config
        if x_j.dim() != 4 or x_j.shape[1] != cfg.channels or x_j.shape[-2:] != (cfg.input_size,) * 2:
            raise ValueError(
                f"expected (N, {cfg.channels}, {cfg.input_size}, {cfg.input_size}) input, "
                f"got {tuple(x_j.shape)}"
            )
        skips = []
        h = x_j
        for block, scale in zip(self.down_blocks, self.down_scales):
            h = block(h)
            skips.append(h)
            h = scale(h)
        return h, skips

    def project_latent(self, z: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if z.dim() != 2 or z.shape[1] != cfg.latent_dim:
            raise ValueError(f"expected (N, {cfg.latent_dim}) latent, got {tuple(z.shape)}")
        b = cfg.bottleneck_size
        p = self.latent_proj(z)
        if cfg.latent_layout == "grid":
            return p.reshape(-1, cfg.latent_channels, b, b)
        return p[:, :, None, None].expand(-1, -1, b, b)

    def latent(self, z: torch.Tensor) -> LatentCode:
        return LatentCode(z, self.project_latent(z))

    def generate(self, r_x: torch.Tensor, latent: LatentCode, skips: list[torch.Tensor],
                 class_ids: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.config
        if r_x.shape[-2:] != latent.projected.shape[-2:]:
            raise ValueError(
                f"bottleneck {tuple(r_x.shape[-2:])} and latent grid "
                f"{tuple(latent.projected.shape[-2:])} differ"
            )
        if len(skips) != self.num_skips:
            raise ValueError(f"expected {self.num_skips} skips, got {len(skips)}")
        parts = [r_x, latent.projected]
        if cfg.class_conditioning:
            if class_ids is None:
                raise ValueError("class_ids required when class_conditioning is on")
            onehot = torch.nn.functional.one_hot(class_ids, cfg.num_classes).to(r_x.dtype)
            parts.append(onehot[:, :, None, None].expand(-1, -1, *r_x.shape[-2:]))
        h = torch.cat(parts, dim=1)
        L = cfg.levels
        for u, (block, scale) in enumerate(zip(self.up_blocks, self.up_scales)):
            if u > 0:
                h = torch.cat([h, self.skip_convs[L - u](skips[L - u])], dim=1)
            h = scale(block(h))
        h = torch.cat([h, self.skip_convs[0](skips[0])], dim=1)
        return torch.sigmoid(self.head(h))

    def forward(self, x_j: torch.Tensor, z: torch.Tensor,
                class_ids: torch.Tensor | None = None) -> torch.Tensor:
        r_x, skips = self.encode(x_j)
        return self.generate(r_x, self.latent(z), skips, class_ids)

    def sample_latent(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        dtype = self.latent_proj.weight.dtype
        return torch.randn(n, self.config.latent_dim, generator=generator, dtype=dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
