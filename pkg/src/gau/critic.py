"""DenseNet Wasserstein critic over conditioned image pairs.

The pair ``(x_i, x)`` is concatenated along channels, run through dense
blocks (pre-activation: layer norm -> leaky ReLU -> conv) separated by
transition layers, globally average-pooled and mapped to one unbounded
score.  Layer norm keeps every score independent of its batch companions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from gau.numerics import Conv2d, Dropout, LayerNorm, LeakyReLU, attach_generator, init_weights


@dataclass
class CriticConfig:
    growth_rate: int = 64
    num_dense_blocks: int = 4
    layers_per_block: int = 4
    dropout_rate: float = 0.25
    input_size: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.input_size // 2 ** self.num_dense_blocks < 1:
            raise ValueError(
                f"input_size {self.input_size} cannot take {self.num_dense_blocks} transitions"
            )

    def channel_schedule(self) -> list[tuple[int, int]]:
        """(channels after dense block, channels after its transition) per block."""
        c = 2 * self.channels
        out = []
        for _ in range(self.num_dense_blocks):
            grown = c + self.layers_per_block * self.growth_rate
            c = grown // 2
            out.append((grown, c))
        return out


class DenseBlock(nn.Module):
    def __init__(self, in_ch: int, growth_rate: int, n_layers: int, dropout_rate: float):
        super().__init__()
        self.layers = nn.ModuleList()
        c = in_ch
        for _ in range(n_layers):
            self.layers.append(nn.Sequential(LayerNorm(c), LeakyReLU(), Conv2d(c, growth_rate, 3)))
            c += growth_rate
        self.out_channels = c
        self.dropout = Dropout(dropout_rate)

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return self.dropout(x)


class Transition(nn.Module):
    """1x1 conv halving the channels, then 2x2 average pooling."""

    def __init__(self, in_ch: int):
        super().__init__()
        self.out_channels = in_ch // 2
        self.body = nn.Sequential(LayerNorm(in_ch), LeakyReLU(), Conv2d(in_ch, self.out_channels, 1),
                                  nn.AvgPool2d(2))

    def forward(self, x):
        return self.body(x)


class Critic(nn.Module):
    def __init__(self, config: CriticConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or CriticConfig()
        stages = []
        c = 2 * cfg.channels
        for _ in range(cfg.num_dense_blocks):
            block = DenseBlock(c, cfg.growth_rate, cfg.layers_per_block, cfg.dropout_rate)
            trans = Transition(block.out_channels)
            stages += [block, trans]
            c = trans.out_channels
        self.features = nn.Sequential(*stages)
        self.norm = LayerNorm(c)
        self.act = LeakyReLU()
        self.head = nn.Linear(c, 1)
        init_weights(self, torch.Generator().manual_seed(seed))

    def set_rng(self, generator: torch.Generator | None) -> None:
        attach_generator(self, generator)

    def forward(self, x_i: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Scores of a batch of pairs, shape (N,); no squashing on the head."""
        cfg = self.config
        expected = (cfg.channels, cfg.input_size, cfg.input_size)
        if tuple(x_i.shape[1:]) != expected or tuple(x.shape[1:]) != expected or x_i.shape[0] != x.shape[0]:
            raise ValueError(
                f"critic expects two (N, {', '.join(map(str, expected))}) batches, "
                f"got {tuple(x_i.shape)} and {tuple(x.shape)}"
            )
        h = self.features(torch.cat([x_i, x], dim=1))
        h = self.act(self.norm(h)).mean(dim=(2, 3))
        return self.head(h).squeeze(1)

    def score(self, x_i: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Single-pair score from unbatched (C, H, W) images."""
        return self.forward(x_i[None], x[None])[0]


def critic_batch(critic: Critic, batch) -> torch.Tensor:
    """Scores for the real pairs ``(x_i, x_j)`` of a ConditionalBatch, in order."""
    x_i = torch.as_tensor(batch.x_i, dtype=critic.head.weight.dtype)
    x_j = torch.as_tensor(batch.x_j, dtype=critic.head.weight.dtype)
    return critic(x_i, x_j)
