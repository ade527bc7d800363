"""Global information module: pyramid max-pooled context from both top features."""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ChannelAttention, ConvBlock, ScoreHead, resample
from .errors import ConfigurationError

POOL_SIZES = (1, 5, 9, 13)


@dataclass
class GlobalContext:
    g: torch.Tensor
    s_g: torch.Tensor


def adaptive_max_pool(x, n):
    """n x n adaptive max pooling.

    Cell (i, j) covers rows [floor(i*H/n), ceil((i+1)*H/n)) and the analogous
    column range.
    """
    if n < 1:
        raise ValueError(f"pool size must be >= 1, got {n}")
    return F.adaptive_max_pool2d(x, n)


def clip_pool_sizes(sizes, h, w):
    """Clip pool sizes to the feature size, dropping duplicates (order kept)."""
    out = []
    for n in sizes:
        n = min(n, h, w)
        if n not in out:
            out.append(n)
    return tuple(out)


class GlobalInformationModule(nn.Module):
    def __init__(self, in_channels, channels=256, pool_sizes=POOL_SIZES, reduction=16):
        super().__init__()
        self.in_channels = in_channels
        self.pool_sizes = tuple(pool_sizes)
        self.attention = ChannelAttention(2 * in_channels, reduction)
        self.reduce = ConvBlock(2 * in_channels, channels)
        self.branches = nn.ModuleList(ConvBlock(channels, channels) for _ in self.pool_sizes)
        self.merge = ConvBlock(channels * (len(self.pool_sizes) + 1), channels)
        self.score = ScoreHead(channels)

    def pooled_branches(self, f):
        h, w = f.shape[-2:]
        return [resample(conv(adaptive_max_pool(f, n)), h, w)
                for n, conv in zip(self.pool_sizes, self.branches)]

    def forward(self, r5, t5):
        if r5.shape != t5.shape:
            raise ConfigurationError(
                f"modal top features differ in shape: {tuple(r5.shape)} vs {tuple(t5.shape)}")
        f = self.reduce(self.attention(torch.cat([r5, t5], dim=1)))
        g = self.merge(torch.cat(self.pooled_branches(f) + [f], dim=1))
        return GlobalContext(g, self.score(g))
