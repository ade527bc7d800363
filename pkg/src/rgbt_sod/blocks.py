"""Shared layers: Conv(*) unit, channel attention and bilinear resampling."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError


class BatchNorm2d(nn.BatchNorm2d):
    """BatchNorm that falls back to running statistics when a training batch
    holds a single value per channel (e.g. a 1x1 pooled map with batch size 1).
    """

    def forward(self, x):
        if self.training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            return F.batch_norm(x, self.running_mean, self.running_var,
                                self.weight, self.bias, False, 0.0, self.eps)
        return super().forward(x)


class ConvBlock(nn.Sequential):
    """Convolution -> batch normalization -> ReLU, spatial size preserved."""

    def __init__(self, in_channels, out_channels, kernel_size=3):
        if kernel_size % 2 != 1:
            raise ConfigurationError(f"kernel_size must be odd, got {kernel_size}")
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size,
                      padding=kernel_size // 2, bias=False),
            BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )
        self.in_channels = in_channels
        self.out_channels = out_channels

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"ConvBlock expects {self.in_channels} channels, got {x.shape[1]}")
        return super().forward(x)


class ChannelAttention(nn.Module):
    """CBAM channel attention with the shared MLP replaced by 1x1 convolutions.

    The average- and max-pooled descriptors go through the same
    reduce -> BN -> ReLU -> expand path; their responses are summed and
    squashed to per-channel weights in (0, 1).
    """

    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.shared = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            BatchNorm2d(hidden),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def weights(self, x):
        b = x.shape[0]
        pooled = torch.cat([F.adaptive_avg_pool2d(x, 1), F.adaptive_max_pool2d(x, 1)], dim=0)
        resp = self.shared(pooled)
        return torch.sigmoid(resp[:b] + resp[b:])

    def forward(self, x):
        return x * self.weights(x)


def resample(x, target_h, target_w):
    """Bilinear resize with half-pixel centers (``align_corners=False``)."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {(target_h, target_w)}")
    if x.shape[-2:] == (target_h, target_w):
        return x
    return F.interpolate(x, size=(target_h, target_w), mode="bilinear", align_corners=False)


class ScoreHead(nn.Module):
    """1x1 convolution to one channel followed by a sigmoid."""

    def __init__(self, in_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, 1)

    def forward(self, x, size=None):
        s = torch.sigmoid(self.conv(x))
        if size is not None:
            s = resample(s, *size)
        return s
