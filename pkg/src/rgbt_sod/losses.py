"""Training objective: branch, global, final BCE terms plus edge-aware smoothness.

All terms are means over pixels and batch. Multiply by the pixel count T of a
single map to recover the summed form.
"""
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import InputError

EPS = 1e-7
ALPHA = 10.0
BETA = 0.5
PSI_EPS = 1e-6


@dataclass
class LossBreakdown:
    l_d: Optional[torch.Tensor]  # None when branch supervision is disabled
    l_g: torch.Tensor
    l_f: torch.Tensor
    l_s: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {k: (None if v is None else v.detach().item())
                for k, v in (("l_d", self.l_d), ("l_g", self.l_g), ("l_f", self.l_f),
                             ("l_s", self.l_s), ("total", self.total))}


def tree_sum(x):
    """Sum by adjacent pairs, level by level. The order is fixed, so results do
    not depend on how the backend splits the reduction, and a constant map
    with a power-of-two pixel count sums exactly."""
    x = x.reshape(-1)
    while x.numel() > 1:
        if x.numel() % 2:
            x = torch.cat([x, x.new_zeros(1)])
        x = x[0::2] + x[1::2]
    return x[0]


def _reduce(x, reduction):
    if reduction == "mean":
        return tree_sum(x) / x.numel()
    if reduction == "sum":
        return tree_sum(x)
    raise ValueError(f"unknown reduction {reduction!r}")


def bce(s, y, reduction="mean", eps=EPS):
    if s.shape != y.shape:
        raise InputError(f"prediction {tuple(s.shape)} and mask {tuple(y.shape)} differ in shape")
    s = s.clamp(eps, 1.0 - eps)
    return _reduce(-(y * torch.log(s) + (1.0 - y) * torch.log(1.0 - s)), reduction)


def branch_loss(s1, s2, y, reduction="mean"):
    return bce(s1, y, reduction) + bce(s2, y, reduction)


def downsample_mask(y, size):
    """Area-average a binary mask to ``size`` and re-binarize at 0.5."""
    return (F.adaptive_avg_pool2d(y, size) >= 0.5).to(y.dtype)


def global_loss(s_g, y, reduction="mean"):
    y_g = downsample_mask(y, tuple(s_g.shape[-2:]))
    assert y_g.shape == s_g.shape, (y_g.shape, s_g.shape)
    return bce(s_g, y_g, reduction)


def forward_diff(x):
    """Forward differences along x and y; the trailing row/column is zero."""
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def smoothness_loss(s_f, y, alpha=ALPHA, reduction="mean"):
    """Edge-aware smoothness, summed over both directions and averaged over pixels."""
    terms = 0
    for ds, dy in zip(forward_diff(s_f), forward_diff(y)):
        terms = terms + torch.sqrt((ds.abs() * torch.exp(-alpha * dy.abs())) ** 2 + PSI_EPS)
    return _reduce(terms, reduction)


def total_loss(outputs, y, alpha=ALPHA, beta=BETA, branch_supervision=True):
    """Combine the four terms; ``l_d`` is dropped when branch outputs are absent
    or ``branch_supervision`` is off."""
    l_d = None
    if branch_supervision and outputs.s1 is not None:
        l_d = branch_loss(outputs.s1, outputs.s2, y)
    l_g = global_loss(outputs.sg, y)
    l_f = bce(outputs.sf, y)
    l_s = smoothness_loss(outputs.sf, y, alpha)
    if l_d is None:
        total = l_g + l_f + beta * l_s
    else:
        total = l_d + l_g + l_f + beta * l_s
    return LossBreakdown(l_d, l_g, l_f, l_s, total)
