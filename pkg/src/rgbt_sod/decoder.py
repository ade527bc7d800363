"""Siamese decoder built from cascaded multi-interaction blocks (MIBs)."""
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .blocks import ChannelAttention, ConvBlock, ScoreHead, resample


@dataclass
class MIBState:
    level: int
    z_rgb: torch.Tensor
    z_t: Optional[torch.Tensor] = None  # None for the single-decoder ablation


@dataclass
class SaliencyOutputs:
    sf: torch.Tensor
    sg: torch.Tensor
    s1: Optional[torch.Tensor] = None
    s2: Optional[torch.Tensor] = None
    intermediates: Optional[dict] = None

    def maps(self):
        return {k: v for k, v in (("sf", self.sf), ("s1", self.s1), ("s2", self.s2), ("sg", self.sg))
                if v is not None}


class MIB(nn.Module):
    """Multi-interaction block.

    Sums three 128-channel cues at the resolution of the encoder feature
    ``a``: the attended encoder feature, the attended and upsampled previous
    decoder state, and the upsampled global context. A final Conv(*) mixes
    the sum.
    """

    def __init__(self, prev_channels, enc_channels, global_channels, channels=128,
                 use_global=True, reduction=16):
        super().__init__()
        self.enc_attention = ChannelAttention(enc_channels, reduction)
        self.enc_conv = ConvBlock(enc_channels, channels)
        self.prev_attention = ChannelAttention(prev_channels, reduction)
        self.prev_conv = ConvBlock(prev_channels, channels)
        self.global_conv = ConvBlock(global_channels, channels) if use_global else None
        self.fuse = ConvBlock(channels, channels)

    def cues(self, m_prev, a, g):
        h, w = a.shape[-2:]
        a_t = self.enc_conv(self.enc_attention(a))
        m_t = self.prev_conv(resample(self.prev_attention(m_prev), h, w))
        g_t = self.global_conv(resample(g, h, w)) if self.global_conv is not None else None
        assert a_t.shape == m_t.shape, (a_t.shape, m_t.shape)
        return m_t, g_t, a_t

    def integrate(self, m_t, g_t, a_t):
        z = m_t + a_t if g_t is None else m_t + g_t + a_t
        return self.fuse(z)

    def forward(self, m_prev, a, g):
        return self.integrate(*self.cues(m_prev, a, g))


class SiameseDecoder(nn.Module):
    """Top-down cascade over encoder levels ``levels`` (e.g. 4, 3, 2).

    Modes:
      * interactive (default): each branch's MIB sees the concatenation of both
        branches' previous outputs; the first group sees ``[R5, T5]``.
      * ``modality_interaction=False``: each branch only sees its own previous
        output (late fusion); the first group sees its own level-5 feature.
      * ``single_decoder=True``: one stream over concatenated encoder features.
      * ``share_branch_weights=True``: both branches use one MIB per level.
    """

    def __init__(self, enc_channels, levels=(4, 3, 2), global_channels=256, channels=128,
                 global_interaction=True, modality_interaction=True, single_decoder=False,
                 share_branch_weights=False, reduction=16):
        super().__init__()
        self.levels = tuple(levels)
        self.channels = channels
        self.global_interaction = global_interaction
        self.modality_interaction = modality_interaction
        self.single_decoder = single_decoder
        self.share_branch_weights = share_branch_weights and not single_decoder

        top = enc_channels[5]

        def make(prev, enc):
            return MIB(prev, enc, global_channels, channels, global_interaction, reduction)

        rgb, thermal = nn.ModuleDict(), nn.ModuleDict()
        for k, level in enumerate(self.levels):
            if single_decoder:
                prev = 2 * top if k == 0 else channels
                rgb[str(level)] = make(prev, 2 * enc_channels[level])
                continue
            if modality_interaction:
                prev = 2 * top if k == 0 else 2 * channels
            else:
                prev = top if k == 0 else channels
            rgb[str(level)] = make(prev, enc_channels[level])
            if not self.share_branch_weights:
                thermal[str(level)] = make(prev, enc_channels[level])
        self.rgb_blocks = rgb
        self.thermal_blocks = thermal if len(thermal) else None

    def branch_parameter_sets(self):
        return 1 if self.thermal_blocks is None else 2

    def _thermal_block(self, level):
        if self.thermal_blocks is None:
            return self.rgb_blocks[str(level)]
        return self.thermal_blocks[str(level)]

    def forward(self, rgb_pyr, t_pyr, g, return_states=False):
        states = []
        if self.single_decoder:
            m = torch.cat([rgb_pyr[5], t_pyr[5]], dim=1)
            for level in self.levels:
                a = torch.cat([rgb_pyr[level], t_pyr[level]], dim=1)
                m = self.rgb_blocks[str(level)](m, a, g)
                states.append(MIBState(level, m))
        else:
            z_r, z_t = rgb_pyr[5], t_pyr[5]
            for level in self.levels:
                if self.modality_interaction:
                    m_r = m_t = torch.cat([z_r, z_t], dim=1)
                else:
                    m_r, m_t = z_r, z_t
                z_r = self.rgb_blocks[str(level)](m_r, rgb_pyr[level], g)
                z_t = self._thermal_block(level)(m_t, t_pyr[level], g)
                states.append(MIBState(level, z_r, z_t))
        return states if return_states else states[-1]


class FinalFusion(nn.Module):
    """Concatenate the last branch outputs, channel attention, 1x1 score, upsample."""

    def __init__(self, in_channels, reduction=16):
        super().__init__()
        self.attention = ChannelAttention(in_channels, reduction)
        self.score = ScoreHead(in_channels)

    def forward(self, state, size):
        x = state.z_rgb if state.z_t is None else torch.cat([state.z_rgb, state.z_t], dim=1)
        return self.score(self.attention(x), size)
