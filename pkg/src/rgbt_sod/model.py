"""Full network: dual encoder -> global information module -> Siamese decoder -> heads."""
from dataclasses import asdict, dataclass, fields

import torch.nn as nn

from .blocks import ScoreHead
from .decoder import FinalFusion, SaliencyOutputs, SiameseDecoder
from .encoder import DualEncoder
from .errors import ConfigurationError
from .gim import POOL_SIZES, GlobalInformationModule, clip_pool_sizes

MODEL_BACKBONES = ("vgg16", "resnet50", "resnet50plus")


@dataclass
class ModelConfig:
    backbone: str = "vgg16"
    width_divisor: int = 1
    input_size: int = 352
    reduction: int = 16
    branch_supervision: bool = True
    global_interaction: bool = True
    modality_interaction: bool = True
    single_decoder: bool = False
    share_branch_weights: bool = False

    def validate(self):
        if self.backbone not in MODEL_BACKBONES:
            raise ConfigurationError(f"backbone must be one of {MODEL_BACKBONES}, got {self.backbone!r}")
        if self.width_divisor < 1 or 128 % self.width_divisor:
            raise ConfigurationError(f"width_divisor must divide 128, got {self.width_divisor}")
        if self.single_decoder and self.share_branch_weights:
            raise ConfigurationError("share_branch_weights has no meaning with single_decoder")
        return self

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self):
        return asdict(self)


class RGBTSaliencyNet(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        cfg = (config or ModelConfig()).validate()
        self.config = cfg
        backbone_id = "vgg16" if cfg.backbone == "vgg16" else "resnet50"
        self.encoder = DualEncoder(backbone_id, cfg.width_divisor)
        enc_ch = self.encoder.channels
        gim_ch = 256 // cfg.width_divisor
        mid = 128 // cfg.width_divisor

        top = max(cfg.input_size // self.encoder.rgb.stride, 1)
        self.gim = GlobalInformationModule(enc_ch[5], gim_ch, clip_pool_sizes(POOL_SIZES, top, top),
                                           cfg.reduction)
        levels = (4, 3, 2, 1) if cfg.backbone == "resnet50plus" else (4, 3, 2)
        self.decoder = SiameseDecoder(
            enc_ch, levels, gim_ch, mid,
            global_interaction=cfg.global_interaction,
            modality_interaction=cfg.modality_interaction,
            single_decoder=cfg.single_decoder,
            share_branch_weights=cfg.share_branch_weights,
            reduction=cfg.reduction,
        )
        n_branches = 1 if cfg.single_decoder else 2
        self.fusion = FinalFusion(n_branches * mid, cfg.reduction)
        if cfg.branch_supervision and not cfg.single_decoder:
            self.head_rgb = ScoreHead(mid)
            self.head_thermal = ScoreHead(mid)
        else:
            self.head_rgb = self.head_thermal = None

    def decode(self, rgb_pyr, t_pyr, g, size):
        """Run the decoder and heads given encoder pyramids and global context."""
        states = self.decoder(rgb_pyr, t_pyr, g, return_states=True)
        last = states[-1]
        sf = self.fusion(last, size)
        s1 = s2 = None
        if self.head_rgb is not None:
            s1 = self.head_rgb(last.z_rgb, size)
            s2 = self.head_thermal(last.z_t, size)
        return sf, s1, s2, states

    def forward(self, rgb, thermal, return_intermediates=False):
        size = tuple(rgb.shape[-2:])
        if thermal.shape != rgb.shape:
            raise ConfigurationError(
                f"rgb and thermal batches differ in shape: {tuple(rgb.shape)} vs {tuple(thermal.shape)}")
        rgb_pyr, t_pyr = self.encoder(rgb, thermal)
        ctx = self.gim(rgb_pyr[5], t_pyr[5])
        sf, s1, s2, states = self.decode(rgb_pyr, t_pyr, ctx.g, size)
        extra = None
        if return_intermediates:
            extra = {"rgb_pyramid": rgb_pyr, "thermal_pyramid": t_pyr, "g": ctx.g, "states": states}
        return SaliencyOutputs(sf=sf, sg=ctx.s_g, s1=s1, s2=s2, intermediates=extra)
