"""Dual-stream backbones producing per-modality feature pyramids.

VGG16 taps (strides 4, 8, 16, 16):
    level 2: conv block 2 after its pooling
    level 3: conv block 3 after its pooling
    level 4: conv block 4 after its pooling
    level 5: conv block 5, final pooling removed
The shallowest block is never exposed.

ResNet50 taps: level 1 = layer1 (stride 4, only used by the ``resnet50plus``
decoder), level 2 = layer2 (8), level 3 = layer3 (16), levels 4 and 5 =
layer4 (32).
"""
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from .errors import InputError, WeightLoadError

BACKBONES = ("vgg16", "resnet50")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
# indices into the torchvision ``features`` Sequential whose outputs are tapped
_VGG16_TAPS = {9: 2, 16: 3, 23: 4, 29: 5}


@dataclass
class FeaturePyramid:
    levels: dict
    backbone_id: str = "vgg16"

    def __getitem__(self, level):
        return self.levels[level]

    def shapes(self):
        return {k: tuple(v.shape[1:]) for k, v in sorted(self.levels.items())}


def _vgg16_features(width_divisor=1):
    layers = []
    in_ch = 3
    for v in _VGG16_CFG:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            out = v // width_divisor
            layers += [nn.Conv2d(in_ch, out, 3, padding=1), nn.ReLU(inplace=True)]
            in_ch = out
    return nn.Sequential(*layers)


class VGG16Backbone(nn.Module):
    stride = 16

    def __init__(self, width_divisor=1):
        super().__init__()
        self.features = _vgg16_features(width_divisor)
        w = width_divisor
        self.channels = {2: 128 // w, 3: 256 // w, 4: 512 // w, 5: 512 // w}
        self.strides = {2: 4, 3: 8, 4: 16, 5: 16}

    def forward(self, x):
        out = {}
        for idx, layer in enumerate(self.features):
            x = layer(x)
            if idx in _VGG16_TAPS:
                out[_VGG16_TAPS[idx]] = x
        return out


class ResNet50Backbone(nn.Module):
    stride = 32

    def __init__(self, width_divisor=1):
        super().__init__()
        from torchvision.models import resnet50

        if width_divisor != 1:
            raise InputError("resnet50 backbone only supports width_divisor=1")
        net = resnet50(weights=None)
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.channels = {1: 256, 2: 512, 3: 1024, 4: 2048, 5: 2048}
        self.strides = {1: 4, 2: 8, 3: 16, 4: 32, 5: 32}

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        c1 = self.layer1(x)
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return {1: c1, 2: c2, 3: c3, 4: c4, 5: c4}


def build_backbone(backbone_id, width_divisor=1):
    if backbone_id == "vgg16":
        return VGG16Backbone(width_divisor)
    if backbone_id == "resnet50":
        return ResNet50Backbone(width_divisor)
    raise InputError(f"unknown backbone {backbone_id!r}; expected one of {BACKBONES}")


class DualEncoder(nn.Module):
    """Two architecturally identical backbones with independent parameters."""

    def __init__(self, backbone_id="vgg16", width_divisor=1):
        super().__init__()
        self.backbone_id = backbone_id
        self.rgb = build_backbone(backbone_id, width_divisor)
        self.thermal = build_backbone(backbone_id, width_divisor)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    @property
    def channels(self):
        return self.rgb.channels

    @property
    def strides(self):
        return self.rgb.strides

    def check_input(self, image):
        if image.dim() != 4 or image.shape[1] != 3:
            raise InputError(f"expected a (B, 3, H, W) image batch, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        s = self.rgb.stride
        if h % s or w % s:
            raise InputError(f"input size {h}x{w} is not divisible by {s}")

    def extract_pyramid(self, image, stream):
        """Encode a raw [0, 1] image batch with the ``rgb`` or ``thermal`` stream."""
        if stream not in ("rgb", "thermal"):
            raise InputError(f"unknown stream {stream!r}")
        self.check_input(image)
        net = self.rgb if stream == "rgb" else self.thermal
        return FeaturePyramid(net((image - self.mean) / self.std), self.backbone_id)

    def forward(self, rgb, thermal):
        return self.extract_pyramid(rgb, "rgb"), self.extract_pyramid(thermal, "thermal")


# -- pretrained weight files ---------------------------------------------------
#
# A backbone weight file is a safetensors container: an 8-byte little-endian
# header length, a JSON header (tensor name -> dtype, shape, byte offsets, plus a
# ``__metadata__`` map carrying ``backbone_id``), then raw little-endian float32
# data. Tensor names follow torchvision's ``vgg16().features`` / ``resnet50()``
# state dicts, so converted torchvision checkpoints load unchanged.


@dataclass
class EncoderWeights:
    backbone_id: str
    rgb: dict = field(default_factory=dict)
    thermal: dict = field(default_factory=dict)

    @property
    def n_conv_layers(self):
        """Number of convolution weight tensors per stream."""
        return sum(1 for k, v in self.rgb.items() if k.endswith("weight") and v.dim() == 4)


def _expected_state(backbone_id, width_divisor):
    return build_backbone(backbone_id, width_divisor).state_dict()


def export_backbone_weights(state_dict, backbone_id, path):
    """Write a backbone state dict (e.g. torchvision's) to the container format.

    Keys not used by the truncated backbone (classifier, fc) are dropped.
    """
    keep = {}
    for k, v in state_dict.items():
        if k.startswith(("classifier.", "fc.")):
            continue
        if backbone_id == "vgg16" and k.startswith("features."):
            idx = int(k.split(".")[1])
            if idx > 29:
                continue
        keep[k] = v.detach().to(torch.float32).contiguous()
    save_file(keep, str(path), metadata={"backbone_id": backbone_id})
    return Path(path)


def load_pretrained(weights_path, backbone_id="vgg16", width_divisor=1):
    """Read a backbone weight file and initialize both streams from it."""
    path = Path(weights_path)
    if not path.is_file():
        raise WeightLoadError(f"weight file not found: {path}")
    try:
        tensors = load_file(str(path))
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
    except (SafetensorError, OSError, ValueError) as exc:
        raise WeightLoadError(f"cannot parse weight file {path}: {exc}") from exc
    declared = meta.get("backbone_id")
    if declared is None:
        raise WeightLoadError(f"{path}: header does not declare backbone_id")
    if declared != backbone_id:
        raise WeightLoadError(f"{path}: file declares backbone {declared!r}, expected {backbone_id!r}")

    expected = _expected_state(backbone_id, width_divisor)
    bad = []
    for name, ref in expected.items():
        if name not in tensors:
            bad.append(f"{name} (missing)")
        elif tuple(tensors[name].shape) != tuple(ref.shape):
            bad.append(f"{name} (shape {tuple(tensors[name].shape)}, expected {tuple(ref.shape)})")
    extra = sorted(set(tensors) - set(expected))
    bad += [f"{name} (unexpected)" for name in extra]
    if bad:
        raise WeightLoadError(f"{path}: mismatched parameters: " + ", ".join(bad))

    state = {k: tensors[k].to(expected[k].dtype) for k in expected}
    return EncoderWeights(backbone_id,
                          {k: v.clone() for k, v in state.items()},
                          {k: v.clone() for k, v in state.items()})


def apply_pretrained(encoder, weights):
    if weights.backbone_id != encoder.backbone_id:
        raise WeightLoadError(
            f"weights are for {weights.backbone_id!r}, encoder is {encoder.backbone_id!r}")
    encoder.rgb.load_state_dict(weights.rgb)
    encoder.thermal.load_state_dict(weights.thermal)
