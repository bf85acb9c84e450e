"""Backbones producing the shared feature map and the K-stripe partition."""
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass
class BackboneConfig:
    variant: str = "toy"
    output_channels: int = 256
    spatial_stride: int = 8
    input_size: Tuple[int, int] = (384, 128)
    K: int = 6

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.variant not in ("toy", "resnet50"):
            raise ConfigError(f"unknown backbone variant {self.variant!r}")
        if self.variant == "resnet50" and self.spatial_stride != 16:
            raise ConfigError("resnet50 backbone has a fixed stride of 16")
        if self.variant == "resnet50" and self.output_channels != 2048:
            raise ConfigError("resnet50 backbone emits 2048 channels")
        if self.variant == "toy" and self.spatial_stride not in (4, 8, 16):
            raise ConfigError("toy backbone stride must be 4, 8 or 16")
        if self.K < 1:
            raise ConfigError("K must be positive")
        h, w = self.input_size
        if h % self.spatial_stride or w % self.spatial_stride:
            raise ConfigError(f"input size {self.input_size} not divisible by stride {self.spatial_stride}")
        if self.feature_size[0] % self.K:
            raise ConfigError(
                f"feature height {self.feature_size[0]} (input {h} / stride {self.spatial_stride}) "
                f"is not divisible by K={self.K}")

    @property
    def feature_size(self) -> Tuple[int, int]:
        h, w = self.input_size
        return h // self.spatial_stride, w // self.spatial_stride

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


def _conv_bn_relu(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class _ToyBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = _conv_bn_relu(cin, cout, stride)
        self.conv2 = nn.Sequential(
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
        )
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        return torch.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class ToyBackbone(nn.Module):
    """Four residual blocks; channel widths double up to ``output_channels``."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.output_channels
        widths = [max(c // 8, 4), max(c // 4, 4), max(c // 2, 4), c]
        n_down = {4: 2, 8: 3, 16: 4}[cfg.spatial_stride]
        strides = [2 if i < n_down else 1 for i in range(4)]
        blocks, cin = [], 3
        for w, s in zip(widths, strides):
            blocks.append(_ToyBlock(cin, w, s))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")

    def forward(self, x):
        return self.blocks(x)


class ResNet50Backbone(nn.Module):
    """ResNet-50 trunk with the stride of the last stage set to 1 (overall stride 16)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.layer4[0].conv2.stride = (1, 1)
        net.layer4[0].downsample[0].stride = (1, 1)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )

    def forward(self, x):
        return self.body(x)


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.variant == "resnet50":
        return ResNet50Backbone(cfg)
    return ToyBackbone(cfg)


def load_backbone_weights(backbone: nn.Module, path: str, strict: bool = True):
    """Optional hook for pretrained trunks: loads a plain state dict or a package checkpoint."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    state = blob.get("state_dict", blob) if isinstance(blob, dict) else blob
    prefix = "backbone."
    if any(k.startswith(prefix) for k in state):
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    return backbone.load_state_dict(state, strict=strict)


def extract_feature_map(backbone: nn.Module, images: torch.Tensor, cfg: BackboneConfig) -> torch.Tensor:
    """Run the backbone on a ``(3, H, W)`` image or an ``(N, 3, H, W)`` batch."""
    single = images.dim() == 3
    x = images.unsqueeze(0) if single else images
    if x.dim() != 4 or x.shape[1] != 3:
        raise ConfigError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
    if tuple(x.shape[-2:]) != cfg.input_size:
        raise ConfigError(f"image size {tuple(x.shape[-2:])} does not match config {cfg.input_size}")
    fm = backbone(x)
    if tuple(fm.shape[-2:]) != cfg.feature_size:
        raise ConfigError(f"backbone produced {tuple(fm.shape[-2:])}, expected {cfg.feature_size}")
    return fm[0] if single else fm


def partition_parts(fm: torch.Tensor, K: int) -> List[torch.Tensor]:
    """Split the height axis (dim -2) into K equal, contiguous stripes, top to bottom."""
    H = fm.shape[-2]
    if K < 1 or H % K:
        raise ConfigError(f"feature height {H} is not divisible by K={K}")
    return list(torch.split(fm, H // K, dim=-2))


def stripe_bounds(H: int, K: int, index: Optional[int] = None):
    """Row ranges ``[start, stop)`` of the K stripes (or of stripe ``index``)."""
    if H % K:
        raise ConfigError(f"height {H} is not divisible by K={K}")
    step = H // K
    bounds = [(k * step, (k + 1) * step) for k in range(K)]
    return bounds if index is None else bounds[index]
