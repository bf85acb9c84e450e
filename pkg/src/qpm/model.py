"""The full network: shared backbone, part branch and global branch."""
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .backbone import BackboneConfig, build_backbone, extract_feature_map
from .errors import ConfigError
from .isa import ISA, coarse_global
from .part_branch import PartEmbedding, QualityPredictor, rap_parts

GLOBAL_MODES = ("agfe", "gap", "si")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    d: int = 1024
    global_channels: Optional[int] = None
    num_classes: int = 1
    isa: bool = True
    global_mode: str = "agfe"
    learn_quality: bool = True
    excite_bias: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.global_channels is None:
            self.global_channels = self.d
        if self.global_mode not in GLOBAL_MODES:
            raise ConfigError(f"global_mode must be one of {GLOBAL_MODES}")
        if self.global_channels % 4:
            raise ConfigError("global channels must be divisible by 4")
        if self.d < 1 or self.num_classes < 1:
            raise ConfigError("d and num_classes must be positive")

    @property
    def K(self):
        return self.backbone.K

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d


class QPM(nn.Module):
    """Forward pass returns a dict of every intermediate the losses and the index need.

    Keys: ``fm``, ``z``, ``f``, ``q``, ``part_logits``, ``G``, ``g``,
    ``G_tilde``, ``g_tilde`` and, with attention enabled, ``h``, ``h_hat``,
    ``h_tilde``, ``M`` and ``global_logits``. ``single_global`` holds the
    per-image global vector used by the GAP and SI ablations.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        K, C, d, Cg, n = cfg.K, cfg.backbone.output_channels, cfg.d, cfg.global_channels, cfg.num_classes
        self.backbone = build_backbone(cfg.backbone)
        self.embed = PartEmbedding(K, C, d)
        self.quality = QualityPredictor(K, C)
        self.part_cls_weight = nn.Parameter(torch.randn(K, n, d) * 0.001)
        self.part_cls_bias = nn.Parameter(torch.zeros(K, n))
        self.isa = ISA(C, Cg, K, enabled=cfg.isa, excite_bias=cfg.excite_bias)
        self.global_classifier = nn.Linear(Cg // 4, n)
        self.sg_classifier = nn.Linear(Cg, n)
        for lin in (self.global_classifier, self.sg_classifier):
            nn.init.normal_(lin.weight, std=0.001)
            nn.init.zeros_(lin.bias)

    def forward_features(self, fm):
        K = self.cfg.K
        z = rap_parts(fm, K)
        f = self.embed(z)
        if self.cfg.learn_quality:
            q = self.quality(z)
        else:
            q = torch.ones(z.shape[:2], dtype=z.dtype, device=z.device)
        out = {"fm": fm, "z": z, "f": f, "q": q}
        out["part_logits"] = torch.einsum("nkd,kcd->nkc", f, self.part_cls_weight) + self.part_cls_bias
        glob = self.isa(fm, q)
        out.update(glob)
        out["g_tilde"] = rap_parts(glob["G_tilde"], K)
        if "h_hat" in glob:
            out["global_logits"] = self.global_classifier(glob["h_hat"])
        if self.cfg.global_mode == "gap":
            out["single_global"] = out["g_tilde"].mean(1)
        elif self.cfg.global_mode == "si":
            out["single_global"] = coarse_global(out["g_tilde"], q)
        return out

    def forward(self, images):
        fm = extract_feature_map(self.backbone, images, self.cfg.backbone)
        return self.forward_features(fm)
