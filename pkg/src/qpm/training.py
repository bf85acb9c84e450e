"""Batch sampling, augmentation, the joint objective and the SGD loop."""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .agfe import global_triplet_loss, sg_id_loss, single_image_triplet_loss
from .backbone import BackboneConfig
from .errors import ConfigError, SamplingError, TrainingDivergedError
from .isa import global_id_loss
from .model import QPM, ModelConfig
from .part_branch import part_id_loss, part_triplet_loss

log = logging.getLogger(__name__)

LOSS_TERMS = ("part_id", "part_tp", "global_id", "sg_id", "global_tp")


@dataclass
class EraseParams:
    p: float = 0.5
    area: Tuple[float, float] = (0.02, 0.4)
    aspect: Tuple[float, float] = (0.3, 3.3)
    fill: float = 0.0

    def __post_init__(self):
        self.area = tuple(float(a) for a in self.area)
        self.aspect = tuple(float(a) for a in self.aspect)


@dataclass
class TrainConfig:
    P: int = 8
    A: int = 8
    K: int = 6
    d: int = 1024
    alpha: float = 0.3
    epochs: int = 70
    base_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 20
    momentum: float = 0.0
    input_size: Tuple[int, int] = (384, 128)
    backbone: str = "toy"
    backbone_channels: int = 256
    backbone_stride: int = 8
    global_channels: Optional[int] = None
    isa: bool = True
    global_mode: str = "agfe"
    learn_quality: bool = True
    excite_bias: bool = True
    include_diagonal: bool = True
    flip_p: float = 0.5
    erase: EraseParams = field(default_factory=EraseParams)
    loss_toggles: Dict[str, bool] = field(default_factory=lambda: {t: True for t in LOSS_TERMS})
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.erase, dict):
            self.erase = EraseParams(**self.erase)
        self.input_size = tuple(int(s) for s in self.input_size)
        unknown = set(self.loss_toggles) - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"unknown loss toggles {sorted(unknown)}")
        self.loss_toggles = {t: bool(self.loss_toggles.get(t, False)) for t in LOSS_TERMS}
        if self.P < 2 or self.A < 2:
            raise ConfigError("P and A must both be at least 2")
        if self.alpha <= 0 or self.base_lr < 0 or self.epochs < 0:
            raise ConfigError("alpha must be positive, lr and epochs non-negative")

    @property
    def batch_size(self):
        return self.P * self.A

    def backbone_config(self):
        return BackboneConfig(variant=self.backbone, output_channels=self.backbone_channels,
                              spatial_stride=self.backbone_stride, input_size=self.input_size, K=self.K)

    def model_config(self, num_classes):
        return ModelConfig(backbone=self.backbone_config(), d=self.d, global_channels=self.global_channels,
                           num_classes=num_classes, isa=self.isa, global_mode=self.global_mode,
                           learn_quality=self.learn_quality, excite_bias=self.excite_bias)

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["erase"]["area"] = list(self.erase.area)
        d["erase"]["aspect"] = list(self.erase.aspect)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> TrainConfig:
    """Read a YAML or JSON file mirroring :class:`TrainConfig`."""
    import yaml

    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return TrainConfig.from_dict(data)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule; ``epoch`` is 0-based."""
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_period)


# ---------------------------------------------------------------- sampling

def _index_by_identity(labels: Sequence[int]):
    by_id: Dict[int, List[int]] = {}
    for i, pid in enumerate(labels):
        by_id.setdefault(int(pid), []).append(i)
    return by_id


def _draw_images(pool, A, rng):
    if len(pool) >= A:
        return [pool[i] for i in rng.choice(len(pool), size=A, replace=False)]
    return [pool[i] for i in rng.choice(len(pool), size=A, replace=True)]


def pk_sample(labels: Sequence[int], P: int, A: int, rng: np.random.Generator) -> List[int]:
    """Indices of one batch: P distinct identities with A images each.

    Identities with fewer than A images are resampled with replacement.
    """
    by_id = _index_by_identity(labels)
    if P < 2 or A < 2:
        raise SamplingError(f"invalid layout P={P}, A={A}")
    if len(by_id) < P:
        raise SamplingError(f"need {P} identities, dataset has {len(by_id)}")
    ids = sorted(by_id)
    chosen = rng.choice(len(ids), size=P, replace=False)
    batch = []
    for c in chosen:
        batch.extend(_draw_images(by_id[ids[c]], A, rng))
    return batch


def pk_epoch(labels: Sequence[int], P: int, A: int, rng: np.random.Generator) -> List[List[int]]:
    """One epoch of P x A batches, each image used about once.

    Every identity's images are shuffled into chunks of A (the last chunk
    topped up by resampling); batches draw P identities that still have
    chunks left until fewer than P remain.
    """
    by_id = _index_by_identity(labels)
    if len(by_id) < P:
        raise SamplingError(f"need {P} identities, dataset has {len(by_id)}")
    chunks: Dict[int, List[List[int]]] = {}
    for pid in sorted(by_id):
        pool = list(by_id[pid])
        order = [pool[i] for i in rng.permutation(len(pool))]
        if len(order) < A:
            order = order + [pool[i] for i in rng.choice(len(pool), size=A - len(order), replace=True)]
        n_full = len(order) // A
        chunks[pid] = [order[i * A:(i + 1) * A] for i in range(n_full)]
    batches = []
    while True:
        avail = sorted(pid for pid, c in chunks.items() if c)
        if len(avail) < P:
            break
        picked = rng.choice(len(avail), size=P, replace=False)
        batch = []
        for i in picked:
            batch.extend(chunks[avail[i]].pop())
        batches.append(batch)
    return batches


# ----------------------------------------------------------- augmentation

def hflip(image: torch.Tensor, p: float, rng: np.random.Generator) -> torch.Tensor:
    if rng.random() < p:
        return image.flip(-1)
    return image


def random_erase(image: torch.Tensor, params: EraseParams, rng: np.random.Generator) -> torch.Tensor:
    """Blank a random rectangle of a ``(C, H, W)`` tensor with probability ``params.p``.

    Area ratio and aspect ratio are drawn uniformly from the configured
    ranges; up to 100 draws are tried before giving up.
    """
    if rng.random() >= params.p:
        return image
    _, H, W = image.shape
    for _ in range(100):
        target = rng.uniform(*params.area) * H * W
        aspect = rng.uniform(*params.aspect)
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h <= H and 0 < w <= W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            out = image.clone()
            out[:, top:top + h, left:left + w] = params.fill
            return out
    return image


def augment_batch(images: torch.Tensor, cfg: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    """Flip, then erase, each image independently."""
    return torch.stack([random_erase(hflip(img, cfg.flip_p, rng), cfg.erase, rng) for img in images])


# ------------------------------------------------------------------ losses

@dataclass
class LossBreakdown:
    part_id: torch.Tensor
    part_tp: torch.Tensor
    global_id: torch.Tensor
    sg_id: torch.Tensor
    global_tp: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in LOSS_TERMS + ("total",)}


def total_loss(model: QPM, out: dict, labels: torch.Tensor, cfg: TrainConfig) -> LossBreakdown:
    """Unit-weighted sum of the enabled loss terms; disabled terms are zero."""
    on = cfg.loss_toggles
    zero = out["f"].sum() * 0.0
    terms = dict.fromkeys(LOSS_TERMS, zero)
    if on["part_id"]:
        terms["part_id"] = part_id_loss(out["part_logits"], labels)
    if on["part_tp"]:
        terms["part_tp"] = part_triplet_loss(out["f"], out["q"], labels, cfg.alpha)
    if on["global_id"] and "global_logits" in out:
        terms["global_id"] = global_id_loss(out["global_logits"], labels)
    if model.cfg.global_mode == "agfe":
        if on["sg_id"]:
            terms["sg_id"] = sg_id_loss(out["g_tilde"], out["q"], labels, model.sg_classifier,
                                        include_diagonal=cfg.include_diagonal)
        if on["global_tp"]:
            terms["global_tp"] = global_triplet_loss(out["g_tilde"], out["q"], labels, cfg.alpha)
    else:
        if on["sg_id"]:
            terms["sg_id"] = global_id_loss(model.sg_classifier(out["single_global"]), labels)
        if on["global_tp"]:
            terms["global_tp"] = single_image_triplet_loss(out["single_global"], labels, cfg.alpha)
    total = zero
    for t in LOSS_TERMS:
        total = total + terms[t]
    return LossBreakdown(total=total, **terms)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: QPM
    history: List[dict]
    label_map: Dict[int, int]
    checkpoint_path: Optional[Path] = None


def relabel(pids: Sequence[int]) -> Tuple[np.ndarray, Dict[int, int]]:
    mapping = {pid: i for i, pid in enumerate(sorted(set(int(p) for p in pids)))}
    return np.array([mapping[int(p)] for p in pids], dtype=np.int64), mapping


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.SGD(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=0.0)


def save_checkpoint(path, model: QPM, train_cfg: Optional[TrainConfig] = None, label_map=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": "qpm-checkpoint",
        "version": 1,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "label_map": label_map,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(blob, path)
    return path


def load_checkpoint(path):
    """Returns ``(model, blob)``; the model is in eval mode."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != "qpm-checkpoint":
        raise ConfigError(f"{path} is not a QPM checkpoint")
    if blob.get("version") != 1:
        raise ConfigError(f"unsupported checkpoint version {blob.get('version')}")
    model = QPM(ModelConfig(**blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob


def train(cfg: TrainConfig, images: torch.Tensor, pids: Sequence[int], out_dir=None,
          log_every: int = 0, epoch_callback=None) -> TrainResult:
    """Train a model end to end.

    Args:
        images: ``(N, 3, H, W)`` normalized training images.
        pids: identity per image (any integers; relabeled internally).
        out_dir: when given, ``checkpoint.pt`` and ``metrics.jsonl`` are written there.
        epoch_callback: called as ``fn(epoch, model, record)`` after every epoch.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    labels_np, label_map = relabel(pids)
    labels_all = torch.from_numpy(labels_np)
    model = QPM(cfg.model_config(len(label_map)))
    opt = make_optimizer(model, cfg)
    out_dir = Path(out_dir) if out_dir else None
    metrics_file = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "w")
    history = []
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            sums = dict.fromkeys(LOSS_TERMS + ("total",), 0.0)
            batches = pk_epoch(labels_np, cfg.P, cfg.A, rng)
            t0 = time.perf_counter()
            for it, idx in enumerate(batches):
                x = augment_batch(images[idx], cfg, rng)
                y = labels_all[idx]
                out = model(x)
                losses = total_loss(model, out, y, cfg)
                if not torch.isfinite(losses.total):
                    dump = None
                    if out_dir:
                        dump = out_dir / "divergence_dump.pt"
                        torch.save({"epoch": epoch, "iteration": it, "batch_indices": idx,
                                    "losses": {k: float(v) for k, v in losses.as_floats().items()},
                                    "state_dict": model.state_dict()}, dump)
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} iteration {it}: {losses.as_floats()}", dump)
                if epoch == 0 and it == 0:
                    history.append({"epoch": -1, "lr": lr, **losses.as_floats()})
                opt.zero_grad()
                losses.total.backward()
                opt.step()
                for k, v in losses.as_floats().items():
                    sums[k] += v
                if log_every and it % log_every == 0:
                    log.info("epoch %d it %d total %.4f", epoch, it, float(losses.total))
            n = max(len(batches), 1)
            record = {"epoch": epoch, "lr": lr, "batches": len(batches),
                      "seconds": round(time.perf_counter() - t0, 3),
                      **{k: v / n for k, v in sums.items()}}
            history.append(record)
            if metrics_file:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            log.info("epoch %d lr %.5f total %.4f", epoch, lr, record["total"])
            if epoch_callback:
                epoch_callback(epoch, model, record)
    finally:
        if metrics_file:
            metrics_file.close()
    model.eval()
    ckpt = None
    if out_dir:
        ckpt = save_checkpoint(out_dir / "checkpoint.pt", model, cfg, label_map)
    return TrainResult(model=model, history=history, label_map=label_map, checkpoint_path=ckpt)
