"""Part features, part quality scores and the quality-weighted part losses."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, SamplingError, UncalibratedPredictorError

EPS = 1e-8


def rap(stripe: torch.Tensor) -> torch.Tensor:
    """Region average pooling: spatial mean of each channel, ``(..., C, h, w) -> (..., C)``."""
    if stripe.shape[-1] == 0 or stripe.shape[-2] == 0:
        raise ConfigError("empty stripe")
    return stripe.mean(dim=(-2, -1))


def rap_parts(fm: torch.Tensor, K: int) -> torch.Tensor:
    """Pool all K stripes at once: ``(N, C, H, W) -> (N, K, C)``."""
    N, C, H, W = fm.shape
    if H % K:
        raise ConfigError(f"feature height {H} is not divisible by K={K}")
    return fm.reshape(N, C, K, H // K, W).mean(dim=(3, 4)).transpose(1, 2)


class PartEmbedding(nn.Module):
    """K independent 1x1 convs on pooled vectors: ``f_k = W_k z_k + b_k``."""

    def __init__(self, K, in_dim, out_dim):
        super().__init__()
        self.K = K
        self.weight = nn.Parameter(torch.empty(K, out_dim, in_dim))
        self.bias = nn.Parameter(torch.empty(K, out_dim))
        bound = 1.0 / math.sqrt(in_dim)
        nn.init.kaiming_normal_(self.weight, mode="fan_out")
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, z):
        # z: (N, K, C) -> (N, K, d)
        return torch.einsum("nkc,kdc->nkd", z, self.weight) + self.bias

    def embed_one(self, z, k):
        """Embed a single C-vector with the parameters of part ``k`` (1-based)."""
        if not 1 <= k <= self.K:
            raise ConfigError(f"part index {k} outside [1, {self.K}]")
        return self.weight[k - 1] @ z + self.bias[k - 1]


class QualityPredictor(nn.Module):
    """Per-part 1x1 conv to a scalar, a per-part BN channel, then sigmoid.

    The conv carries no bias because the following BN removes any constant
    shift; the composite function is the same as with a bias.
    """

    def __init__(self, K, in_dim):
        super().__init__()
        self.K = K
        self.weight = nn.Parameter(torch.randn(K, in_dim) / math.sqrt(in_dim))
        self.bn = nn.BatchNorm1d(K)

    def pre_activation(self, z):
        return torch.einsum("nkc,kc->nk", z, self.weight)

    def forward(self, z):
        if not self.training and self.bn.track_running_stats and int(self.bn.num_batches_tracked) == 0:
            raise UncalibratedPredictorError(
                "quality predictor has no running statistics; run at least one training batch "
                "or load a trained checkpoint before eval-mode inference")
        return torch.sigmoid(self.bn(self.pre_activation(z)))


def cosine_distance(a, b, dim=-1):
    """``1 - cos(a, b)`` along ``dim``; the norm product is clamped at EPS so zero vectors stay finite."""
    num = (a * b).sum(dim)
    den = (a.norm(dim=dim) * b.norm(dim=dim)).clamp_min(EPS)
    return 1.0 - num / den


def part_cosine_distances(fa, fb):
    """Part-wise cosine distances between ``(..., K, d)`` descriptor sets."""
    if fa.shape != fb.shape:
        raise ConfigError(f"descriptor shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    return cosine_distance(fa, fb)


def quality_weighted_distance(d, qa, qb):
    """Quality-weighted average of part distances; all args broadcast over ``(..., K)``."""
    w = qa * qb
    return (w * d).sum(-1) / w.sum(-1).clamp_min(EPS)


def pairwise_part_distance(fa, qa, fb=None, qb=None):
    """All-pairs quality-weighted part distance.

    Args:
        fa: ``(Na, K, d)`` part features; qa: ``(Na, K)`` scores.
        fb, qb: the second set, defaulting to the first.

    Returns:
        ``(Na, Nb)`` distance matrix.
    """
    if fb is None:
        fb, qb = fa, qa
    dots = torch.einsum("akd,bkd->abk", fa, fb)
    norms = fa.norm(dim=-1)[:, None, :] * fb.norm(dim=-1)[None, :, :]
    d = 1.0 - dots / norms.clamp_min(EPS)
    return quality_weighted_distance(d, qa[:, None, :], qb[None, :, :])


def _check_labels(logits, labels):
    num_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ConfigError(f"label outside classifier range [0, {num_classes})")


def part_id_loss(part_logits, labels):
    """Sum over parts of the per-part cross-entropy, averaged over the batch.

    Args:
        part_logits: ``(N, K, num_classes)`` outputs of the per-part classifiers.
        labels: ``(N,)`` identity labels.
    """
    _check_labels(part_logits, labels)
    N, K, C = part_logits.shape
    ce = F.cross_entropy(part_logits.reshape(N * K, C), labels.repeat_interleave(K), reduction="sum")
    return ce / N


def check_pk_layout(labels, P=None, A=None):
    uniq, counts = torch.unique(labels, return_counts=True)
    if uniq.numel() < 2:
        raise SamplingError("batch-hard mining needs at least 2 identities (P >= 2)")
    if int(counts.min()) < 2:
        raise SamplingError("batch-hard mining needs at least 2 images per identity (A >= 2)")
    if P is not None and (P < 2 or A < 2):
        raise SamplingError(f"invalid layout P={P}, A={A}")


def batch_hard_triplet(dist, labels, margin):
    """Batch-hard triplet loss over a precomputed ``(N, N)`` distance matrix.

    For each anchor the farthest positive and the nearest negative are mined.
    The hinge terms are summed and divided by the number of violating
    triplets; when nothing violates the margin the loss is 0.

    Returns:
        (loss, number_of_violating_triplets)
    """
    check_pk_layout(labels)
    same = labels[:, None] == labels[None, :]
    big = torch.finfo(dist.dtype).max
    hardest_pos = dist.masked_fill(~same, -big).max(dim=1).values
    hardest_neg = dist.masked_fill(same, big).min(dim=1).values
    hinge = F.relu(margin + hardest_pos - hardest_neg)
    n_tp = int((hinge > 0).sum())
    if n_tp == 0:
        return hinge.sum() * 0.0, 0
    return hinge.sum() / n_tp, n_tp


def part_triplet_loss(f, q, labels, margin=0.3):
    """Batch-hard triplet loss on the quality-weighted part distance."""
    if margin <= 0:
        raise ConfigError("triplet margin must be positive")
    loss, _ = batch_hard_triplet(pairwise_part_distance(f, q), labels, margin)
    return loss
