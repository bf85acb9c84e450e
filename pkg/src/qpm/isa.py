"""Identity-aware spatial attention over the global feature maps."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .part_branch import _check_labels, rap_parts

REDUCTION = 4


def normalized_quality(q):
    """``q_k / sum_i q_i`` along the last axis."""
    return q / q.sum(-1, keepdim=True)


def coarse_global(g, q):
    """Quality-weighted fusion of part-pooled vectors: ``(N, K, C'), (N, K) -> (N, C')``."""
    if g.shape[:-1] != q.shape:
        raise ConfigError(f"K mismatch between parts {tuple(g.shape)} and scores {tuple(q.shape)}")
    return (normalized_quality(q).unsqueeze(-1) * g).sum(-2)


def attention_map(G, h_tilde):
    """Sigmoid of the per-pixel inner product with ``h_tilde``: ``(N, C', H, W) -> (N, H, W)``."""
    if G.shape[-3] != h_tilde.shape[-1]:
        raise ConfigError("attention vector and feature maps disagree on channel count")
    return torch.sigmoid(torch.einsum("nchw,nc->nhw", G, h_tilde))


def apply_attention(G, M):
    """Residual re-weighting ``M * G + G`` with ``M`` broadcast over channels."""
    if G.shape[-2:] != M.shape[-2:] or G.shape[:-3] != M.shape[:-2]:
        raise ConfigError(f"attention map {tuple(M.shape)} does not fit feature maps {tuple(G.shape)}")
    return M.unsqueeze(-3) * G + G


class Excitation(nn.Module):
    """Two 1x1 convs (reduce by 4, ReLU, restore) applied to the coarse global vector."""

    def __init__(self, channels, bias=True):
        super().__init__()
        if channels % REDUCTION:
            raise ConfigError(f"global channels {channels} not divisible by {REDUCTION}")
        self.reduce = nn.Linear(channels, channels // REDUCTION, bias=bias)
        self.restore = nn.Linear(channels // REDUCTION, channels, bias=bias)

    def forward(self, h):
        h_hat = F.relu(self.reduce(h))
        return h_hat, self.restore(h_hat)


class ISA(nn.Module):
    """Projects F to G, builds the attention map and returns the re-weighted maps.

    ``forward`` returns a dict with ``G``, ``g`` (part-pooled G), ``h``,
    ``h_hat``, ``h_tilde``, ``M`` and ``G_tilde``. When ``enabled`` is False the
    attention step is skipped and ``G_tilde`` is ``G``.
    """

    def __init__(self, in_channels, channels, K, enabled=True, excite_bias=True):
        super().__init__()
        self.K = K
        self.enabled = enabled
        self.project = nn.Conv2d(in_channels, channels, 1)
        self.excite = Excitation(channels, bias=excite_bias)

    def forward(self, fm, q):
        G = self.project(fm)
        g = rap_parts(G, self.K)
        out = {"G": G, "g": g}
        if not self.enabled:
            out["G_tilde"] = G
            return out
        h = coarse_global(g, q)
        h_hat, h_tilde = self.excite(h)
        M = attention_map(G, h_tilde)
        out.update(h=h, h_hat=h_hat, h_tilde=h_tilde, M=M, G_tilde=apply_attention(G, M))
        return out


def global_id_loss(logits, labels):
    """Mean cross-entropy of the classifier applied to the reduced coarse vector."""
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels)
