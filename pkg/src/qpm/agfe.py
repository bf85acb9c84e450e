"""Pairwise global features aggregated from commonly visible parts."""
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .part_branch import EPS, _check_labels, batch_hard_triplet, cosine_distance


def pair_weights(qa, qb):
    """Normalized products of the two images' part scores (last axis = K)."""
    w = qa * qb
    return w / w.sum(-1, keepdim=True)


def pairwise_global(parts_a, parts_b, w):
    """Aggregate each image's parts with the shared pair weights.

    Args:
        parts_a, parts_b: ``(..., K, C')`` pooled attended parts.
        w: ``(..., K)`` pair weights.

    Returns:
        ``(h_a, h_b)``, each ``(..., C')``.
    """
    if parts_a.shape[-2] != w.shape[-1] or parts_b.shape[-2] != w.shape[-1]:
        raise ConfigError("K mismatch between parts and pair weights")
    w = w.unsqueeze(-1)
    return (w * parts_a).sum(-2), (w * parts_b).sum(-2)


def global_distance(parts_a, qa, parts_b, qb):
    """Cosine distance between the two pairwise global features of one (or a batch of) pair(s)."""
    ha, hb = pairwise_global(parts_a, parts_b, pair_weights(qa, qb))
    return cosine_distance(ha, hb)


def all_pairs_weights(qa, qb=None):
    """``(Na, K), (Nb, K) -> (Na, Nb, K)`` pair weights for every ordered pair."""
    qb = qa if qb is None else qb
    return pair_weights(qa[:, None, :], qb[None, :, :])


def all_pairs_global_distance(ga, qa, gb=None, qb=None):
    """``(Na, Nb)`` matrix of pairwise global distances.

    Works on part Gram matrices, so the ``Na x Nb x C'`` pairwise features
    are never materialized.
    """
    same = gb is None
    if same:
        gb, qb = ga, qa
    w = all_pairs_weights(qa, qb)
    cross = torch.einsum("akc,blc->abkl", ga, gb)
    self_a = torch.einsum("akc,alc->akl", ga, ga)
    self_b = torch.einsum("bkc,blc->bkl", gb, gb)
    dot = torch.einsum("abk,abl,abkl->ab", w, w, cross)
    na = torch.einsum("abk,abl,akl->ab", w, w, self_a).clamp_min(0).sqrt()
    nb = torch.einsum("abk,abl,bkl->ab", w, w, self_b).clamp_min(0).sqrt()
    D = 1.0 - dot / (na * nb).clamp_min(EPS)
    if same:
        # the einsum reduction order differs between (a, b) and (b, a); float addition commutes
        D = 0.5 * (D + D.t())
    return D


def sg_id_loss(g_tilde, q, labels, classifier, include_diagonal=True):
    """Identity loss over the pairwise global features of all ordered pairs.

    ``h^p_g`` is labeled with the identity of ``p``. Because the pair weights
    sum to one, the shared classifier commutes with the aggregation, so the
    logits are formed from per-part logits rather than from N^2 features.

    Args:
        g_tilde: ``(N, K, C')``; q: ``(N, K)``; labels: ``(N,)``.
        classifier: ``nn.Linear`` shared by all pairs.
        include_diagonal: keep the ``p == g`` pairs.
    """
    N, K, _ = g_tilde.shape
    part_logits = classifier(g_tilde)
    if classifier.bias is not None:
        part_logits = part_logits - classifier.bias
    _check_labels(part_logits, labels)
    w = all_pairs_weights(q)
    # logits[a, b] classifies h^a_b (parts of a, weights of pair (a, b))
    logits = torch.einsum("abk,akc->abc", w, part_logits)
    if classifier.bias is not None:
        logits = logits + classifier.bias
    n_cls = logits.shape[-1]
    target = labels[:, None].expand(N, N)
    ce = F.cross_entropy(logits.reshape(-1, n_cls), target.reshape(-1), reduction="none").reshape(N, N)
    count = N * N
    if not include_diagonal:
        if N < 2:
            raise ConfigError("excluding self-pairs needs at least two images")
        ce = ce * (1 - torch.eye(N, dtype=ce.dtype, device=ce.device))
        count = N * (N - 1)
    # summing CE(h^p_g) + CE(h^g_p) over all ordered (g, p) visits every entry of ce twice
    return 2.0 * ce.sum() / count


def global_triplet_loss(g_tilde, q, labels, margin=0.3):
    """Batch-hard triplet loss on the pairwise global distance."""
    if margin <= 0:
        raise ConfigError("triplet margin must be positive")
    loss, _ = batch_hard_triplet(all_pairs_global_distance(g_tilde, q), labels, margin)
    return loss


def single_image_triplet_loss(feats, labels, margin=0.3):
    """Batch-hard triplet on per-image global vectors (GAP / SI ablations)."""
    dist = cosine_distance(feats[:, None, :], feats[None, :, :])
    loss, _ = batch_hard_triplet(dist, labels, margin)
    return loss
