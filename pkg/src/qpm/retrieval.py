"""Gallery indexing, two-stage search and CMC / mAP evaluation."""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError

log = logging.getLogger(__name__)

EPS = 1e-8
DEFAULT_N = 30
DEFAULT_GAMMA = 0.6

MAGIC = b"QPMIDX\x00\x01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")  # magic, version, K, d, C', count
_MODE_CODES = {"agfe": 0, "gap": 1, "si": 2}


@dataclass
class GalleryRecord:
    pid: int
    camid: int
    f: np.ndarray  # (K, d)
    q: np.ndarray  # (K,)
    g: np.ndarray  # (K, C')


@dataclass
class GalleryIndex:
    """Stacked records; immutable after construction.

    ``global_mode`` records how the global distance is formed: ``agfe``
    (pair-adaptive weights), ``gap`` (uniform part average) or ``si``
    (per-image normalized quality).
    """
    pids: np.ndarray
    camids: np.ndarray
    f: np.ndarray
    q: np.ndarray
    g: np.ndarray
    global_mode: str = "agfe"

    def __post_init__(self):
        n = len(self.pids)
        if not (len(self.camids) == len(self.f) == len(self.q) == len(self.g) == n):
            raise ConfigError("index arrays disagree on record count")
        if self.f.shape[1:2] != self.q.shape[1:2] or self.g.shape[1:2] != self.q.shape[1:2]:
            raise ConfigError("index arrays disagree on K")
        for a in (self.f, self.q, self.g, self.pids, self.camids):
            a.setflags(write=False)

    def __len__(self):
        return len(self.pids)

    def __getitem__(self, i) -> GalleryRecord:
        return GalleryRecord(int(self.pids[i]), int(self.camids[i]), self.f[i], self.q[i], self.g[i])

    @property
    def K(self):
        return self.q.shape[1]

    @classmethod
    def from_records(cls, records: Sequence[GalleryRecord], global_mode="agfe"):
        return cls(
            pids=np.array([r.pid for r in records], dtype=np.int64),
            camids=np.array([r.camid for r in records], dtype=np.int64),
            f=np.stack([r.f for r in records]).astype(np.float32),
            q=np.stack([r.q for r in records]).astype(np.float32),
            g=np.stack([r.g for r in records]).astype(np.float32),
            global_mode=global_mode,
        )

    def record_dtype(self):
        K, d, C = self.K, self.f.shape[2], self.g.shape[2]
        return np.dtype([("pid", "<i8"), ("camid", "<i4"), ("f", "<f4", (K, d)),
                         ("q", "<f4", (K,)), ("g", "<f4", (K, C))])

    def save(self, path):
        """Binary dump: fixed header then one fixed-width record per image."""
        K, d, C = self.K, self.f.shape[2], self.g.shape[2]
        recs = np.zeros(len(self), dtype=self.record_dtype())
        recs["pid"], recs["camid"] = self.pids, self.camids
        recs["f"], recs["q"], recs["g"] = self.f, self.q, self.g
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, K, d, C, len(self)))
            fh.write(struct.pack("<I", _MODE_CODES[self.global_mode]))
            fh.write(recs.tobytes())
        return Path(path)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size + 4:
            raise ConfigError(f"{path}: truncated index header")
        magic, version, K, d, C, count = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a QPM index file")
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported index version {version}")
        (mode_code,) = struct.unpack_from("<I", raw, _HEADER.size)
        mode = {v: k for k, v in _MODE_CODES.items()}[mode_code]
        dtype = np.dtype([("pid", "<i8"), ("camid", "<i4"), ("f", "<f4", (K, d)),
                          ("q", "<f4", (K,)), ("g", "<f4", (K, C))])
        body = raw[_HEADER.size + 4:]
        if len(body) != count * dtype.itemsize:
            raise ConfigError(f"{path}: expected {count} records, payload size mismatch")
        recs = np.frombuffer(body, dtype=dtype, count=count)
        return cls(pids=recs["pid"].astype(np.int64), camids=recs["camid"].astype(np.int64),
                   f=recs["f"].copy(), q=recs["q"].copy(), g=recs["g"].copy(), global_mode=mode)


@torch.no_grad()
def index_images(model, images: torch.Tensor, pids, camids, batch_size: int = 128) -> GalleryIndex:
    """Run the network once per image and cache part features, scores and attended parts."""
    if model.training:
        raise ConfigError("index with the model in eval mode")
    fs, qs, gs = [], [], []
    for start in range(0, len(images), batch_size):
        out = model(images[start:start + batch_size])
        fs.append(out["f"].float().numpy())
        qs.append(out["q"].float().numpy())
        gs.append(out["g_tilde"].float().numpy())
    K = model.cfg.K
    empty = lambda dim: np.zeros((0, K, dim), dtype=np.float32)
    return GalleryIndex(
        pids=np.asarray(pids, dtype=np.int64), camids=np.asarray(camids, dtype=np.int64),
        f=np.concatenate(fs) if fs else empty(model.cfg.d),
        q=np.concatenate(qs) if qs else np.zeros((0, K), dtype=np.float32),
        g=np.concatenate(gs) if gs else empty(model.cfg.global_channels),
        global_mode=model.cfg.global_mode,
    )


def index_gallery(samples, model, input_size=None, batch_size: int = 128) -> GalleryIndex:
    """Index a list of :class:`~qpm.data.ReidSample`."""
    from .data import to_tensor

    input_size = input_size or model.cfg.backbone.input_size
    images = to_tensor(samples, input_size)
    return index_images(model, images, [s.pid for s in samples], [s.camid for s in samples], batch_size)


# -------------------------------------------------------------- distances

def _cos_dist(a, b):
    num = (a * b).sum(-1)
    return 1.0 - num / np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1), EPS)


def part_distances(query: GalleryRecord, index: GalleryIndex, subset=None) -> np.ndarray:
    """Quality-weighted part distance from ``query`` to every (or ``subset`` of) gallery item."""
    f = index.f if subset is None else index.f[subset]
    q = index.q if subset is None else index.q[subset]
    d = _cos_dist(query.f.astype(np.float64)[None], f.astype(np.float64))
    w = query.q.astype(np.float64)[None] * q.astype(np.float64)
    return (w * d).sum(-1) / np.maximum(w.sum(-1), EPS)


def global_distances(query: GalleryRecord, index: GalleryIndex, subset=None) -> np.ndarray:
    g = (index.g if subset is None else index.g[subset]).astype(np.float64)
    q = (index.q if subset is None else index.q[subset]).astype(np.float64)
    gq, qq = query.g.astype(np.float64), query.q.astype(np.float64)
    mode = index.global_mode
    if mode == "agfe":
        w = qq[None] * q
        w = w / w.sum(-1, keepdims=True)
        ha = (w[..., None] * gq[None]).sum(1)
        hb = (w[..., None] * g).sum(1)
    elif mode == "gap":
        ha = np.broadcast_to(gq.mean(0), (len(g), gq.shape[1]))
        hb = g.mean(1)
    else:
        hq = ((qq / qq.sum())[:, None] * gq).sum(0)
        ha = np.broadcast_to(hq, (len(g), gq.shape[1]))
        hb = ((q / q.sum(-1, keepdims=True))[..., None] * g).sum(1)
    return _cos_dist(ha, hb)


def _check_gamma(gamma):
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")


def final_distance(query: GalleryRecord, candidate: GalleryRecord, gamma: float = DEFAULT_GAMMA,
                   global_mode: str = "agfe") -> float:
    """Blend of part and pairwise-global distance for one pair."""
    _check_gamma(gamma)
    idx = GalleryIndex.from_records([candidate], global_mode=global_mode)
    dp = part_distances(query, idx)[0]
    if gamma == 1.0:
        return float(dp)
    return float(gamma * dp + (1.0 - gamma) * global_distances(query, idx)[0])


@dataclass
class RankingResult:
    order: np.ndarray
    stage1: np.ndarray  # part distance for every gallery item, by gallery index
    final: np.ndarray  # final distance of the re-ranked prefix, in ``order`` order
    n: int
    gamma: float
    global_evals: int = 0


def stage1_rank(query: GalleryRecord, index: GalleryIndex, n: int = DEFAULT_N):
    """Top-n gallery indices by part distance (stable on ties) plus all stage-1 distances."""
    if len(index) == 0:
        raise ConfigError("empty gallery")
    d = part_distances(query, index)
    order = np.argsort(d, kind="stable")
    return order[:min(n, len(index))], d


def search(query: GalleryRecord, index: GalleryIndex, n: int = DEFAULT_N,
           gamma: float = DEFAULT_GAMMA) -> RankingResult:
    """Rank by part distance, then re-rank the first ``n`` by the blended distance.

    Exactly ``min(n, len(index))`` pairwise global features are formed
    (none at ``gamma == 1``). Items outside the prefix keep stage-1 order.
    """
    _check_gamma(gamma)
    if n < 1:
        raise ConfigError("n must be at least 1")
    if len(index) == 0:
        raise ConfigError("empty gallery")
    d1 = part_distances(query, index)
    order = np.argsort(d1, kind="stable")
    m = min(n, len(index))
    top, rest = order[:m], order[m:]
    if gamma == 1.0:
        final, evals = d1[top], 0
    else:
        final = gamma * d1[top] + (1.0 - gamma) * global_distances(query, index, top)
        evals = len(top)
    resort = np.argsort(final, kind="stable")
    return RankingResult(order=np.concatenate([top[resort], rest]), stage1=d1, final=final[resort],
                         n=m, gamma=gamma, global_evals=evals)


# ------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    cmc: np.ndarray
    mAP: float
    num_valid: int
    num_skipped: int
    ap: Optional[np.ndarray] = None
    config: dict = field(default_factory=dict)

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1]) if len(self.cmc) else 0.0

    def to_dict(self, include_ap=False):
        d = {"rank1": self.rank(1), "rank5": self.rank(5), "rank10": self.rank(10), "mAP": self.mAP,
             "num_valid_queries": self.num_valid, "num_skipped_queries": self.num_skipped,
             "config": self.config}
        if include_ap and self.ap is not None:
            d["ap"] = self.ap.tolist()
        return d


def evaluate_rankings(orders: Sequence[np.ndarray], q_pids, q_camids, g_pids, g_camids,
                      protocol: str = "standard", max_rank: int = 50) -> EvalReport:
    """Single-query CMC and mAP from per-query gallery orderings.

    Under the ``standard`` protocol gallery items sharing both identity and
    camera with the query are removed before scoring; ``partial`` keeps
    every item. Queries with no remaining true match are skipped.
    """
    if protocol not in ("standard", "partial"):
        raise ConfigError(f"unknown protocol {protocol!r}")
    g_pids, g_camids = np.asarray(g_pids), np.asarray(g_camids)
    max_rank = min(max_rank, len(g_pids)) if len(g_pids) else max_rank
    cmc_sum = np.zeros(max_rank)
    aps, skipped = [], 0
    for order, qp, qc in zip(orders, q_pids, q_camids):
        order = np.asarray(order)
        if protocol == "standard":
            keep = ~((g_pids[order] == qp) & (g_camids[order] == qc))
            order = order[keep]
        hits = (g_pids[order] == qp).astype(np.float64)
        if not hits.any():
            skipped += 1
            continue
        first = int(np.argmax(hits))
        if first < max_rank:
            cmc_sum[first:] += 1
        cum = hits.cumsum()
        precision = cum / np.arange(1, len(hits) + 1)
        aps.append(float((precision * hits).sum() / hits.sum()))
    if skipped:
        log.warning("%d queries have no valid gallery match and were skipped", skipped)
    nv = len(aps)
    cmc = cmc_sum / nv if nv else cmc_sum
    return EvalReport(cmc=cmc, mAP=float(np.mean(aps)) if nv else 0.0, num_valid=nv,
                      num_skipped=skipped, ap=np.array(aps))


def search_all(queries: GalleryIndex, gallery: GalleryIndex, n: int = DEFAULT_N,
               gamma: float = DEFAULT_GAMMA, workers: int = 1) -> List[RankingResult]:
    if queries.global_mode != gallery.global_mode:
        raise ConfigError("query and gallery indices use different global modes")
    run = lambda i: search(queries[i], gallery, n, gamma)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, range(len(queries))))
    return [run(i) for i in range(len(queries))]


def evaluate(queries: GalleryIndex, gallery: GalleryIndex, n: int = DEFAULT_N, gamma: float = DEFAULT_GAMMA,
             protocol: str = "standard", max_rank: int = 50, workers: int = 1) -> EvalReport:
    """Search every query and score the rankings."""
    results = search_all(queries, gallery, n, gamma, workers)
    report = evaluate_rankings([r.order for r in results], queries.pids, queries.camids,
                               gallery.pids, gallery.camids, protocol, max_rank)
    report.config = {"n": n, "gamma": gamma, "protocol": protocol, "global_mode": gallery.global_mode}
    return report
