"""Desk-scale experiments: ablation rows and the quality-score study."""
import dataclasses
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import ReidDataset, part_occlusion_fraction, to_tensor
from .retrieval import GalleryIndex, evaluate, index_images
from .training import LOSS_TERMS, TrainConfig, train

log = logging.getLogger(__name__)

PART_LOSSES = {"part_id": True, "part_tp": True}


@dataclass(frozen=True)
class AblationRow:
    label: str
    overrides: dict
    gamma: float
    # None: two-stage search with the configured n; "all": rank the whole gallery with the blended distance
    n: Optional[str] = None


def _toggles(*on):
    return {t: t in on for t in LOSS_TERMS}


ALL = LOSS_TERMS
NO_ISA = ("part_id", "part_tp", "sg_id", "global_tp")

ABLATIONS: Dict[str, AblationRow] = {
    "baseline": AblationRow("Baseline", dict(learn_quality=False, loss_toggles=_toggles("part_id")), 1.0),
    "baseline_triplet": AblationRow("Baseline(+triplet)",
                                    dict(learn_quality=False, loss_toggles=_toggles("part_id", "part_tp")), 1.0),
    "part_branch": AblationRow("Part branch", dict(loss_toggles=_toggles("part_id", "part_tp")), 1.0),
    "gap_global": AblationRow("GAP global", dict(global_mode="gap", isa=False, loss_toggles=_toggles(*NO_ISA)),
                              0.0, "all"),
    "gap_global_isa": AblationRow("GAP global(+ISA)", dict(global_mode="gap", loss_toggles=_toggles(*ALL)),
                                  0.0, "all"),
    "agfe_global": AblationRow("AGFE global", dict(isa=False, loss_toggles=_toggles(*NO_ISA)), 0.0, "all"),
    "agfe_global_isa": AblationRow("AGFE global(+ISA)", dict(loss_toggles=_toggles(*ALL)), 0.0, "all"),
    "qpm": AblationRow("QPM", dict(loss_toggles=_toggles(*ALL)), None),
    "si_global": AblationRow("SI global", dict(global_mode="si", loss_toggles=_toggles(*ALL)), 0.0, "all"),
}
ABLATION_TABLE = ("baseline", "baseline_triplet", "part_branch", "gap_global", "gap_global_isa",
           "agfe_global", "agfe_global_isa", "qpm")


def row_config(base: TrainConfig, row: AblationRow, seed: Optional[int] = None) -> TrainConfig:
    cfg = dataclasses.replace(base, **row.overrides)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _config_key(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


class ExperimentRunner:
    """Trains each distinct configuration once and evaluates any number of rows on it.

    Rows whose training configuration coincides (``AGFE global(+ISA)`` and
    ``QPM`` differ only at inference) share a model.
    """

    def __init__(self, dataset: ReidDataset, base: TrainConfig, n: int = 30, gamma: float = 0.6):
        self.dataset, self.base = dataset, base
        self.n, self.gamma = n, gamma
        size = base.input_size
        self.train_x = to_tensor(dataset.train, size)
        self.train_pids = [s.pid for s in dataset.train]
        self.query_x = to_tensor(dataset.query, size)
        self.gallery_x = to_tensor(dataset.gallery, size)
        self.query_meta = ([s.pid for s in dataset.query], [s.camid for s in dataset.query])
        self.gallery_meta = ([s.pid for s in dataset.gallery], [s.camid for s in dataset.gallery])
        self._models = {}

    def model_for(self, cfg: TrainConfig):
        key = _config_key(cfg)
        if key not in self._models:
            log.info("training %s", key)
            self._models[key] = train(cfg, self.train_x, self.train_pids).model
        return self._models[key]

    def indices(self, model):
        qi = index_images(model, self.query_x, *self.query_meta)
        gi = index_images(model, self.gallery_x, *self.gallery_meta)
        return qi, gi

    def run_row(self, name: str, seed: Optional[int] = None) -> dict:
        row = ABLATIONS[name]
        cfg = row_config(self.base, row, seed)
        model = self.model_for(cfg)
        qi, gi = self.indices(model)
        gamma = self.gamma if row.gamma is None else row.gamma
        n = len(gi) if row.n == "all" else self.n
        report = evaluate(qi, gi, n=n, gamma=gamma)
        return {"row": name, "label": row.label, "seed": cfg.seed, "rank1": report.rank(1),
                "rank5": report.rank(5), "rank10": report.rank(10), "mAP": report.mAP, "n": n, "gamma": gamma}

    def run(self, rows: Sequence[str] = ABLATION_TABLE, seeds: Sequence[int] = (0,)) -> List[dict]:
        return [self.run_row(name, seed) for seed in seeds for name in rows]


def median_by_row(results: Sequence[dict], key: str = "rank1") -> Dict[str, float]:
    rows: Dict[str, List[float]] = {}
    for r in results:
        rows.setdefault(r["row"], []).append(r[key])
    return {k: float(np.median(v)) for k, v in rows.items()}


@torch.no_grad()
def quality_by_occlusion(model, samples, input_size, threshold: float = 0.5) -> dict:
    """Mean predicted score over parts whose ground-truth occlusion fraction exceeds ``threshold``
    versus the remaining parts."""
    model.eval()
    x = to_tensor(samples, input_size)
    q = np.concatenate([model(x[i:i + 128])["q"].numpy() for i in range(0, len(x), 128)])
    K = q.shape[1]
    frac = np.stack([part_occlusion_fraction(s.mask, K) for s in samples])
    occluded = frac > threshold
    return {
        "occluded_mean": float(q[occluded].mean()) if occluded.any() else float("nan"),
        "visible_mean": float(q[~occluded].mean()),
        "occluded_parts": int(occluded.sum()),
        "visible_parts": int((~occluded).sum()),
        "gap": float(q[~occluded].mean() - q[occluded].mean()) if occluded.any() else float("nan"),
    }
