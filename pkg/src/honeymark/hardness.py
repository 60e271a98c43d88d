"""Out-of-fold hardness scoring and top-N hard sample selection."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .datasets import Dataset, SplitPlan
from .diffnet import ArchDescriptor, Classifier, TrainConfig, sample_losses, train
from .errors import FormatError, RejectedInput
from .seeding import derive_seed


@dataclass(frozen=True)
class HardnessRecord:
    sample_id: str
    score: float
    scoring_fold: str  # the fold whose proxy produced the score, never the sample's own


@dataclass(frozen=True)
class HardSelection:
    hard_ids: tuple[str, ...]
    rest_ids: tuple[str, ...]


def train_fold_proxies(data: Dataset, plan: SplitPlan, arch: ArchDescriptor, cfg: TrainConfig):
    """Train one proxy per private fold. Returns ``(proxy_a, proxy_b)``."""
    proxy_a = train(arch, data.subset(plan.fold_a_ids), cfg.with_seed(derive_seed(cfg.seed, "proxy", "a")))
    proxy_b = train(arch, data.subset(plan.fold_b_ids), cfg.with_seed(derive_seed(cfg.seed, "proxy", "b")))
    return proxy_a, proxy_b


def score_with_proxies(data: Dataset, plan: SplitPlan, proxy_a: Classifier, proxy_b: Classifier) -> list[HardnessRecord]:
    if set(plan.fold_a_ids) & set(plan.fold_b_ids):
        raise RejectedInput("folds overlap")
    records = []
    # fold_a samples are scored by proxy_b (trained on fold_b) and vice versa
    for ids, proxy, fold in ((plan.fold_a_ids, proxy_b, "b"), (plan.fold_b_ids, proxy_a, "a")):
        if not ids:
            continue
        X, y = data.subset(ids).arrays()
        for sid, loss in zip(ids, sample_losses(proxy, X, y)):
            records.append(HardnessRecord(sid, float(loss), fold))
    return records


def score_hardness(private: Dataset, plan: SplitPlan, arch: ArchDescriptor, cfg: TrainConfig) -> list[HardnessRecord]:
    """Score every private sample by its cross-entropy under the proxy that did not train on it."""
    if set(plan.fold_a_ids) | set(plan.fold_b_ids) != set(plan.private_ids):
        raise RejectedInput("folds do not partition the private ids")
    proxy_a, proxy_b = train_fold_proxies(private, plan, arch, cfg)
    return score_with_proxies(private, plan, proxy_a, proxy_b)


def select_top_n(records: Sequence[HardnessRecord], n: int) -> HardSelection:
    """Highest scores first; equal scores are ordered by ascending sample id."""
    if not 1 <= n <= len(records):
        raise RejectedInput(f"n must be in [1, {len(records)}], got {n}")
    ranked = sorted(records, key=lambda r: (-r.score, r.sample_id))
    return HardSelection(tuple(r.sample_id for r in ranked[:n]), tuple(r.sample_id for r in ranked[n:]))


def write_hardness_csv(records: Sequence[HardnessRecord], path) -> Path:
    path = Path(path)
    ranked = sorted(records, key=lambda r: (-r.score, r.sample_id))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score", "scoring_fold", "rank"])
        for rank, r in enumerate(ranked, start=1):
            w.writerow([r.sample_id, repr(r.score), r.scoring_fold, rank])
    return path


def read_hardness_csv(path) -> list[HardnessRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [HardnessRecord(r["sample_id"], float(r["score"]), r["scoring_fold"]) for r in rows]
    except (KeyError, ValueError) as exc:
        raise FormatError("hardness_csv", str(exc)) from None
