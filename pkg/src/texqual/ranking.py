"""Rank correlation metrics and brand-disjoint cross-validation.

SROCC is the Pearson correlation of average ranks (ties share their
mean rank).  KROCC is the tau-a statistic: concordant minus discordant
pairs over all n(n-1)/2 pairs, with tied pairs counting as neither -
the literal pair-counting definition, with no tie correction.

Fold plans never split a brand across folds, so a device's brand cannot
leak between training and test sets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MetricError, SizeError
from .rng import make_rng

log = logging.getLogger(__name__)


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values receive the mean of their rank span."""
    a = np.asarray(x, dtype=np.float64)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srocc(x, y) -> float:
    """Spearman rank-order correlation (average ranks for ties)."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.size != b.size:
        raise SizeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 3:
        raise SizeError(f"need at least 3 samples, got {a.size}")
    ra, rb = average_ranks(a), average_ranks(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    na = np.sqrt((da * da).sum())
    nb = np.sqrt((db * db).sum())
    if na == 0.0 or nb == 0.0:
        raise MetricError("rank correlation undefined for a constant vector")
    return float((da * db).sum() / (na * nb))


def krocc(x, y) -> float:
    """Kendall tau-a over all pairs; ties contribute zero."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.size != b.size:
        raise SizeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise SizeError(f"need at least 2 samples, got {a.size}")
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(a.size, k=1)
    total = a.size * (a.size - 1) // 2
    return float((sa[iu] * sb[iu]).sum() / total)


@dataclass(frozen=True)
class FoldPlan:
    """Device -> fold assignment where every brand lives in one fold."""

    k: int
    assignment: dict
    brand_of: dict

    def fold_devices(self, fold: int):
        return sorted(d for d, f in self.assignment.items() if f == fold)

    def train_devices(self, fold: int):
        return sorted(d for d, f in self.assignment.items() if f != fold)


def make_folds(fleet, k: int, seed: int) -> FoldPlan:
    """Brand-disjoint folds balanced by device count (greedy largest-first)."""
    brand_of = {d.device_id: d.brand_id for d in fleet}
    brands = sorted(set(brand_of.values()))
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > len(brands):
        raise ConfigError(f"k={k} exceeds number of brands ({len(brands)})")
    rng = make_rng(seed)
    shuffled = list(rng.permutation(brands))
    sizes = {b: sum(1 for v in brand_of.values() if v == b) for b in brands}
    # Stable sort by descending size; shuffle order breaks size ties.
    ordered = sorted(shuffled, key=lambda b: -sizes[b])
    counts = [0] * k
    fold_of_brand = {}
    for b in ordered:
        f = int(np.argmin(counts))
        fold_of_brand[b] = f
        counts[f] += sizes[b]
    assignment = {d: fold_of_brand[brand_of[d]] for d in brand_of}
    return FoldPlan(k=k, assignment=assignment, brand_of=brand_of)


@dataclass
class FoldScore:
    fold: int
    n: int
    srocc: float | None
    krocc: float | None
    error: str | None = None


@dataclass
class RankReport:
    per_fold: list = field(default_factory=list)
    pooled_srocc: float | None = None
    pooled_krocc: float | None = None
    fold_mean_srocc: float | None = None
    fold_mean_krocc: float | None = None
    pooled_error: str | None = None
    predictions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_fold": [
                {"fold": f.fold, "n": f.n, "srocc": f.srocc, "krocc": f.krocc,
                 "error": f.error}
                for f in self.per_fold
            ],
            "pooled": {"srocc": self.pooled_srocc, "krocc": self.pooled_krocc,
                       "error": self.pooled_error},
            "fold_mean": {"srocc": self.fold_mean_srocc, "krocc": self.fold_mean_krocc},
            "predictions": {k: self.predictions[k] for k in sorted(self.predictions)},
        }


def evaluate_folds(pipeline, labels: dict, plan: FoldPlan) -> RankReport:
    """Train/predict per fold and score rankings.

    `pipeline(train_ids, test_ids, fold)` returns {device_id: prediction}
    for the test devices.  Folds with fewer than 3 devices have their
    SROCC omitted (with a warning); pooled metrics always use every
    prediction.  Whether one should pool predictions or average per-fold
    correlations is a protocol choice, so the report carries both.
    """
    report = RankReport()
    for f in range(plan.k):
        test_ids = plan.fold_devices(f)
        train_ids = plan.train_devices(f)
        preds = pipeline(train_ids, test_ids, f)
        missing = set(test_ids) - set(preds)
        if missing:
            raise ConfigError(f"pipeline returned no prediction for {sorted(missing)}")
        report.predictions.update({d: float(preds[d]) for d in test_ids})
        yt = [labels[d] for d in test_ids]
        yp = [preds[d] for d in test_ids]
        score = FoldScore(fold=f, n=len(test_ids), srocc=None, krocc=None)
        try:
            if len(test_ids) < 3:
                log.warning("fold %d has %d devices; SROCC omitted", f, len(test_ids))
            else:
                score.srocc = srocc(yt, yp)
        except MetricError as exc:
            score.error = str(exc)
            log.warning("fold %d SROCC undefined: %s", f, exc)
        if len(test_ids) >= 2:
            score.krocc = krocc(yt, yp)
        report.per_fold.append(score)

    ids = sorted(report.predictions)
    yt = [labels[d] for d in ids]
    yp = [report.predictions[d] for d in ids]
    try:
        report.pooled_srocc = srocc(yt, yp)
    except (MetricError, SizeError) as exc:
        report.pooled_error = str(exc)
        log.warning("pooled SROCC undefined: %s", exc)
    report.pooled_krocc = krocc(yt, yp)
    fold_s = [s.srocc for s in report.per_fold if s.srocc is not None]
    fold_k = [s.krocc for s in report.per_fold if s.krocc is not None]
    report.fold_mean_srocc = float(np.mean(fold_s)) if fold_s else None
    report.fold_mean_krocc = float(np.mean(fold_k)) if fold_k else None
    return report
