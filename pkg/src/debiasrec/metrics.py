"""Test-set metrics: NLL, AUC and per-user NDCG@k."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError


class UndefinedMetricError(DomainError):
    pass


def nll_from_scores(scores, labels) -> float:
    """``-mean(log(1 + exp(-r * f)))``; 0 is best, values are <= 0."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise DomainError("NLL of an empty set is undefined")
    return float(-np.mean(np.logaddexp(0.0, -np.asarray(labels, dtype=np.float64) * scores)))


def auc_from_scores(scores, labels) -> float:
    """Rank-sum AUC with average ranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) > 0
    n_pos = int(pos.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def per_user_ndcg(users, items, labels, scores, k) -> tuple[np.ndarray, np.ndarray]:
    """NDCG@k for each user that has a positive test item.

    Candidates are the user's own test items, ranked by descending score;
    equal scores are ordered by item index.  Returns ``(user_ids, ndcg)``.
    """
    if not k >= 1:
        raise DomainError(f"k must be >= 1, got {k}")
    users = np.asarray(users)
    if users.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    items = np.asarray(items)
    pos = np.asarray(labels) > 0
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((items, -scores, users))
    su, spos = users[order], pos[order]
    starts = np.flatnonzero(np.r_[True, su[1:] != su[:-1]])
    group_sizes = np.diff(np.r_[starts, len(su)])
    rank = np.arange(len(su)) - np.repeat(starts, group_sizes) + 1
    gain = np.where(spos & (rank <= k), 1.0 / np.log2(rank + 1.0), 0.0)
    dcg = np.add.reduceat(gain, starts)
    n_pos = np.add.reduceat(spos.astype(np.int64), starts)
    cutoff = n_pos if math.isinf(k) else np.minimum(n_pos, int(k))
    max_len = int(cutoff.max()) if len(cutoff) else 0
    ideal_prefix = np.r_[0.0, np.cumsum(1.0 / np.log2(np.arange(2, max_len + 2)))]
    idcg = ideal_prefix[cutoff]
    keep = n_pos > 0
    return su[starts][keep], dcg[keep] / idcg[keep]


def ndcg_from_scores(users, items, labels, scores, k) -> float:
    _, vals = per_user_ndcg(users, items, labels, scores, k)
    if vals.size == 0:
        raise UndefinedMetricError("no user has a positive test item")
    return float(vals.mean())


def nll(model, test) -> float:
    return nll_from_scores(model.scores(test.users, test.items), test.labels)


def auc(model, test) -> float:
    return auc_from_scores(model.scores(test.users, test.items), test.labels)


def ndcg_at_k(model, test, k=5) -> float:
    return ndcg_from_scores(test.users, test.items, test.labels, model.scores(test.users, test.items), k)


@dataclass
class MetricsReport:
    nll: float | None
    auc: float | None
    ndcg_at: dict = field(default_factory=dict)
    slices: dict = field(default_factory=dict)

    def as_row(self, prefix="") -> dict:
        row = {f"{prefix}nll": self.nll, f"{prefix}auc": self.auc}
        for k, v in sorted(self.ndcg_at.items()):
            row[f"{prefix}ndcg@{k}"] = v
        for name, sub in self.slices.items():
            row.update(sub.as_row(prefix=f"{prefix}{name}_"))
        return row


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate(model, test, ks=(5,)) -> MetricsReport:
    scores = model.scores(test.users, test.items)
    return MetricsReport(
        nll=nll_from_scores(scores, test.labels) if len(test) else None,
        auc=_safe(auc_from_scores, scores, test.labels),
        ndcg_at={k: _safe(ndcg_from_scores, test.users, test.items, test.labels, scores, k) for k in ks},
    )


def popular_items(train, n_items, top_fraction=0.2) -> np.ndarray:
    """Boolean mask of the top ``top_fraction`` items by positive train count.

    Ties in frequency are broken by item index (lower index first).
    """
    freq = np.bincount(train.items[train.labels > 0], minlength=n_items)
    order = np.lexsort((np.arange(n_items), -freq))
    n_top = math.ceil(top_fraction * n_items)
    mask = np.zeros(n_items, dtype=bool)
    mask[order[:n_top]] = True
    return mask


def popularity_slices(model, bundle, top_fraction=0.2, ks=(5,)) -> MetricsReport:
    """Overall report plus ``popular`` / ``unpopular`` sub-reports.

    Each slice restricts the test split to interactions on that slice's
    items, then ranks within the restricted per-user candidate lists.
    """
    mask = popular_items(bundle.train, bundle.n_items, top_fraction)
    report = evaluate(model, bundle.test, ks)
    for name, keep in (("popular", mask), ("unpopular", ~mask)):
        sub = bundle.test[keep[bundle.test.items]]
        report.slices[name] = evaluate(model, sub, ks) if len(sub) else MetricsReport(None, None)
    return report


class BestTracker:
    """Keeps the model with the highest validation NDCG@k seen so far."""

    def __init__(self, validation=None, k=5):
        self.validation = validation if validation is not None and len(validation) else None
        self.k = k
        self.best_score = -math.inf
        self.best_epoch = None
        self.best_model = None

    @property
    def active(self):
        return self.validation is not None

    def update(self, epoch, model) -> dict:
        if not self.active:
            return {}
        try:
            score = ndcg_at_k(model, self.validation, self.k)
        except UndefinedMetricError:
            return {}
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.best_model = model.copy()
        return {f"val_ndcg@{self.k}": score}
