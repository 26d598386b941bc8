"""Reweight-and-impute empirical risk and the fixed debiasing strategies.

A :class:`DebiasConfig` bundles three lazily evaluated pieces:

* ``w1(batch)``: a weight per training interaction,
* ``w2(users, items)``: a weight per user-item pair for the imputation term,
* ``m(users, items)``: the pseudo-label imputed on those pairs.

The debiased risk of a model is

    (1/|train|) * sum_k w1_k * loss(f(u_k, i_k), r_k)
      + scale * sum_{(u,i) in pairs} w2_ui * loss(f(u, i), m_ui)

where ``pairs`` is either every user-item pair (``scale = 1``) or a uniform
sample from them (``scale = n_users * n_items / len(pairs)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Interactions, ObservationIndicator, write_kv
from .errors import DomainError, EstimationError, InvariantError, TrainingError
from .mf import (
    FactorModel,
    FitResult,
    apply_step,
    check_hparams,
    epoch_batches,
    factor_grad,
    get_loss,
    pointwise_coef,
    rng_streams,
)

# enumerate the imputation term exactly up to this many pairs
EXACT_PAIR_LIMIT = 1_000_000


@dataclass
class DebiasConfig:
    w1: Callable[[Interactions], np.ndarray]
    w2: Callable | None = None
    m: Callable | None = None
    name: str = "custom"
    allow_negative: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def has_pairs(self) -> bool:
        return self.w2 is not None

    def weights(self, batch: Interactions) -> np.ndarray:
        w = np.broadcast_to(np.asarray(self.w1(batch), dtype=np.float64), (len(batch),))
        self._check(w, "w1")
        return w

    def pair_terms(self, users, items) -> tuple[np.ndarray, np.ndarray]:
        n = len(users)
        w2 = np.broadcast_to(np.asarray(self.w2(users, items), dtype=np.float64), (n,))
        self._check(w2, "w2")
        m = np.zeros(n) if self.m is None else np.broadcast_to(np.asarray(self.m(users, items), dtype=np.float64), (n,))
        return w2, m

    def _check(self, w, label):
        if not np.isfinite(w).all():
            raise InvariantError(f"{self.name}: non-finite {label}")
        if not self.allow_negative and (w < 0).any():
            raise InvariantError(f"{self.name}: negative {label} weights")


def as_pair_fn(value) -> Callable:
    """Wrap a scalar, a dense ``(n_users, n_items)`` table or a callable."""
    if callable(value):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        scalar = float(arr)
        return lambda users, items: np.full(len(users), scalar)
    if arr.ndim == 2:
        return lambda users, items: arr[users, items]
    raise DomainError(f"expected a scalar, 2-D table or callable, got shape {arr.shape}")


def all_pairs(n_users, n_items):
    users, items = np.divmod(np.arange(n_users * n_items), n_items)
    return users, items


def sample_pairs(rng, n_users, n_items, size):
    return rng.integers(n_users, size=size), rng.integers(n_items, size=size)


def imputation_pairs(n_users, n_items, rng=None, size=100_000):
    """Every pair when the grid is small enough, otherwise a uniform sample."""
    if n_users * n_items <= EXACT_PAIR_LIMIT:
        return all_pairs(n_users, n_items)
    if rng is None:
        raise DomainError("a random generator is needed to subsample a large pair grid")
    return sample_pairs(rng, n_users, n_items, size)


def debiased_risk(model: FactorModel, train, pair_sample, config: DebiasConfig, loss="squared") -> float:
    """Evaluate the debiased risk; ``pair_sample`` is ``(users, items)`` or ``"all"``."""
    if len(train) == 0:
        raise DomainError("debiased risk needs a non-empty training set")
    loss = get_loss(loss)
    w1 = config.weights(train)
    f = model.scores(train.users, train.items)
    risk = float(np.sum(w1 * loss.value(f, train.labels.astype(np.float64)))) / len(train)
    if not config.has_pairs:
        return risk
    if isinstance(pair_sample, str) and pair_sample == "all":
        pair_sample = all_pairs(model.n_users, model.n_items)
    users, items = (np.asarray(a) for a in pair_sample)
    if len(users) == 0:
        return risk
    w2, m = config.pair_terms(users, items)
    scale = model.n_users * model.n_items / len(users)
    fp = model.scores(users, items)
    return risk + scale * float(np.sum(w2 * loss.value(fp, m)))


def batch_gradient(model, batch, w1, loss, pairs=None, w2=None, m=None, pair_scale=1.0):
    """Gradient of one mini-batch of the debiased risk w.r.t. the factors.

    The training part is averaged over the batch; the pair part is
    multiplied by ``pair_scale``.  Returns ``(g_users, g_items, cache)``
    where ``cache`` keeps the per-entry partials for hypergradients.
    """
    labels = batch.labels.astype(np.float64)
    coef, f = pointwise_coef(model, batch.users, batch.items, labels, w1, loss, 1.0 / len(batch))
    g_users, g_items = factor_grad(model, batch.users, batch.items, coef)
    cache = {"f_train": f, "d_train": loss.d_pred(f, labels), "risk_train": float(np.mean(w1 * loss.value(f, labels)))}
    if pairs is not None and len(pairs[0]):
        pu, pi = pairs
        coef_p, fp = pointwise_coef(model, pu, pi, m, w2, loss, pair_scale)
        gu, gi = factor_grad(model, pu, pi, coef_p)
        g_users = g_users + gu
        g_items = g_items + gi
        cache.update(f_pairs=fp, d_pairs=loss.d_pred(fp, m), risk_pairs=pair_scale * float(np.sum(w2 * loss.value(fp, m))))
    return g_users, g_items, cache


def fit_debiased(
    model: FactorModel,
    train,
    config: DebiasConfig,
    loss="squared",
    lr=0.01,
    weight_decay=0.0,
    epochs=10,
    batch_size=256,
    pair_batch_size=256,
    seed=0,
    validation=None,
    k=5,
) -> FitResult:
    """Mini-batch SGD on the debiased risk of a fixed configuration.

    The imputation term is estimated per step from ``pair_batch_size``
    uniformly drawn pairs with the unbiased grid scale factor.
    """
    from .metrics import BestTracker

    check_hparams(lr, weight_decay, epochs, batch_size)
    if len(train) == 0:
        raise DomainError("cannot fit on an empty training set")
    loss = get_loss(loss)
    streams = rng_streams(seed)
    n_grid = model.n_users * model.n_items
    tracker = BestTracker(validation, k)
    trace = []
    for epoch in range(1, epochs + 1):
        total, steps = 0.0, 0
        for idx in epoch_batches(streams["train"], len(train), batch_size):
            batch = train[idx]
            w1 = config.weights(batch)
            pairs = w2 = m = None
            if config.has_pairs:
                pairs = sample_pairs(streams["pairs"], model.n_users, model.n_items, pair_batch_size)
                w2, m = config.pair_terms(*pairs)
            g_users, g_items, cache = batch_gradient(
                model, batch, w1, loss, pairs, w2, m, pair_scale=n_grid / pair_batch_size
            )
            model = apply_step(model, g_users, g_items, lr, weight_decay)
            total += cache["risk_train"] + cache.get("risk_pairs", 0.0)
            steps += 1
        if not model.is_finite() or not math.isfinite(total):
            raise TrainingError("debiased training diverged", epoch=epoch)
        row = {"epoch": epoch, "train_loss": total / steps}
        row.update(tracker.update(epoch, model))
        trace.append(row)
    best = tracker.best_model if tracker.active and tracker.best_model is not None else model
    return FitResult(best, trace, tracker.best_epoch, final_model=model)


# -- propensities ----------------------------------------------------------


@dataclass
class PropensityTable:
    """Observation probabilities ``q(u, i, r)``.

    ``fn`` is vectorised over aligned ``users, items, labels`` arrays.
    """

    fn: Callable
    method: str = "custom"
    info: dict = field(default_factory=dict)

    def __call__(self, users, items, labels=None):
        users = np.asarray(users)
        if labels is None:
            labels = np.zeros(len(users), dtype=np.int64)
        q = np.broadcast_to(np.asarray(self.fn(users, np.asarray(items), np.asarray(labels)), dtype=np.float64), users.shape)
        if (q <= 0).any():
            raise DomainError(f"{self.method} propensity is zero for a queried interaction")
        if (q > 1).any():
            raise DomainError(f"{self.method} propensity exceeds 1")
        return q

    @classmethod
    def constant(cls, value):
        return cls(lambda u, i, r: np.full(len(u), float(value)), method="constant", info={"q": value})

    @classmethod
    def from_pairs(cls, table):
        table = np.asarray(table, dtype=np.float64)
        return cls(lambda u, i, r: table[u, i], method="table")

    @classmethod
    def per_label(cls, values: dict, method="per_label", info=None):
        labels = sorted(values)

        def fn(u, i, r):
            out = np.zeros(len(u))
            for lab in labels:
                out[r == lab] = values[lab]
            return out

        return cls(fn, method=method, info={"q": dict(values), **(info or {})})

    def save(self, path):
        vals = {"method": self.method}
        for key, val in self.info.items():
            if isinstance(val, dict):
                for sub, v in val.items():
                    vals[f"{key}[{sub}]"] = repr(float(v))
            else:
                vals[key] = val
        write_kv(path, vals)


def estimate_propensity_naive_bayes(train, uniform, n_users, n_items) -> PropensityTable:
    """Label-only propensity ``P(r | O=1) P(O=1) / P(r)``.

    ``P(r | O=1)`` comes from the training labels, ``P(O=1)`` is the observed
    fraction of the user-item grid and ``P(r)`` is read off the uniform set.
    """
    if len(uniform) == 0:
        raise EstimationError("naive-Bayes propensities need a non-empty uniform set")
    if len(train) == 0:
        raise EstimationError("naive-Bayes propensities need a non-empty training set")
    p_obs = len(train) / (n_users * n_items)
    q = {}
    counts = {}
    for lab in np.unique(train.labels):
        p_r_obs = float(np.mean(train.labels == lab))
        p_r = float(np.mean(uniform.labels == lab))
        if p_r == 0.0:
            raise EstimationError(f"label {lab} never occurs in the uniform set")
        q[int(lab)] = min(p_r_obs * p_obs / p_r, 1.0)
        counts[int(lab)] = (int(np.sum(train.labels == lab)), int(np.sum(uniform.labels == lab)))
    return PropensityTable.per_label(q, method="naive_bayes", info={"p_obs": p_obs, "counts": counts})


def estimate_position_propensity(train, n_positions=None) -> np.ndarray:
    """Relative examination per 1-based position from positive rates.

    ``q[t-1] = rate(t) / rate(1)``, clipped into ``(0, 1]``.  Relevance is
    confounded with rank under a ranked logging policy, so this tends to
    overstate the decay.
    """
    if train.positions is None or len(train) == 0:
        raise EstimationError("position propensities need list interactions")
    n = int(train.positions.max()) if n_positions is None else int(n_positions)
    hits = np.bincount(train.positions - 1, weights=(train.labels > 0).astype(np.float64), minlength=n)[:n]
    shown = np.bincount(train.positions - 1, minlength=n)[:n]
    if shown[0] == 0 or hits[0] == 0:
        raise EstimationError("no positive feedback at the first position")
    rate = np.divide(hits, shown, out=np.zeros(n), where=shown > 0)
    q = rate / rate[0]
    floor = 1.0 / max(int(shown.sum()), 1)
    return np.clip(q, floor, 1.0)


# -- fixed strategies ------------------------------------------------------


def config_ips(q: PropensityTable, n_train, n_users, n_items) -> DebiasConfig:
    grid = n_users * n_items
    return DebiasConfig(
        w1=lambda b: n_train / (q(b.users, b.items, b.labels) * grid),
        name="ips",
    )


def config_imputation(lam, m_value, n_train, n_users, n_items) -> DebiasConfig:
    grid = n_users * n_items
    w1 = n_train / grid
    return DebiasConfig(
        w1=lambda b: np.full(len(b), w1),
        w2=lambda u, i: np.full(len(u), lam / grid),
        m=as_pair_fn(m_value),
        name="imputation",
    )


def config_doubly_robust(q: PropensityTable, O: ObservationIndicator, m_table, n_train, n_users, n_items) -> DebiasConfig:
    """Doubly robust weights; ``w2`` turns negative on observed pairs with q < 1.

    Propensities of observed pairs are looked up with their observed label.
    """
    grid = n_users * n_items

    def w2(u, i):
        obs = O(u, i)
        out = np.full(len(u), 1.0 / grid)
        hit = obs == 1
        if hit.any():
            out[hit] -= 1.0 / (q(u[hit], i[hit], O.observed_label(u[hit], i[hit])) * grid)
        return out

    return DebiasConfig(
        w1=lambda b: n_train / (q(b.users, b.items, b.labels) * grid),
        w2=w2,
        m=as_pair_fn(m_table),
        name="doubly_robust",
        allow_negative=True,
        meta={"negative_w2": True},
    )


def config_negative_weighting(a, O: ObservationIndicator, negative_label=0.0) -> DebiasConfig:
    a_fn = as_pair_fn(a)
    return DebiasConfig(
        w1=lambda b: np.ones(len(b)),
        w2=lambda u, i: a_fn(u, i) * (1 - O(u, i)),
        m=as_pair_fn(negative_label),
        name="negative_weighting",
    )


def config_ips_variant(q: PropensityTable, O: ObservationIndicator, n_train, n_users, n_items, negative_label=0.0) -> DebiasConfig:
    dr = config_doubly_robust(q, O, negative_label, n_train, n_users, n_items)
    dr.name = "ips_variant"
    return dr


def config_position_ips(q_t) -> DebiasConfig:
    """``w1 = 1 / q_t[position]``; ``q_t`` is indexed by 1-based position."""
    if callable(q_t):
        q_fn = q_t
    else:
        table = np.asarray(q_t, dtype=np.float64)
        q_fn = lambda p: table[p - 1]

    def w1(b):
        if b.positions is None:
            raise DomainError("position IPS needs interactions with list positions")
        q = np.asarray(q_fn(b.positions), dtype=np.float64)
        if (q <= 0).any():
            raise DomainError("position propensity is zero")
        return 1.0 / q

    return DebiasConfig(w1=w1, name="position_ips")


def config_conformity_offset(alpha, b, O: ObservationIndicator, n_train) -> DebiasConfig:
    """Weights that reproduce the squared-loss conformity offset objective.

    ``(alpha*r + (1-alpha)*b - f)^2`` splits into ``alpha*(f - r)^2 +
    (1-alpha)*(f - b)^2`` minus a term that does not depend on ``f``, so the
    risk matches it up to that constant: ``w1 = alpha``, ``w2 = (1-alpha) *
    count(u,i) / n_train`` on observed pairs, ``m = b``.
    """
    b_fn = as_pair_fn(b)
    return DebiasConfig(
        w1=lambda batch: np.full(len(batch), float(alpha)),
        w2=lambda u, i: O.count(u, i) * (1.0 - alpha) / n_train,
        m=b_fn,
        name="conformity_offset",
    )


def conformity_constant(alpha, b, train) -> float:
    """The model-independent gap ``alpha(1-alpha) mean((r - b)^2)``."""
    b_fn = as_pair_fn(b)
    diff = train.labels - b_fn(train.users, train.items)
    return float(alpha * (1 - alpha) * np.mean(diff**2))


def weight_mean_square(config: DebiasConfig, train) -> float:
    """Sum of squared training weights, a variance diagnostic."""
    w = config.weights(train)
    return float(np.sum(w * w))
