"""Synthetic list-feedback data with both selection and position bias.

Ground-truth preferences come from a random low-rank model.  Each user's
items are split into an unbiased reserve and a biased pool; a warm factor
model fit on a few pool items picks a top-k list per user, and clicks on
that list fall off with the square root of the display position.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetBundle, Interactions, save_bundle, split_unbiased
from .errors import DomainError
from .mf import FactorModel, apply_step, factor_grad


@dataclass(frozen=True)
class SimulationSpec:
    n_users: int = 500
    n_items: int = 500
    reserve: int = 150  # per-user items kept for unbiased data
    pool: int = 350  # per-user items the biased log is drawn from
    warm_items: int = 25  # per-user items the warm recommender is fit on
    list_length: int = 25
    seed: int = 0
    split_ratios: tuple = (0.05, 0.05, 0.90)
    latent_dim: int = 10
    preference_scale: float = 1.0  # multiplies the normalised dot products before the sigmoid
    label_threshold: float = 0.5
    warm_dim: int = 10
    warm_epochs: int = 50
    warm_lr: float = 2.0
    warm_batch_size: int = 64

    def __post_init__(self):
        counts = (self.n_users, self.n_items, self.reserve, self.pool, self.warm_items, self.list_length)
        if min(counts) < 1:
            raise DomainError("simulation counts must be positive")
        if self.reserve + self.pool != self.n_items:
            raise DomainError("reserve + pool must equal the number of items")
        if self.warm_items > self.pool or self.list_length > self.pool:
            raise DomainError("warm items and list length must fit in the pool")


def click_probability(relevance, position):
    """``min(r / (2 sqrt(p)), 1)`` for 1-based position ``p``."""
    return np.minimum(np.asarray(relevance, dtype=np.float64) / (2.0 * np.sqrt(position)), 1.0)


def preference_scores(n_users, n_items, dim, rng, scale=1.0) -> np.ndarray:
    """Min-max normalised sigmoid of random low-rank affinities, in [0, 1]."""
    users = rng.standard_normal((n_users, dim))
    items = rng.standard_normal((n_items, dim))
    raw = 1.0 / (1.0 + np.exp(-scale * (users @ items.T) / np.sqrt(dim)))
    lo, hi = raw.min(), raw.max()
    return (raw - lo) / (hi - lo)


def generate_simulation_with_truth(spec: SimulationSpec = SimulationSpec()) -> tuple[DatasetBundle, np.ndarray]:
    names = ("prefs", "split", "warm_sample", "warm_model", "clicks", "unbiased")
    rngs = dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(len(names)))))
    nu, ni = spec.n_users, spec.n_items
    scores = preference_scores(nu, ni, spec.latent_dim, rngs["prefs"], spec.preference_scale)

    perm = np.argsort(rngs["split"].random((nu, ni)), axis=1)
    reserve, pool = perm[:, : spec.reserve], perm[:, spec.reserve :]

    # warm recommender on a random slice of each user's pool
    picks = np.argsort(rngs["warm_sample"].random((nu, spec.pool)), axis=1)[:, : spec.warm_items]
    warm_items = np.take_along_axis(pool, picks, axis=1)
    warm_users = np.repeat(np.arange(nu), spec.warm_items)
    warm_items = warm_items.ravel()
    warm_model = FactorModel(
        rngs["warm_model"].normal(0.0, 0.1, (nu, spec.warm_dim)),
        rngs["warm_model"].normal(0.0, 0.1, (ni, spec.warm_dim)),
    )
    warm_model = _fit_regression(warm_model, warm_users, warm_items, scores[warm_users, warm_items], spec, rngs["warm_model"])

    # top-k of the pool under the warm model, then position-biased clicks
    pool_scores = np.take_along_axis(warm_model.user_factors @ warm_model.item_factors.T, pool, axis=1)
    order = np.argsort(-pool_scores, axis=1, kind="stable")[:, : spec.list_length]
    shown = np.take_along_axis(pool, order, axis=1)
    positions = np.tile(np.arange(1, spec.list_length + 1), (nu, 1))
    users = np.repeat(np.arange(nu)[:, None], spec.list_length, axis=1)
    prob = click_probability(scores[users, shown], positions)
    clicks = rngs["clicks"].random(prob.shape) < prob
    train = Interactions(users.ravel(), shown.ravel(), np.where(clicks, 1, -1).ravel(), positions.ravel())

    ru = np.repeat(np.arange(nu), spec.reserve)
    ri = reserve.ravel()
    rl = np.where(scores[ru, ri] > spec.label_threshold, 1, -1)
    unbiased = Interactions(ru, ri, rl)
    split_seed = int(rngs["unbiased"].integers(2**63 - 1))
    uniform, validation, test = split_unbiased(unbiased, spec.split_ratios, split_seed)
    bundle = DatasetBundle(train, uniform, validation, test, nu, ni, feedback_kind="list", seed=spec.seed)
    return bundle, scores


def _fit_regression(model, users, items, targets, spec, rng):
    """Squared-loss SGD on real-valued targets (the warm recommender)."""
    n = len(users)
    for _ in range(spec.warm_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, spec.warm_batch_size):
            idx = perm[start : start + spec.warm_batch_size]
            f = model.scores(users[idx], items[idx])
            coef = 2.0 * (f - targets[idx]) / len(idx)
            g_users, g_items = factor_grad(model, users[idx], items[idx], coef)
            model = apply_step(model, g_users, g_items, spec.warm_lr, 0.0)
    return model


def generate_simulation(spec: SimulationSpec = SimulationSpec()) -> DatasetBundle:
    return generate_simulation_with_truth(spec)[0]


def save_simulation(bundle: DatasetBundle, scores: np.ndarray, directory) -> Path:
    d = save_bundle(bundle, directory)
    np.savetxt(d / "scores.txt", scores, fmt="%.17g")
    return d
