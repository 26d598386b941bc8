"""Small, fully enumerated ground-truth worlds.

A world is a pair of probability tables over ``(user, item, label)``: the
distribution training data is collected from (``p_train``) and the ideal
unbiased one (``p_unbiased``).  Everything here is computed by exact
summation, so it can serve as an oracle for the debiased risk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Interactions
from .errors import DomainError
from .framework import DebiasConfig, all_pairs
from .mf import FactorModel, get_loss


@dataclass(frozen=True)
class WorldDistribution:
    p_train: np.ndarray  # (n_users, n_items, n_labels)
    p_unbiased: np.ndarray
    labels: tuple = (-1, 1)

    def __post_init__(self):
        for name in ("p_train", "p_unbiased"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            if arr.ndim != 3 or arr.shape[2] != len(self.labels):
                raise DomainError(f"{name} must be (n_users, n_items, {len(self.labels)})")
            if (arr < 0).any():
                raise DomainError(f"{name} has negative entries")
            if abs(arr.sum() - 1.0) > 1e-9:
                raise DomainError(f"{name} sums to {arr.sum()}, not 1")
        if self.p_train.shape != self.p_unbiased.shape:
            raise DomainError("the two tables must have the same shape")

    @property
    def n_users(self):
        return self.p_train.shape[0]

    @property
    def n_items(self):
        return self.p_train.shape[1]

    @property
    def covered(self) -> np.ndarray:
        """Mask of S1: both tables positive."""
        return (self.p_train > 0) & (self.p_unbiased > 0)

    @property
    def uncovered(self) -> np.ndarray:
        """Mask of S0: only the unbiased table is positive."""
        return (self.p_train == 0) & (self.p_unbiased > 0)

    def label_index(self, labels) -> np.ndarray:
        lookup = {lab: k for k, lab in enumerate(self.labels)}
        return np.array([lookup[int(r)] for r in np.asarray(labels)], dtype=np.int64)

    def sample_train(self, rng, size) -> Interactions:
        flat = rng.choice(self.p_train.size, size=size, p=self.p_train.ravel())
        u, i, r = np.unravel_index(flat, self.p_train.shape)
        return Interactions(u, i, np.asarray(self.labels)[r])


def _score_table(f, n_users, n_items) -> np.ndarray:
    if isinstance(f, FactorModel):
        return f.user_factors @ f.item_factors.T
    table = np.asarray(f, dtype=np.float64)
    if table.shape != (n_users, n_items):
        raise DomainError("score table shape does not match the world")
    return table


def true_risk(f, world: WorldDistribution, loss="squared") -> float:
    """Exact expectation of the loss under the unbiased distribution."""
    loss = get_loss(loss)
    scores = _score_table(f, world.n_users, world.n_items)
    total = 0.0
    for k, lab in enumerate(world.labels):
        total += float(np.sum(world.p_unbiased[:, :, k] * loss.value(scores, float(lab))))
    return total


def expected_debiased_risk(f, world: WorldDistribution, config: DebiasConfig, loss="squared") -> float:
    """Expectation of the debiased risk over training sets drawn from ``p_train``.

    Each training draw contributes ``p_train * w1 * loss`` (only triples
    with ``p_train > 0`` can be drawn), and the imputation term is summed
    over every user-item pair.
    """
    loss = get_loss(loss)
    scores = _score_table(f, world.n_users, world.n_items)
    u, i, r = np.nonzero(world.p_train > 0)
    total = 0.0
    if len(u):
        labels = np.asarray(world.labels)[r]
        w1 = config.weights(Interactions(u, i, labels))
        total += float(np.sum(world.p_train[u, i, r] * w1 * loss.value(scores[u, i], labels.astype(np.float64))))
    if config.has_pairs:
        pu, pi = all_pairs(world.n_users, world.n_items)
        w2, m = config.pair_terms(pu, pi)
        total += float(np.sum(w2 * loss.value(scores[pu, pi], m)))
    return total


def optimal_config(world: WorldDistribution) -> DebiasConfig:
    """Weights and pseudo-labels that make the debiased risk unbiased.

    ``w1 = p_unbiased / p_train`` on drawable triples; ``w2`` is the unbiased
    mass the training distribution never reaches, and ``m`` is the mean
    label over that unreachable mass (0 where there is none).
    """
    pt, pu = world.p_train, world.p_unbiased
    labels = np.asarray(world.labels, dtype=np.float64)
    unreach = np.where(pt == 0, pu, 0.0)
    w2_table = unreach.sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        m_table = np.where(w2_table > 0, (unreach * labels).sum(axis=2) / w2_table, 0.0)

    def w1(batch):
        r = world.label_index(batch.labels)
        p_t = pt[batch.users, batch.items, r]
        if (p_t == 0).any():
            raise DomainError("w1 is undefined where the training distribution has no mass")
        return pu[batch.users, batch.items, r] / p_t

    return DebiasConfig(
        w1=w1,
        w2=lambda u, i: w2_table[u, i],
        m=lambda u, i: m_table[u, i],
        name="optimal",
    )


def random_world(n_users, n_items, rng, labels=(-1, 1), p_zero_train=0.35, p_zero_unbiased=0.1, pure_uncovered=False):
    """A random world with some triples unreachable by the training table.

    With ``pure_uncovered`` every pair's unreachable mass sits on a single
    label, which makes the imputation identity exact for the squared loss.
    """
    shape = (n_users, n_items, len(labels))
    pu = rng.random(shape) * (rng.random(shape) > p_zero_unbiased)
    pt = rng.random(shape) * (rng.random(shape) > p_zero_train)
    if pure_uncovered:
        # keep at most one unreachable label per pair
        unreach = (pt == 0) & (pu > 0)
        for u, i in zip(*np.nonzero(unreach.sum(axis=2) > 1)):
            ks = np.flatnonzero(unreach[u, i])
            keep = rng.choice(ks)
            for k in ks:
                if k != keep:
                    pt[u, i, k] = rng.random() + 1e-3
    if pt.sum() == 0:
        pt[0, 0, 0] = 1.0
    if pu.sum() == 0:
        pu[0, 0, 0] = 1.0
    return WorldDistribution(pt / pt.sum(), pu / pu.sum(), tuple(labels))
