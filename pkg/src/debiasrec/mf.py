"""Dot-product matrix factorization, pointwise losses and SGD training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, DomainError, TrainingError, UnsupportedLossError


# -- losses ----------------------------------------------------------------


class Loss:
    """A pointwise error ``delta(pred, label)`` and the partials the
    hypergradient needs.  ``label`` may be a soft pseudo-label."""

    name = "abstract"

    def value(self, pred, label):
        raise NotImplementedError

    def d_pred(self, pred, label):
        raise NotImplementedError

    def d_label(self, pred, label):
        raise NotImplementedError

    def d_pred_label(self, pred, label):
        """Mixed partial d^2 delta / d pred d label."""
        raise UnsupportedLossError(f"loss {self.name!r} has no mixed partial")

    def __repr__(self):
        return f"<loss {self.name}>"


class SquaredLoss(Loss):
    name = "squared"

    def value(self, pred, label):
        return (pred - label) ** 2

    def d_pred(self, pred, label):
        return 2.0 * (pred - label)

    def d_label(self, pred, label):
        return -2.0 * (pred - label)

    def d_pred_label(self, pred, label):
        return np.full(np.broadcast(pred, label).shape, -2.0)


def _sigmoid(x):
    # split by sign to stay finite for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LogisticLoss(Loss):
    """Cross-entropy on the logit ``pred`` with a label in [-1, 1].

    ``softplus(pred) - (1 + label) * pred / 2``, which equals
    ``log(1 + exp(-label * pred))`` at label = +-1 and is linear in the label.
    """

    name = "logistic"

    def value(self, pred, label):
        # p * softplus(-f) + (1 - p) * softplus(f) with p = (1 + label) / 2
        p = 0.5 * (1.0 + np.asarray(label, dtype=np.float64))
        return p * np.logaddexp(0.0, -pred) + (1.0 - p) * np.logaddexp(0.0, pred)

    def d_pred(self, pred, label):
        return _sigmoid(pred) - 0.5 * (1.0 + label)

    def d_label(self, pred, label):
        return -0.5 * np.asarray(pred, dtype=np.float64) + 0.0 * label

    def d_pred_label(self, pred, label):
        return np.full(np.broadcast(pred, label).shape, -0.5)


LOSSES = {"squared": SquaredLoss(), "logistic": LogisticLoss()}


def get_loss(loss) -> Loss:
    if isinstance(loss, Loss):
        return loss
    try:
        return LOSSES[str(loss)]
    except KeyError:
        raise UnsupportedLossError(f"unknown loss {loss!r}; expected one of {sorted(LOSSES)}") from None


# -- model -----------------------------------------------------------------


@dataclass(eq=False)
class FactorModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.user_factors = np.asarray(self.user_factors, dtype=np.float64)
        self.item_factors = np.asarray(self.item_factors, dtype=np.float64)
        if self.user_factors.ndim != 2 or self.item_factors.ndim != 2:
            raise DomainError("factor matrices must be 2-D")
        if self.user_factors.shape[1] != self.item_factors.shape[1] or self.dim < 1:
            raise DomainError("user and item factors need the same dimension >= 1")

    @classmethod
    def init(cls, n_users, n_items, dim=10, seed=0, rng=None):
        """Uniform(-0.01/sqrt(d), 0.01/sqrt(d)) initialisation."""
        if rng is None:
            rng = np.random.default_rng(seed)
        bound = 0.01 / math.sqrt(dim)
        users = rng.uniform(-bound, bound, size=(n_users, dim))
        items = rng.uniform(-bound, bound, size=(n_items, dim))
        return cls(users, items, seed=seed)

    @classmethod
    def zeros(cls, n_users, n_items, dim=1):
        return cls(np.zeros((n_users, dim)), np.zeros((n_items, dim)))

    @property
    def n_users(self):
        return self.user_factors.shape[0]

    @property
    def n_items(self):
        return self.item_factors.shape[0]

    @property
    def dim(self):
        return self.user_factors.shape[1]

    def copy(self) -> "FactorModel":
        return FactorModel(self.user_factors.copy(), self.item_factors.copy(), seed=self.seed)

    def predict(self, u, i) -> float:
        if not (0 <= u < self.n_users and 0 <= i < self.n_items):
            raise BoundsError(f"pair ({u}, {i}) outside {self.n_users}x{self.n_items}")
        return float(self.user_factors[u] @ self.item_factors[i])

    def scores(self, users, items) -> np.ndarray:
        """Vectorised prediction for aligned user and item index arrays."""
        users = np.asarray(users)
        items = np.asarray(items)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise BoundsError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise BoundsError("item index out of range")
        return np.einsum("kd,kd->k", self.user_factors[users], self.item_factors[items])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.user_factors).all() and np.isfinite(self.item_factors).all())

    def identical(self, other: "FactorModel") -> bool:
        return np.array_equal(self.user_factors, other.user_factors) and np.array_equal(
            self.item_factors, other.item_factors
        )

    def save(self, path):
        np.savez(
            path,
            user_factors=self.user_factors,
            item_factors=self.item_factors,
            header=np.array([self.n_users, self.n_items, self.dim, -1 if self.seed is None else self.seed]),
        )

    @classmethod
    def load(cls, path) -> "FactorModel":
        with np.load(path) as z:
            header = z["header"]
            seed = None if header[3] == -1 else int(header[3])
            model = cls(z["user_factors"], z["item_factors"], seed=seed)
        if (model.n_users, model.n_items, model.dim) != tuple(int(h) for h in header[:3]):
            raise DomainError(f"checkpoint header {header} does not match matrices")
        return model


# -- risk and gradients ----------------------------------------------------


def empirical_risk(model: FactorModel, data, loss="squared") -> float:
    """Mean loss over ``data`` (plain, unweighted)."""
    if len(data) == 0:
        raise DomainError("empirical risk of an empty set is undefined")
    loss = get_loss(loss)
    f = model.scores(data.users, data.items)
    return float(np.mean(loss.value(f, data.labels.astype(np.float64))))


def scatter_rows(n_rows, index, rows):
    """Sum ``rows`` into an ``(n_rows, d)`` array by ``index`` (fixed order)."""
    out = np.zeros((n_rows, rows.shape[1]))
    np.add.at(out, index, rows)
    return out


def factor_grad(model: FactorModel, users, items, coef):
    """Gradient of ``sum_k coef_k * f(u_k, i_k)`` w.r.t. both factor matrices."""
    coef = coef[:, None]
    g_users = scatter_rows(model.n_users, users, coef * model.item_factors[items])
    g_items = scatter_rows(model.n_items, items, coef * model.user_factors[users])
    return g_users, g_items


def pointwise_coef(model, users, items, targets, weights, loss, scale):
    """``scale * w_k * d delta / d f`` for each entry, plus the predictions."""
    f = model.scores(users, items)
    return scale * weights * loss.d_pred(f, targets), f


def apply_step(model: FactorModel, g_users, g_items, lr, weight_decay) -> FactorModel:
    """Return ``theta - lr * (grad + weight_decay * theta)`` as a new model."""
    return FactorModel(
        model.user_factors - lr * (g_users + weight_decay * model.user_factors),
        model.item_factors - lr * (g_items + weight_decay * model.item_factors),
        seed=model.seed,
    )


def rng_streams(seed):
    """Independent generators for each random stage of a training run."""
    names = ("init", "train", "pairs", "uniform")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def epoch_batches(rng, n, batch_size):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def check_hparams(lr, weight_decay, epochs, batch_size):
    if lr < 0 or weight_decay < 0:
        raise DomainError("learning rate and weight decay must be non-negative")
    if epochs < 0 or batch_size < 1:
        raise DomainError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class FitResult:
    model: FactorModel
    trace: list = field(default_factory=list)
    best_epoch: int | None = None
    final_model: FactorModel | None = None


def sgd_fit(
    model: FactorModel,
    data,
    loss="squared",
    lr=0.01,
    weight_decay=0.0,
    epochs=10,
    batch_size=256,
    seed=0,
    validation=None,
    k=5,
) -> FitResult:
    """Mini-batch SGD on the plain empirical risk with L2 decay.

    The input model is not modified.  With ``validation`` given, NDCG@k is
    recorded every epoch and ``result.model`` is the best epoch's model;
    otherwise it is the final one.
    """
    from .metrics import BestTracker

    check_hparams(lr, weight_decay, epochs, batch_size)
    if len(data) == 0:
        raise DomainError("cannot fit on an empty training set")
    loss = get_loss(loss)
    rng = rng_streams(seed)["train"]
    labels = data.labels.astype(np.float64)
    ones = np.ones(len(data))
    tracker = BestTracker(validation, k)
    trace = []
    for epoch in range(1, epochs + 1):
        for idx in epoch_batches(rng, len(data), batch_size):
            u, i = data.users[idx], data.items[idx]
            coef, _ = pointwise_coef(model, u, i, labels[idx], ones[idx], loss, 1.0 / len(idx))
            g_users, g_items = factor_grad(model, u, i, coef)
            model = apply_step(model, g_users, g_items, lr, weight_decay)
        train_loss = empirical_risk(model, data, loss)
        if not math.isfinite(train_loss) or not model.is_finite():
            raise TrainingError("training loss diverged", epoch=epoch)
        row = {"epoch": epoch, "train_loss": train_loss}
        row.update(tracker.update(epoch, model))
        trace.append(row)
    best = tracker.best_model if tracker.active and tracker.best_model is not None else model
    return FitResult(best, trace, tracker.best_epoch, final_model=model)
