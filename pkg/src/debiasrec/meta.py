"""Learned debiasing: a linear meta model trained on uniform data.

The meta model maps one-hot features to the debiasing parameters:

    w1(u, i, r[, p]) = exp(phi1 . [x_u ; x_i ; e_r (; e_p)])
    w2(u, i)         = exp(phi2 . [x_u ; x_i ; e_O])
    m(u, i)          = tanh(phi3 . [e_r-or-missing ; e_O])

Training alternates three steps per mini-batch: a tentative SGD step of the
factor model under the current meta parameters, an Adam step of the meta
parameters along the gradient of the uniform-data loss after that tentative
step, and the real SGD step under the refreshed meta parameters.  The
gradient through the tentative step is computed in closed form:

    d L_U(theta') / d phi = -lr * (d grad_theta L_T / d phi)^T g_U

with ``g_U`` the uniform-loss gradient at ``theta'``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetBundle, Interactions, ObservationIndicator, write_kv
from .errors import DomainError, TrainingError
from .framework import DebiasConfig, batch_gradient, sample_pairs
from .metrics import BestTracker
from .mf import FactorModel, apply_step, epoch_batches, factor_grad, get_loss, rng_streams, empirical_risk

# label value -> one-hot slot; 0 stands for "no observed label"
LABEL_SLOT = {-1: 0, 1: 1}
M_SLOT = {-1: 0, 1: 1, 0: 2}
BLOCKS = ("phi1", "phi2", "phi3")


def _label_slots(labels, table):
    labels = np.asarray(labels)
    out = np.full(labels.shape, -1, dtype=np.int64)
    for lab, slot in table.items():
        out[labels == lab] = slot
    if (out < 0).any():
        raise DomainError(f"label outside {sorted(table)}")
    return out


@dataclass
class MetaModel:
    n_users: int
    n_items: int
    n_positions: int = 0
    phi1: np.ndarray | None = None
    phi2: np.ndarray | None = None
    phi3: np.ndarray | None = None

    def __post_init__(self):
        sizes = self.block_sizes()
        for name in BLOCKS:
            val = getattr(self, name)
            val = np.zeros(sizes[name]) if val is None else np.array(val, dtype=np.float64)
            if val.shape != (sizes[name],):
                raise DomainError(f"{name} must have {sizes[name]} entries, got {val.shape}")
            setattr(self, name, val)

    def block_sizes(self) -> dict:
        return {
            "phi1": self.n_users + self.n_items + len(LABEL_SLOT) + self.n_positions,
            "phi2": self.n_users + self.n_items + 2,
            "phi3": len(M_SLOT) + 2,
        }

    @property
    def list_mode(self) -> bool:
        return self.n_positions > 0

    def copy(self) -> "MetaModel":
        return replace(self, phi1=self.phi1.copy(), phi2=self.phi2.copy(), phi3=self.phi3.copy())

    def params(self) -> dict:
        return {name: getattr(self, name) for name in BLOCKS}

    # -- feature indices ---------------------------------------------------

    def w1_index(self, users, items, labels, positions=None) -> np.ndarray:
        nu, ni = self.n_users, self.n_items
        cols = [np.asarray(users), nu + np.asarray(items), nu + ni + _label_slots(labels, LABEL_SLOT)]
        if self.list_mode:
            if positions is None:
                raise DomainError("list-mode meta model needs positions")
            positions = np.asarray(positions)
            if positions.size and (positions.min() < 1 or positions.max() > self.n_positions):
                raise DomainError(f"position outside 1..{self.n_positions}")
            cols.append(nu + ni + len(LABEL_SLOT) + positions - 1)
        return np.stack(cols, axis=-1)

    def w2_index(self, users, items, observed) -> np.ndarray:
        nu, ni = self.n_users, self.n_items
        return np.stack([np.asarray(users), nu + np.asarray(items), nu + ni + np.asarray(observed)], axis=-1)

    def m_index(self, labels_or_missing, observed) -> np.ndarray:
        return np.stack(
            [_label_slots(labels_or_missing, M_SLOT), len(M_SLOT) + np.asarray(observed)], axis=-1
        )

    # -- parameter maps ------------------------------------------------------

    def w1(self, users, items, labels, positions=None) -> np.ndarray:
        return np.exp(self.phi1[self.w1_index(users, items, labels, positions)].sum(axis=-1))

    def w2(self, users, items, observed) -> np.ndarray:
        return np.exp(self.phi2[self.w2_index(users, items, observed)].sum(axis=-1))

    def m(self, labels_or_missing, observed) -> np.ndarray:
        return np.tanh(self.phi3[self.m_index(labels_or_missing, observed)].sum(axis=-1))

    def w1_factors(self) -> dict:
        """Per-user, per-item, per-label (and per-position) factors of w1."""
        nu, ni = self.n_users, self.n_items
        off = nu + ni
        out = {
            "user": np.exp(self.phi1[:nu]),
            "item": np.exp(self.phi1[nu:off]),
            "label": {lab: float(np.exp(self.phi1[off + slot])) for lab, slot in LABEL_SLOT.items()},
        }
        if self.list_mode:
            out["position"] = np.exp(self.phi1[off + len(LABEL_SLOT) :])
        return out

    def imputation_values(self) -> dict:
        """m for positive-observed, negative-observed and missing pairs."""
        return {
            "positive": float(self.m([1], [1])[0]),
            "missing": float(self.m([0], [0])[0]),
            "negative": float(self.m([-1], [1])[0]),
        }

    def as_config(self, O: ObservationIndicator, use_pairs=True) -> DebiasConfig:
        return DebiasConfig(
            w1=lambda b: self.w1(b.users, b.items, b.labels, b.positions if self.list_mode else None),
            w2=(lambda u, i: self.w2(u, i, O(u, i))) if use_pairs else None,
            m=lambda u, i: self.m(O.observed_label(u, i), O(u, i)),
            name="meta",
        )

    def save(self, path):
        np.savez(path, header=np.array([self.n_users, self.n_items, self.n_positions]), **self.params())

    @classmethod
    def load(cls, path) -> "MetaModel":
        with np.load(path) as z:
            nu, ni, npos = (int(v) for v in z["header"])
            return cls(nu, ni, npos, z["phi1"], z["phi2"], z["phi3"])


def meta_w1(meta: MetaModel, u, i, r, p=None) -> float:
    return float(meta.w1([u], [i], [r], None if p is None else [p])[0])


def meta_w2(meta: MetaModel, u, i, observed) -> float:
    return float(meta.w2([u], [i], [observed])[0])


def meta_m(meta: MetaModel, r_or_missing, observed) -> float:
    """``r_or_missing`` is -1, +1, or ``None``/0 for an unobserved pair."""
    r = 0 if r_or_missing is None else r_or_missing
    return float(meta.m([r], [observed])[0])


# -- one bi-level step -----------------------------------------------------


@dataclass
class BaseStep:
    """A tentative (or real) SGD step plus what the hypergradient reuses."""

    theta: FactorModel
    theta_new: FactorModel
    lr: float
    batch: Interactions
    w1: np.ndarray
    idx1: np.ndarray
    d_train: np.ndarray
    pairs: tuple | None = None
    w2: np.ndarray | None = None
    idx2: np.ndarray | None = None
    m: np.ndarray | None = None
    m_pre: np.ndarray | None = None
    idx3: np.ndarray | None = None
    d_pairs: np.ndarray | None = None
    cross_pairs: np.ndarray | None = None
    pair_scale: float = 1.0
    risk: float = 0.0


def base_step(
    theta: FactorModel,
    meta: MetaModel,
    batch: Interactions,
    pairs,
    lr,
    weight_decay,
    loss,
    O: ObservationIndicator | None = None,
    pair_scale=None,
) -> BaseStep:
    """``theta - lr * grad_theta L_T(theta | meta)`` on one batch.

    ``pairs`` is ``(users, items)`` for the imputation term or ``None`` to
    drop it.  The pair term is scaled by ``1 / len(pairs)`` unless
    ``pair_scale`` is given.
    """
    if len(batch) == 0:
        raise DomainError("empty training batch")
    loss = get_loss(loss)
    positions = batch.positions if meta.list_mode else None
    idx1 = meta.w1_index(batch.users, batch.items, batch.labels, positions)
    w1 = np.exp(meta.phi1[idx1].sum(axis=-1))
    step = dict(w1=w1, idx1=idx1)
    w2 = m = None
    if pairs is not None:
        if O is None:
            raise DomainError("the imputation term needs the observation indicator")
        pu, pi = (np.asarray(a) for a in pairs)
        if len(pu) == 0:
            raise DomainError("empty pair batch")
        observed = O(pu, pi)
        idx2 = meta.w2_index(pu, pi, observed)
        idx3 = meta.m_index(O.observed_label(pu, pi), observed)
        w2 = np.exp(meta.phi2[idx2].sum(axis=-1))
        m_pre = meta.phi3[idx3].sum(axis=-1)
        m = np.tanh(m_pre)
        if pair_scale is None:
            pair_scale = 1.0 / len(pu)
        step.update(pairs=(pu, pi), w2=w2, idx2=idx2, idx3=idx3, m=m, m_pre=m_pre, pair_scale=pair_scale)
    g_users, g_items, cache = batch_gradient(theta, batch, w1, loss, step.get("pairs"), w2, m, pair_scale or 1.0)
    if not (np.isfinite(g_users).all() and np.isfinite(g_items).all()):
        raise TrainingError("non-finite gradient in base step")
    theta_new = apply_step(theta, g_users, g_items, lr, weight_decay)
    if pairs is not None:
        step.update(d_pairs=cache["d_pairs"], cross_pairs=loss.d_pred_label(cache["f_pairs"], m))
    return BaseStep(
        theta=theta,
        theta_new=theta_new,
        lr=lr,
        batch=batch,
        d_train=cache["d_train"],
        risk=cache["risk_train"] + cache.get("risk_pairs", 0.0),
        **step,
    )


def _directional(theta: FactorModel, g_users, g_items, users, items):
    """``grad_theta f(u, i) . g`` for each pair, evaluated at ``theta``."""
    return np.einsum("kd,kd->k", g_users[users], theta.item_factors[items]) + np.einsum(
        "kd,kd->k", theta.user_factors[users], g_items[items]
    )


def uniform_gradient(theta: FactorModel, uniform: Interactions, loss):
    loss = get_loss(loss)
    f = theta.scores(uniform.users, uniform.items)
    coef = loss.d_pred(f, uniform.labels.astype(np.float64)) / len(uniform)
    return factor_grad(theta, uniform.users, uniform.items, coef)


def hypergradient(step: BaseStep, meta: MetaModel, uniform: Interactions, loss, lr=None) -> dict:
    """Gradient of the uniform-batch loss at ``step.theta_new`` w.r.t. each phi block.

    ``lr`` defaults to the learning rate of the step.
    """
    loss = get_loss(loss)
    if lr is None:
        lr = step.lr
    sizes = meta.block_sizes()
    out = {name: np.zeros(sizes[name]) for name in BLOCKS}
    if len(uniform) == 0:
        raise DomainError("empty uniform batch")
    if lr == 0:
        return out
    g_users, g_items = uniform_gradient(step.theta_new, uniform, loss)
    if not (g_users.any() or g_items.any()):
        return out

    b = step.batch
    proj = _directional(step.theta, g_users, g_items, b.users, b.items)
    c1 = -lr / len(b) * step.w1 * step.d_train * proj
    np.add.at(out["phi1"], step.idx1, np.repeat(c1[:, None], step.idx1.shape[1], axis=1))

    if step.pairs is not None:
        pu, pi = step.pairs
        proj_p = _directional(step.theta, g_users, g_items, pu, pi)
        base = -lr * step.pair_scale * step.w2 * proj_p
        c2 = base * step.d_pairs
        c3 = base * step.cross_pairs * (1.0 - step.m**2)
        np.add.at(out["phi2"], step.idx2, np.repeat(c2[:, None], step.idx2.shape[1], axis=1))
        np.add.at(out["phi3"], step.idx3, np.repeat(c3[:, None], step.idx3.shape[1], axis=1))
    return out


# -- optimiser -------------------------------------------------------------


class Adam:
    """Bias-corrected adaptive moment estimation over named blocks."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m1 = {}
        self.m2 = {}

    def step(self, params: dict, grads: dict, names):
        self.t += 1
        for name in names:
            p = params[name]
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m1 = self.m1.get(name, np.zeros_like(p))
            m2 = self.m2.get(name, np.zeros_like(p))
            m1 = self.beta1 * m1 + (1 - self.beta1) * g
            m2 = self.beta2 * m2 + (1 - self.beta2) * g * g
            self.m1[name], self.m2[name] = m1, m2
            m1_hat = m1 / (1 - self.beta1**self.t)
            m2_hat = m2 / (1 - self.beta2**self.t)
            p -= self.lr * m1_hat / (np.sqrt(m2_hat) + self.eps)

    def state(self) -> dict:
        out = {"t": np.array(self.t)}
        for name in self.m1:
            out[f"m1_{name}"] = self.m1[name]
            out[f"m2_{name}"] = self.m2[name]
        return out


# -- training loop ---------------------------------------------------------

VARIANTS = {
    # learned blocks, whether the imputation term is present
    "full": (("phi1", "phi2", "phi3"), True),
    "w1m": (("phi1", "phi3"), True),
    "w1": (("phi1",), False),
    "none": ((), False),
}


def ablation_variant(kind: str) -> dict:
    """TrainerConfig overrides for the ``full``, ``w1m``, ``w1`` and ``none`` variants.

    ``w1m`` keeps phi2 frozen, so the imputation weight stays at its
    initial constant; ``w1`` has no imputation term at all.
    """
    try:
        learn, use_pairs = VARIANTS[kind]
    except KeyError:
        raise DomainError(f"unknown variant {kind!r}; expected one of {sorted(VARIANTS)}") from None
    return {"learn": learn, "use_pairs": use_pairs}


@dataclass
class TrainerConfig:
    lr: float = 0.01  # base model SGD rate
    meta_lr: float = 1e-3  # Adam rate for the meta model
    weight_decay: float = 0.0
    meta_weight_decay: float = 0.0
    batch_size: int = 512
    pair_batch_size: int = 512
    uniform_batch_size: int | None = None  # None: the whole uniform set
    epochs: int = 30
    seed: int = 0
    dim: int = 10
    loss: str = "logistic"
    learn: tuple = ("phi1", "phi2", "phi3")
    use_pairs: bool = True
    w2_init: float = 1.0  # initial (and, if phi2 is frozen, constant) imputation weight
    k: int = 5
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.lr <= 0 or self.meta_lr <= 0:
            raise DomainError("learning rates must be positive")
        if self.weight_decay < 0 or self.meta_weight_decay < 0:
            raise DomainError("weight decays must be non-negative")
        if self.batch_size < 1 or self.pair_batch_size < 1 or self.epochs < 0:
            raise DomainError("batch sizes must be >= 1 and epochs >= 0")
        if self.w2_init <= 0:
            raise DomainError("w2_init must be positive")
        unknown = set(self.learn) - set(BLOCKS)
        if unknown:
            raise DomainError(f"unknown meta blocks {sorted(unknown)}")
        self.learn = tuple(b for b in BLOCKS if b in self.learn)
        if not self.use_pairs:
            # phi2 / phi3 have nothing to act on
            self.learn = tuple(b for b in self.learn if b == "phi1")

    def variant(self, kind) -> "TrainerConfig":
        return replace(self, **ablation_variant(kind))


@dataclass
class TrainResult:
    model: FactorModel
    meta: MetaModel
    trace: list = field(default_factory=list)
    best_epoch: int | None = None
    final_model: FactorModel | None = None
    final_meta: MetaModel | None = None
    optimizer: Adam | None = None


def init_meta(bundle: DatasetBundle, cfg: TrainerConfig) -> MetaModel:
    n_pos = 0
    if bundle.train.positions is not None and len(bundle.train):
        n_pos = int(bundle.train.positions.max())
    meta = MetaModel(bundle.n_users, bundle.n_items, n_pos)
    # all w2 features start at zero except the O slots, which carry log(w2_init)
    meta.phi2[-2:] = math.log(cfg.w2_init)
    return meta


def train_autodebias(
    bundle: DatasetBundle,
    cfg: TrainerConfig | None = None,
    meta_init: MetaModel | None = None,
    model: FactorModel | None = None,
    validation: Interactions | None = None,
) -> TrainResult:
    """Alternating bi-level training of the factor model and meta model.

    ``validation`` defaults to ``bundle.validation``; the returned ``model``
    and ``meta`` are those of the best validation epoch when it is non-empty.
    """
    cfg = cfg or TrainerConfig()
    loss = get_loss(cfg.loss)
    if cfg.learn and len(bundle.uniform) == 0:
        raise DomainError("meta learning needs a non-empty uniform set")
    if len(bundle.train) == 0:
        raise DomainError("cannot train on an empty training set")
    streams = rng_streams(cfg.seed)
    if model is None:
        model = FactorModel.init(bundle.n_users, bundle.n_items, cfg.dim, seed=cfg.seed, rng=streams["init"])
    meta = init_meta(bundle, cfg) if meta_init is None else meta_init.copy()
    O = bundle.observation() if cfg.use_pairs else None
    adam = Adam(cfg.meta_lr, cfg.betas, weight_decay=cfg.meta_weight_decay)
    params = meta.params()
    train = bundle.train
    uniform = bundle.uniform
    tracker = BestTracker(bundle.validation if validation is None else validation, cfg.k)
    best_meta = None
    trace = []

    for epoch in range(1, cfg.epochs + 1):
        total, steps, meta_steps = 0.0, 0, 0
        for idx in epoch_batches(streams["train"], len(train), cfg.batch_size):
            batch = train[idx]
            pairs = None
            if cfg.use_pairs:
                pairs = sample_pairs(streams["pairs"], bundle.n_users, bundle.n_items, cfg.pair_batch_size)
            if cfg.learn:
                ubatch = uniform
                if cfg.uniform_batch_size is not None and cfg.uniform_batch_size < len(uniform):
                    ubatch = uniform[streams["uniform"].choice(len(uniform), cfg.uniform_batch_size, replace=False)]
                tentative = base_step(model, meta, batch, pairs, cfg.lr, cfg.weight_decay, loss, O)
                grads = hypergradient(tentative, meta, ubatch, loss)
                if any(grads[name].any() for name in cfg.learn):
                    adam.step(params, grads, cfg.learn)
                    meta_steps += 1
            step = base_step(model, meta, batch, pairs, cfg.lr, cfg.weight_decay, loss, O)
            model = step.theta_new
            total += step.risk
            steps += 1
        if not model.is_finite() or not all(np.isfinite(p).all() for p in params.values()):
            raise TrainingError("autodebias training diverged", epoch=epoch)
        row = {
            "epoch": epoch,
            "train_loss": total / steps,
            "uniform_loss": empirical_risk(model, uniform, loss) if len(uniform) else float("nan"),
            "meta_steps": meta_steps,
        }
        before = tracker.best_epoch
        row.update(tracker.update(epoch, model))
        if tracker.best_epoch != before:
            best_meta = meta.copy()
        trace.append(row)

    if tracker.active and tracker.best_model is not None:
        return TrainResult(tracker.best_model, best_meta, trace, tracker.best_epoch, model, meta, adam)
    return TrainResult(model, meta, trace, None, model, meta, adam)


def save_checkpoint(path, model: FactorModel, meta: MetaModel, optimizer: Adam | None, epoch, seed):
    arrays = {
        "user_factors": model.user_factors,
        "item_factors": model.item_factors,
        "meta_header": np.array([meta.n_users, meta.n_items, meta.n_positions]),
        "epoch": np.array(epoch),
        "seed": np.array(seed),
        **meta.params(),
    }
    if optimizer is not None:
        arrays.update({f"adam_{k}": v for k, v in optimizer.state().items()})
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        model = FactorModel(z["user_factors"], z["item_factors"], seed=int(z["seed"]))
        nu, ni, npos = (int(v) for v in z["meta_header"])
        meta = MetaModel(nu, ni, npos, z["phi1"], z["phi2"], z["phi3"])
        return model, meta, int(z["epoch"])


def write_learned_parameters(path, meta: MetaModel):
    vals = {f"m[{k}]": repr(v) for k, v in meta.imputation_values().items()}
    for lab, v in meta.w1_factors()["label"].items():
        vals[f"w1_label[{lab:+d}]"] = repr(v)
    write_kv(path, vals)
