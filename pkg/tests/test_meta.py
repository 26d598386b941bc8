import math

import numpy as np
import pytest

from debiasrec.data import DatasetBundle, Interactions
from debiasrec.errors import DomainError
from debiasrec.framework import debiased_risk
from debiasrec.meta import (
    Adam,
    MetaModel,
    TrainerConfig,
    base_step,
    hypergradient,
    load_checkpoint,
    meta_m,
    meta_w1,
    meta_w2,
    save_checkpoint,
    train_autodebias,
)
from debiasrec.mf import FactorModel, empirical_risk, get_loss, sgd_fit

NU, NI, DIM = 4, 5, 2


def toy(seed, n_train=12, n_uniform=8):
    rng = np.random.default_rng(seed)
    theta = FactorModel(rng.normal(size=(NU, DIM)), rng.normal(size=(NI, DIM)))
    train = Interactions(rng.integers(NU, size=n_train), rng.integers(NI, size=n_train), rng.choice([-1, 1], n_train))
    uniform = Interactions(rng.integers(NU, size=n_uniform), rng.integers(NI, size=n_uniform), rng.choice([-1, 1], n_uniform))
    meta = MetaModel(NU, NI)
    for name in ("phi1", "phi2", "phi3"):
        setattr(meta, name, rng.normal(0, 0.5, getattr(meta, name).shape))
    pairs = (rng.integers(NU, size=6), rng.integers(NI, size=6))
    return rng, theta, train, uniform, meta, pairs


def bundle_of(train, uniform, validation=None):
    empty = Interactions.empty()
    return DatasetBundle(train, uniform, validation or empty, empty, NU, NI)


def test_parameter_examples():
    meta = MetaModel(3, 3)
    meta.phi1[0] = math.log(2)
    assert meta_w1(meta, 0, 1, 1) == pytest.approx(2.0)
    meta.phi2[3 + 2] = math.log(3)
    assert meta_w2(meta, 0, 2, 0) == pytest.approx(3.0)
    meta.phi3[0] = -6.0
    assert meta_m(meta, -1, 0) == pytest.approx(math.tanh(-6.0))
    # saturates near -1; tanh(-6) is -0.9999877
    assert -1.0 < meta_m(meta, -1, 0) < -0.9999
    assert meta_m(meta, None, 0) == 0.0


def test_positivity_and_factorisation():
    rng = np.random.default_rng(0)
    meta = MetaModel(NU, NI, n_positions=3)
    meta.phi1[:] = rng.normal(0, 5, meta.phi1.shape)
    meta.phi2[:] = rng.normal(0, 5, meta.phi2.shape)
    users, items = np.divmod(np.arange(NU * NI), NI)
    for lab in (-1, 1):
        for p in (1, 2, 3):
            w = meta.w1(users, items, np.full(len(users), lab), np.full(len(users), p))
            assert (w > 0).all()
            f = meta.w1_factors()
            expect = f["user"][users] * f["item"][items] * f["label"][lab] * f["position"][p - 1]
            np.testing.assert_allclose(w, expect, rtol=1e-12)
    assert (meta.w2(users, items, np.zeros(len(users), dtype=int)) > 0).all()
    m = meta.m(np.array([-1, 1, 0]), np.array([1, 1, 0]))
    assert (np.abs(m) <= 1).all()
    with pytest.raises(DomainError):
        meta.w1([0], [0], [1], [4])
    with pytest.raises(DomainError):
        MetaModel(2, 2, phi1=np.zeros(3))


def test_meta_config_matches_risk():
    rng, theta, train, _, meta, _ = toy(1)
    O = bundle_of(train, train).observation()
    cfg = meta.as_config(O, use_pairs=False)
    direct = np.mean(meta.w1(train.users, train.items, train.labels) * get_loss("logistic").value(
        theta.scores(train.users, train.items), train.labels))
    assert debiased_risk(theta, train, "all", cfg, "logistic") == pytest.approx(direct, abs=1e-12)


@pytest.mark.parametrize("loss", ["squared", "logistic"])
@pytest.mark.parametrize("use_pairs", [False, True])
def test_hypergradient_matches_finite_differences(loss, use_pairs):
    _, theta, train, uniform, meta, pairs = toy(2)
    O = bundle_of(train, uniform).observation()
    pairs = pairs if use_pairs else None
    lr, wd = 0.3, 0.01
    step = base_step(theta, meta, train, pairs, lr, wd, loss, O)
    grads = hypergradient(step, meta, uniform, loss)
    h = 1e-6
    for name in ("phi1", "phi2", "phi3"):
        fd = np.zeros_like(grads[name])
        for j in range(len(fd)):
            vals = []
            for sign in (1, -1):
                m = meta.copy()
                getattr(m, name)[j] += sign * h
                vals.append(empirical_risk(base_step(theta, m, train, pairs, lr, wd, loss, O).theta_new, uniform, loss))
            fd[j] = (vals[0] - vals[1]) / (2 * h)
        np.testing.assert_allclose(grads[name], fd, rtol=1e-4, atol=1e-8)
        if not use_pairs and name != "phi1":
            assert not grads[name].any()


@pytest.mark.parametrize("loss", ["squared", "logistic"])
def test_hypergradient_matches_autograd(loss):
    torch = pytest.importorskip("torch")
    _, theta, train, uniform, meta, pairs = toy(3)
    O = bundle_of(train, uniform).observation()
    lr, wd = 0.5, 0.02
    step = base_step(theta, meta, train, pairs, lr, wd, loss, O)
    grads = hypergradient(step, meta, uniform, loss)

    t = lambda a: torch.tensor(np.asarray(a), dtype=torch.float64)  # noqa: E731
    phi = {k: t(v).requires_grad_(True) for k, v in meta.params().items()}
    P = t(theta.user_factors).requires_grad_(True)
    Q = t(theta.item_factors).requires_grad_(True)

    def delta(f, y):
        if loss == "squared":
            return (f - y) ** 2
        p = 0.5 * (1 + y)
        return p * torch.nn.functional.softplus(-f) + (1 - p) * torch.nn.functional.softplus(f)

    pu, pi = pairs
    obs = O(pu, pi)
    w1 = torch.exp(phi["phi1"][t(meta.w1_index(train.users, train.items, train.labels)).long()].sum(-1))
    w2 = torch.exp(phi["phi2"][t(meta.w2_index(pu, pi, obs)).long()].sum(-1))
    m = torch.tanh(phi["phi3"][t(meta.m_index(O.observed_label(pu, pi), obs)).long()].sum(-1))
    f_train = (P[t(train.users).long()] * Q[t(train.items).long()]).sum(-1)
    f_pairs = (P[t(pu).long()] * Q[t(pi).long()]).sum(-1)
    risk = (w1 * delta(f_train, t(train.labels))).mean() + (w2 * delta(f_pairs, m)).sum() / len(pu)
    gP, gQ = torch.autograd.grad(risk, (P, Q), create_graph=True)
    # inner gradient agrees with the hand-written one
    np.testing.assert_allclose(
        (P - lr * (gP + wd * P)).detach().numpy(), step.theta_new.user_factors, rtol=1e-12, atol=1e-12
    )
    P2, Q2 = P - lr * (gP + wd * P), Q - lr * (gQ + wd * Q)
    f_u = (P2[t(uniform.users).long()] * Q2[t(uniform.items).long()]).sum(-1)
    outer = delta(f_u, t(uniform.labels)).mean()
    auto = torch.autograd.grad(outer, [phi[k] for k in ("phi1", "phi2", "phi3")])
    for name, g in zip(("phi1", "phi2", "phi3"), auto):
        np.testing.assert_allclose(grads[name], g.numpy(), rtol=1e-9, atol=1e-12)


def test_hypergradient_degenerate_cases():
    _, theta, train, uniform, meta, pairs = toy(4)
    O = bundle_of(train, uniform).observation()
    step = base_step(theta, meta, train, pairs, 0.3, 0.0, "logistic", O)
    assert all(not g.any() for g in hypergradient(step, meta, uniform, "logistic", lr=0.0).values())
    # all-zero factors have zero factor gradients, so g_U vanishes
    zero = FactorModel.zeros(NU, NI, DIM)
    step = base_step(zero, meta, train, pairs, 0.3, 0.0, "squared", O)
    assert all(not g.any() for g in hypergradient(step, meta, uniform, "squared").values())
    with pytest.raises(DomainError):
        hypergradient(step, meta, Interactions.empty(), "squared")


def test_base_step_properties():
    _, theta, train, uniform, meta, pairs = toy(5)
    O = bundle_of(train, uniform).observation()
    assert base_step(theta, meta, train, pairs, 0.0, 0.1, "logistic", O).theta_new.identical(theta)
    # phi = 0 and no pairs: an ordinary SGD step
    plain = base_step(theta, MetaModel(NU, NI), train, None, 0.2, 0.0, "logistic")
    ref = sgd_fit(theta, train, "logistic", lr=0.2, epochs=1, batch_size=len(train), seed=0).model
    np.testing.assert_allclose(plain.theta_new.user_factors, ref.user_factors, rtol=1e-12)
    # a small step lowers the objective it descends
    step = base_step(theta, meta, train, pairs, 0.01, 0.0, "squared", O)
    before = step.risk
    after = base_step(step.theta_new, meta, train, pairs, 0.0, 0.0, "squared", O).risk
    assert after < before
    with pytest.raises(DomainError):
        base_step(theta, meta, Interactions.empty(), None, 0.1, 0.0, "squared")
    with pytest.raises(DomainError):
        base_step(theta, meta, train, pairs, 0.1, 0.0, "squared", None)


def test_adam_matches_reference():
    p = {"a": np.array([1.0, -2.0])}
    opt = Adam(lr=0.1)
    g = {"a": np.array([0.5, -0.25])}
    opt.step(p, g, ["a"])
    # first bias-corrected step moves every coordinate by lr * sign(g)
    np.testing.assert_allclose(p["a"], [0.9, -1.9], rtol=1e-6)
    m1, m2 = np.zeros(2), np.zeros(2)
    x = np.array([1.0, -2.0])
    for t in range(1, 6):
        grad = 2 * x
        m1 = 0.9 * m1 + 0.1 * grad
        m2 = 0.999 * m2 + 0.001 * grad**2
        x = x - 0.1 * (m1 / (1 - 0.9**t)) / (np.sqrt(m2 / (1 - 0.999**t)) + 1e-8)
    p = {"a": np.array([1.0, -2.0])}
    opt = Adam(lr=0.1)
    for _ in range(5):
        opt.step(p, {"a": 2 * p["a"]}, ["a"])
    np.testing.assert_allclose(p["a"], x, rtol=1e-12)


def small_bundle(seed=0):
    rng = np.random.default_rng(seed)
    users, items = np.divmod(np.arange(NU * NI), NI)
    labels = np.where((users + items) % 2 == 0, 1, -1)
    idx = rng.permutation(NU * NI)
    train = Interactions(users[idx[:12]], items[idx[:12]], labels[idx[:12]])
    uniform = Interactions(users[idx[12:]], items[idx[12:]], labels[idx[12:]])
    return bundle_of(train, uniform, validation=uniform)


def test_w1_variant_never_touches_phi2_or_phi3():
    b = small_bundle()
    cfg = TrainerConfig(lr=0.5, meta_lr=0.05, epochs=3, batch_size=4, dim=DIM).variant("w1")
    res = train_autodebias(b, cfg)
    assert not res.final_meta.phi2.any() and not res.final_meta.phi3.any()
    assert res.final_meta.phi1.any()
    cfg = TrainerConfig(lr=0.5, meta_lr=0.05, epochs=3, batch_size=4, dim=DIM, w2_init=0.5).variant("w1m")
    res = train_autodebias(b, cfg)
    assert np.all(res.final_meta.phi2[:-2] == 0) and np.all(res.final_meta.phi2[-2:] == math.log(0.5))
    assert res.final_meta.phi3.any()


def test_frozen_meta_is_plain_sgd():
    b = small_bundle(1)
    init = FactorModel.init(NU, NI, DIM, seed=3)
    cfg = TrainerConfig(lr=0.7, epochs=4, batch_size=5, seed=3, dim=DIM).variant("none")
    res = train_autodebias(b, cfg, model=init, validation=Interactions.empty())
    ref = sgd_fit(init, b.train, "logistic", lr=0.7, epochs=4, batch_size=5, seed=3)
    assert res.model.identical(ref.model)


def test_training_is_deterministic_and_checkpoints_round_trip(tmp_path):
    b = small_bundle(2)
    cfg = TrainerConfig(lr=0.5, meta_lr=0.05, epochs=3, batch_size=4, pair_batch_size=6, dim=DIM, seed=4)
    a, c = train_autodebias(b, cfg), train_autodebias(b, cfg)
    assert a.model.identical(c.model)
    assert all(np.array_equal(a.meta.params()[k], c.meta.params()[k]) for k in a.meta.params())
    save_checkpoint(tmp_path / "ck.npz", a.model, a.meta, a.optimizer, a.best_epoch, 4)
    model, meta, epoch = load_checkpoint(tmp_path / "ck.npz")
    assert model.identical(a.model) and epoch == a.best_epoch
    assert all(np.array_equal(meta.params()[k], a.meta.params()[k]) for k in meta.params())


def test_empty_uniform_is_rejected():
    b = small_bundle()
    b = bundle_of(b.train, Interactions.empty())
    with pytest.raises(DomainError):
        train_autodebias(b, TrainerConfig(epochs=1))
    with pytest.raises(DomainError):
        TrainerConfig(lr=0.0)
    with pytest.raises(DomainError):
        TrainerConfig(learn=("phi9",))
