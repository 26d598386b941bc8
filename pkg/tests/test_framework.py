import numpy as np
import pytest

from debiasrec.data import Interactions, ObservationIndicator
from debiasrec.errors import DomainError, EstimationError, InvariantError
from debiasrec.framework import (
    DebiasConfig,
    PropensityTable,
    all_pairs,
    config_conformity_offset,
    config_doubly_robust,
    config_imputation,
    config_ips,
    config_ips_variant,
    config_negative_weighting,
    config_position_ips,
    conformity_constant,
    debiased_risk,
    estimate_position_propensity,
    estimate_propensity_naive_bayes,
    fit_debiased,
    imputation_pairs,
    sample_pairs,
    weight_mean_square,
)
from debiasrec.mf import FactorModel, empirical_risk, get_loss
from debiasrec.world import optimal_config, random_world, true_risk

from oracles import (
    NI,
    NU,
    direct_dr,
    direct_imputation,
    direct_ips,
    direct_ips_variant,
    direct_negative_weighting,
    direct_offset,
    direct_position_ips,
    instance,
)

# -- provider equalities --------------------------------------------------------


@pytest.mark.parametrize("loss", ["squared", "logistic"])
@pytest.mark.parametrize("seed", range(5))
def test_ips(loss, seed):
    _, model, train, q = instance(seed)
    loss = get_loss(loss)
    cfg = config_ips(PropensityTable.from_pairs(q), len(train), NU, NI)
    assert debiased_risk(model, train, "all", cfg, loss) == pytest.approx(direct_ips(model, train, q, loss), abs=1e-12)


@pytest.mark.parametrize("loss", ["squared", "logistic"])
@pytest.mark.parametrize("seed", range(5))
def test_imputation(loss, seed):
    rng, model, train, _ = instance(seed)
    loss = get_loss(loss)
    m = rng.uniform(-1, 1, size=(NU, NI))
    cfg = config_imputation(0.3, m, len(train), NU, NI)
    got = debiased_risk(model, train, "all", cfg, loss)
    assert got == pytest.approx(direct_imputation(model, train, 0.3, m, loss), abs=1e-12)


@pytest.mark.parametrize("loss", ["squared", "logistic"])
@pytest.mark.parametrize("seed", range(5))
def test_doubly_robust(loss, seed):
    rng, model, train, q = instance(seed)
    loss = get_loss(loss)
    m = rng.uniform(-1, 1, size=(NU, NI))
    O = ObservationIndicator(train, NU, NI)
    cfg = config_doubly_robust(PropensityTable.from_pairs(q), O, m, len(train), NU, NI)
    assert cfg.allow_negative and cfg.meta["negative_w2"]
    got = debiased_risk(model, train, "all", cfg, loss)
    assert got == pytest.approx(direct_dr(model, train, q, m, loss), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conformity_offset(seed):
    rng, model, train, _ = instance(seed, unique_pairs=False)
    b = rng.uniform(-1, 1, size=(NU, NI))
    O = ObservationIndicator(train, NU, NI)
    cfg = config_conformity_offset(0.7, b, O, len(train))
    got = debiased_risk(model, train, "all", cfg, "squared") - conformity_constant(0.7, b, train)
    assert got == pytest.approx(direct_offset(model, train, 0.7, b), abs=1e-12)


@pytest.mark.parametrize("loss", ["squared", "logistic"])
@pytest.mark.parametrize("seed", range(5))
def test_negative_weighting(loss, seed):
    rng, model, train, _ = instance(seed)
    loss = get_loss(loss)
    a = rng.uniform(0, 0.2, size=(NU, NI))
    cfg = config_negative_weighting(a, ObservationIndicator(train, NU, NI))
    got = debiased_risk(model, train, "all", cfg, loss)
    assert got == pytest.approx(direct_negative_weighting(model, train, a, loss), abs=1e-12)


@pytest.mark.parametrize("loss", ["squared", "logistic"])
@pytest.mark.parametrize("seed", range(5))
def test_ips_variant(loss, seed):
    _, model, train, q = instance(seed)
    loss = get_loss(loss)
    cfg = config_ips_variant(PropensityTable.from_pairs(q), ObservationIndicator(train, NU, NI), len(train), NU, NI)
    got = debiased_risk(model, train, "all", cfg, loss)
    # the recovered weights carry an extra 1/(|U||I|) factor
    assert got == pytest.approx(direct_ips_variant(model, train, q, loss) / (NU * NI), abs=1e-12)


@pytest.mark.parametrize("loss", ["squared", "logistic"])
@pytest.mark.parametrize("seed", range(5))
def test_position_ips(loss, seed):
    rng, model, train, _ = instance(seed, positions=True)
    loss = get_loss(loss)
    q_t = rng.uniform(0.1, 1.0, size=5)
    got = debiased_risk(model, train, "all", config_position_ips(q_t), loss)
    assert got == pytest.approx(direct_position_ips(model, train, q_t, loss), abs=1e-12)


def test_provider_arithmetic():
    batch = Interactions([0], [0], [1], [4])
    cfg = config_ips(PropensityTable.constant(0.5), 10, 10, 10)
    assert cfg.weights(batch)[0] == pytest.approx(0.2)
    cfg = config_ips(PropensityTable.constant(10 / 100), 10, 10, 10)
    assert cfg.weights(batch)[0] == pytest.approx(1.0)
    assert config_position_ips(np.array([1, 1, 1, 0.25])).weights(batch)[0] == 4.0
    assert config_position_ips(np.ones(4)).weights(batch)[0] == 1.0
    with pytest.raises(DomainError):
        config_position_ips(np.ones(4)).weights(Interactions([0], [0], [1]))
    with pytest.raises(DomainError):
        config_ips(PropensityTable.constant(0.0), 10, 10, 10).weights(batch)


def test_provider_reductions():
    train = Interactions([0, 1], [1, 0], [1, -1])
    O = ObservationIndicator(train, 2, 2)
    users, items = all_pairs(2, 2)
    full = Interactions(users, items, np.ones(4, dtype=int))
    O_full = ObservationIndicator(full, 2, 2)
    # q = 1 and every pair observed: no imputation weight left
    for cfg in (config_doubly_robust(PropensityTable.constant(1.0), O_full, 0.0, 4, 2, 2),
                config_ips_variant(PropensityTable.constant(1.0), O_full, 4, 2, 2),
                config_negative_weighting(0.5, O_full)):
        assert (cfg.pair_terms(users, items)[0] == 0).all()
    # nothing observed: doubly robust is pure imputation
    empty = ObservationIndicator(Interactions.empty(), 2, 2)
    dr = config_doubly_robust(PropensityTable.constant(0.5), empty, 0.0, 1, 2, 2)
    np.testing.assert_allclose(dr.pair_terms(users, items)[0], 1 / 4)
    w2, m = config_conformity_offset(1.0, 0.0, O, 2).pair_terms(users, items)
    assert (w2 == 0).all() and (m == 0).all()
    model = FactorModel(np.ones((2, 1)), np.ones((2, 1)))
    lam0 = config_imputation(0.0, 0.5, 2, 2, 2)
    assert debiased_risk(model, train, "all", lam0, "squared") == pytest.approx(empirical_risk(model, train, "squared") * 2 / 4)
    nw0 = config_negative_weighting(0.0, O)
    assert debiased_risk(model, train, "all", nw0, "squared") == empirical_risk(model, train, "squared")


def test_plain_config_is_empirical_risk():
    _, model, train, _ = instance(0, unique_pairs=False)
    plain = DebiasConfig(w1=lambda b: np.ones(len(b)))
    assert debiased_risk(model, train, "all", plain, "logistic") == empirical_risk(model, train, "logistic")
    with pytest.raises(DomainError):
        debiased_risk(model, Interactions.empty(), "all", plain)


def test_invariant_errors():
    _, model, train, _ = instance(1)
    neg = DebiasConfig(w1=lambda b: -np.ones(len(b)))
    with pytest.raises(InvariantError):
        debiased_risk(model, train, "all", neg)
    nan = DebiasConfig(w1=lambda b: np.ones(len(b)), w2=lambda u, i: np.full(len(u), np.nan))
    with pytest.raises(InvariantError):
        debiased_risk(model, train, "all", nan)


def test_zero_model_zero_pseudo_label():
    train = Interactions([0], [0], [0 + 1])
    cfg = DebiasConfig(w1=lambda b: np.zeros(len(b)), w2=lambda u, i: np.full(len(u), 3.0), m=lambda u, i: np.zeros(len(u)))
    assert debiased_risk(FactorModel.zeros(3, 3), train, "all", cfg, "squared") == 0.0


def test_linearity_in_weights():
    rng, model, train, _ = instance(2)
    w1a, w1b = rng.random(len(train)), rng.random(len(train))
    w2a, w2b = rng.random((NU, NI)), rng.random((NU, NI))
    m = rng.uniform(-1, 1, (NU, NI))
    lookup = {tuple(k): j for j, k in enumerate(zip(train.users, train.items))}

    def cfg(w1, w2):
        return DebiasConfig(
            w1=lambda b: np.array([w1[lookup[(u, i)]] for u, i in zip(b.users, b.items)]),
            w2=lambda u, i: w2[u, i],
            m=lambda u, i: m[u, i],
        )

    def risk(w1, w2):
        return debiased_risk(model, train, "all", cfg(w1, w2), "logistic")

    assert risk(w1a + 2 * w1b, w2a) == pytest.approx(risk(w1a, w2a) + 2 * risk(w1b, w2a) - 2 * risk(0 * w1a, w2a), abs=1e-12)
    assert risk(w1a, w2a + 3 * w2b) == pytest.approx(risk(w1a, w2a) + 3 * risk(w1a, w2b) - 3 * risk(w1a, 0 * w2a), abs=1e-12)


def test_monte_carlo_converges_to_true_risk():
    rng = np.random.default_rng(7)
    world = random_world(5, 5, rng)
    cfg = optimal_config(world)
    f = FactorModel(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    target = true_risk(f, world, "logistic")
    draws = [debiased_risk(f, world.sample_train(rng, 50), "all", cfg, "logistic") for _ in range(2000)]
    se = np.std(draws) / np.sqrt(len(draws))
    assert abs(np.mean(draws) - target) < 3 * se


def test_pair_subsample_is_unbiased():
    rng = np.random.default_rng(8)
    model = FactorModel(rng.normal(size=(NU, 2)), rng.normal(size=(NI, 2)))
    train = Interactions([0], [0], [1])
    w2, m = rng.random((NU, NI)), rng.uniform(-1, 1, (NU, NI))
    cfg = DebiasConfig(w1=lambda b: np.zeros(len(b)), w2=lambda u, i: w2[u, i], m=lambda u, i: m[u, i])
    exact = debiased_risk(model, train, "all", cfg, "squared")
    draws = [debiased_risk(model, train, sample_pairs(rng, NU, NI, 16), cfg, "squared") for _ in range(1000)]
    assert abs(np.mean(draws) - exact) < 3 * np.std(draws) / np.sqrt(1000)


def test_imputation_pairs():
    users, items = imputation_pairs(3, 4)
    assert len(users) == 12
    with pytest.raises(DomainError):
        imputation_pairs(2000, 1000)
    users, items = imputation_pairs(2000, 1000, np.random.default_rng(0), size=10)
    assert len(users) == 10


def test_naive_bayes_examples():
    # 50/50 train and uniform, P(O) = 0.1
    train = Interactions(np.arange(10), np.zeros(10), [1, -1] * 5)
    uniform = Interactions([0, 1], [0, 0], [1, -1])
    q = estimate_propensity_naive_bayes(train, uniform, 10, 10)
    assert q([0, 0], [0, 0], [1, -1]).tolist() == pytest.approx([0.1, 0.1])
    # 90% positive train, 10% positive uniform
    train = Interactions(np.arange(10), np.zeros(10), [1] * 9 + [-1])
    uniform = Interactions(np.arange(10), np.zeros(10), [1] + [-1] * 9)
    q = estimate_propensity_naive_bayes(train, uniform, 10, 10)
    assert q([0], [0], [1])[0] == pytest.approx(0.9)
    with pytest.raises(EstimationError):
        estimate_propensity_naive_bayes(train, Interactions([0], [0], [-1]), 10, 10)
    with pytest.raises(EstimationError):
        estimate_propensity_naive_bayes(train, Interactions.empty(), 10, 10)


def test_propensity_table_bounds_and_save(tmp_path):
    with pytest.raises(DomainError):
        PropensityTable.constant(1.5)([0], [0])
    q = PropensityTable.per_label({-1: 0.2, 1: 0.4}, info={"p_obs": 0.1})
    q.save(tmp_path / "q.txt")
    text = (tmp_path / "q.txt").read_text()
    assert "q[1] = 0.4" in text and "method = per_label" in text


def test_position_propensity_estimate():
    positions = np.tile(np.arange(1, 5), 50)
    labels = np.where(np.arange(200) % (positions + 1) == 0, 1, -1)
    train = Interactions(np.zeros(200), np.arange(200), labels, positions)
    q = estimate_position_propensity(train)
    assert q[0] == 1.0 and (q > 0).all() and (q <= 1).all()
    with pytest.raises(EstimationError):
        estimate_position_propensity(Interactions([0], [0], [1]))


def test_weight_mean_square():
    train = Interactions([0, 1, 2], [0, 1, 2], [1, 1, -1])
    assert weight_mean_square(DebiasConfig(w1=lambda b: np.ones(len(b))), train) == 3.0
    assert weight_mean_square(DebiasConfig(w1=lambda b: np.full(len(b), 2.0)), train) == 12.0
    rng = np.random.default_rng(0)
    w = rng.random(3)
    assert weight_mean_square(DebiasConfig(w1=lambda b: w), train) == pytest.approx(sum(x * x for x in w))


def test_fit_debiased_runs_and_is_deterministic():
    rng, model, train, q = instance(3, unique_pairs=False)
    cfg = config_doubly_robust(PropensityTable.from_pairs(q), ObservationIndicator(train, NU, NI), 0.0, len(train), NU, NI)
    a = fit_debiased(model, train, cfg, "logistic", lr=0.1, epochs=3, batch_size=5, pair_batch_size=8, seed=1)
    b = fit_debiased(model, train, cfg, "logistic", lr=0.1, epochs=3, batch_size=5, pair_batch_size=8, seed=1)
    assert a.model.identical(b.model) and len(a.trace) == 3
