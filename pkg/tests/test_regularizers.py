import numpy as np
import pytest
from helpers import (
    central_difference,
    exact_population_variance,
    oracle_gradients,
    random_batch,
    random_net,
    random_soft,
    relative_error,
)

from domexp import numkit
from domexp.datagen import Dataset
from domexp.errors import ConfigError, DimensionError, LayoutMismatchError
from domexp.net import NetConfig, ParamVector, clone_params, forward, init
from domexp.regularizers import (
    FisherDiagonal,
    RegWeights,
    SoftTargets,
    cross_entropy_loss,
    estimate_fisher_diagonal,
    ewc_penalty,
    hybrid_loss,
    per_sample_gradients,
    precompute_soft_targets,
    skld_loss,
    wca_penalty,
)


def _pair(seed=0):
    rng = numkit.make_rng(seed)
    theta_o = random_net(rng, 200)
    theta_n = theta_o.with_flat(theta_o.flat + rng.normal(0, 0.3, len(theta_o)))
    return rng, theta_o, theta_n


def test_wca_penalty_hand_value():
    cfg = NetConfig(1, (), 1)
    a = ParamVector(cfg, np.array([1.0, 2.0]))
    b = ParamVector(cfg, np.array([0.0, 0.0]))
    loss, grad = wca_penalty(a, b, 3.0)
    assert loss == 0.5 * 3.0 * 5.0
    assert grad.flat.tolist() == [3.0, 6.0]


def test_ewc_penalty_hand_value_and_offset():
    cfg = NetConfig(1, (), 1)
    a = ParamVector(cfg, np.array([1.0, 2.0]))
    b = ParamVector(cfg, np.array([0.0, 0.0]))
    fisher = FisherDiagonal(np.array([0.5, 0.0]), offset=1.0)
    loss, grad = ewc_penalty(a, b, fisher, 2.0)
    # 0.5 * 2 * (1.5 * 1 + 1.0 * 4)
    assert loss == 5.5
    assert grad.flat.tolist() == [3.0, 4.0]
    with pytest.raises(LayoutMismatchError):
        ewc_penalty(a, b, FisherDiagonal(np.zeros(3)), 1.0)


def test_ewc_with_uniform_importance_is_wca():
    _, o, n = _pair(1)
    fisher = FisherDiagonal(np.zeros(len(o)), offset=1.0)
    le, ge = ewc_penalty(n, o, fisher, 0.7)
    lw, gw = wca_penalty(n, o, 0.7)
    assert le == lw and np.array_equal(ge.flat, gw.flat)


@pytest.mark.parametrize("which", ["ce", "wca", "ewc", "skld", "skld_t2", "hybrid"])
def test_objective_gradients_match_finite_differences(which):
    rng, o, n = _pair(7)
    x, y = random_batch(rng, n, 5)
    soft = random_soft(rng, 5, n.config.num_classes)
    fisher = FisherDiagonal(rng.uniform(0, 2, len(o)), offset=0.5)
    objs = {
        "ce": lambda: cross_entropy_loss(n, x, y),
        "wca": lambda: wca_penalty(n, o, 1.3),
        "ewc": lambda: ewc_penalty(n, o, fisher, 0.8),
        "skld": lambda: skld_loss(n, x, y, soft, 0.4, 2.5),
        "skld_t2": lambda: skld_loss(n, x, y, soft, 0.6, 3.0, t_squared=True),
        "hybrid": lambda: hybrid_loss(n, o, x, y, soft, fisher, RegWeights(lambda_e=0.3, lambda_s=0.5,
                                                                          temperature=2.0)),
    }
    _, grad = objs[which]()
    fd = central_difference(lambda: objs[which]()[0], n.flat)
    assert relative_error(grad.flat, fd) < 1e-6


def test_skld_endpoints():
    rng, _, n = _pair(2)
    x, y = random_batch(rng, n, 6)
    soft = random_soft(rng, 6, n.config.num_classes)
    ce, gce = cross_entropy_loss(n, x, y)
    s0, g0 = skld_loss(n, x, y, soft, 0.0, 1.0)
    assert s0 == ce and np.array_equal(g0.flat, gce.flat)
    s1, _ = skld_loss(n, x, y, soft, 1.0, 2.0)
    pT = numkit.softmax_t(forward(n, x).logits, 2.0)
    assert s1 == pytest.approx(numkit.cross_entropy(soft, pT).mean(), rel=1e-12)


def test_skld_t_squared_scales_distillation_only():
    rng, _, n = _pair(3)
    x, y = random_batch(rng, n, 4)
    soft = random_soft(rng, 4, n.config.num_classes)
    plain, _ = skld_loss(n, x, y, soft, 1.0, 3.0)
    scaled, _ = skld_loss(n, x, y, soft, 1.0, 3.0, t_squared=True)
    assert scaled == pytest.approx(9.0 * plain, rel=1e-12)


def test_kl_form_differs_by_entropy_only():
    rng, _, n = _pair(4)
    x, y = random_batch(rng, n, 5)
    soft = random_soft(rng, 5, n.config.num_classes)
    ce, gce = skld_loss(n, x, y, soft, 0.7, 2.0)
    kl, gkl = skld_loss(n, x, y, soft, 0.7, 2.0, kl_form=True)
    assert ce - kl == pytest.approx(0.7 * numkit.entropy(soft).sum() / 5, abs=1e-12)
    np.testing.assert_allclose(gkl.flat, gce.flat, atol=1e-12)


def test_skld_input_validation():
    rng, _, n = _pair(5)
    x, y = random_batch(rng, n, 3)
    with pytest.raises(DimensionError):
        skld_loss(n, x, y, np.ones((2, n.config.num_classes)), 0.5, 1.0)
    with pytest.raises(ConfigError):
        skld_loss(n, x, y, random_soft(rng, 3, n.config.num_classes), 1.5, 1.0)


def test_reg_weights_validation():
    with pytest.raises(ConfigError):
        RegWeights(lambda_w=-1)
    with pytest.raises(ConfigError):
        RegWeights(lambda_s=1.1)
    with pytest.raises(ConfigError):
        RegWeights(temperature=0)


def test_fisher_matches_exact_oracle():
    rng = numkit.make_rng(0)
    p = init(NetConfig(4, (6,), 3), rng)
    p.flat += rng.normal(0, 0.1, len(p))
    x, y = rng.normal(size=(30, 4)), rng.integers(0, 3, 30)
    G = oracle_gradients(p, x, y)
    assert np.array_equal(per_sample_gradients(p, x, y), G)
    f = estimate_fisher_diagonal(p, Dataset(x, y, 3), offset=0.25)
    assert np.array_equal(f.values, exact_population_variance(G))
    assert f.offset == 0.25
    assert np.array_equal(f.importance, f.values + 0.25)


def test_fisher_is_row_order_invariant():
    rng = numkit.make_rng(1)
    p = init(NetConfig(3, (5,), 4), rng)
    x, y = rng.normal(size=(40, 3)), rng.integers(0, 4, 40)
    perm = rng.permutation(40)
    a = estimate_fisher_diagonal(p, Dataset(x, y, 4)).values
    b = estimate_fisher_diagonal(p, Dataset(x[perm], y[perm], 4)).values
    assert np.array_equal(a, b)


def test_fisher_of_identical_samples_is_zero():
    p = init(NetConfig(2, (3,), 2), numkit.make_rng(0))
    f = estimate_fisher_diagonal(p, Dataset(np.ones((5, 2)), np.zeros(5, dtype=int), 2))
    assert np.all(f.values == 0.0)


def test_fisher_and_soft_target_containers(tmp_path):
    f = FisherDiagonal(np.array([0.1, 0.2]), offset=0.5)
    g = FisherDiagonal.load(f.save(tmp_path / "f.npz"))
    assert np.array_equal(g.values, f.values) and g.offset == 0.5
    with pytest.raises(ValueError):
        f.values[0] = 1.0
    with pytest.raises(ValueError):
        FisherDiagonal(np.array([-1.0]))
    p = init(NetConfig(2, (3,), 3), numkit.make_rng(0))
    s = precompute_soft_targets(p, np.eye(2), 2.0)
    t = SoftTargets.load(s.save(tmp_path / "s.npz"))
    assert t.temperature == 2.0 and np.array_equal(t.probs, s.probs) and len(t) == 2


def test_penalties_do_not_touch_inputs():
    _, o, n = _pair(6)
    before_o, before_n = o.flat.copy(), n.flat.copy()
    wca_penalty(n, o, 1.0)
    ewc_penalty(n, o, FisherDiagonal(np.ones(len(o))), 1.0)
    assert np.array_equal(o.flat, before_o) and np.array_equal(n.flat, before_n)
    assert clone_params(o).flat is not o.flat
