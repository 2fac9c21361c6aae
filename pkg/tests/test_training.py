import math

import numpy as np
import pytest

from jetcopula.losses import LossBreakdown
from jetcopula.models import init_params
from jetcopula.training import (
    AdamState,
    TrainConfig,
    TrainingError,
    _run,
    adam_step,
    build_copula_sets,
    build_marginal_sets,
    fit,
    l2_penalty,
    lattice_side,
    midpoint_grid,
    midpoint_lattice,
    phase_seeds,
    train_copula,
    train_marginal,
)


def test_midpoint_grid_example():
    np.testing.assert_allclose(midpoint_grid(5), [0.1, 0.3, 0.5, 0.7, 0.9], rtol=1e-15)


@pytest.mark.parametrize("n,d,m", [(2500, 2, 50), (2500, 3, 14), (1000, 1, 1000), (2501, 2, 51), (1, 3, 1), (8, 3, 2)])
def test_lattice_side(n, d, m):
    assert lattice_side(n, d) == m


def test_marginal_sets():
    col = np.random.default_rng(0).random(40)
    s = build_marginal_sets(col, 7, 5, seed=3)
    np.testing.assert_array_equal(s.D1, col)
    np.testing.assert_allclose(s.D3, [0.1, 0.3, 0.5, 0.7, 0.9])
    assert s.spacing3 == pytest.approx(0.2)
    assert len(s.D2) == 7
    np.testing.assert_array_equal(s.D4, [0.0, 1.0])
    t = build_marginal_sets(col, 7, 5, seed=3)
    assert all(np.array_equal(getattr(s, k), getattr(t, k)) for k in ("D1", "D2", "D3", "D4"))
    with pytest.raises(ValueError):
        build_marginal_sets(np.zeros(0), 7, 5)


def test_copula_sets_2d():
    data = np.random.default_rng(1).random((60, 2))
    s = build_copula_sets(data, 2500, 2500, 800, 200, seed=4)
    assert s.D3.shape == (2500, 2) and s.cell3 == pytest.approx(1 / 2500)
    assert set(np.unique(s.D3[:, 0])) == set(midpoint_grid(50))
    assert s.n4 == 800 and len(s.lower) == 1600 and len(s.upper) == 1600
    assert s.D5.shape == (200, 2)
    assert np.all((s.D5_targets >= 0) & (s.D5_targets <= 1))
    on_lower = np.any(s.D4 == 0.0, axis=1)
    on_upper = np.sum(s.D4 == 1.0, axis=1) >= 1
    assert np.all(on_lower | on_upper)
    # free coordinate of each upper-edge point is the one that is not 1
    free = np.where(s.upper[:, 0] == 1.0, s.upper[:, 1], s.upper[:, 0])
    np.testing.assert_array_equal(free, s.u_free)


def test_copula_sets_3d_rounds_up():
    data = np.random.default_rng(2).random((30, 3))
    s = build_copula_sets(data, 2500, 2500, 10, 5, seed=0)
    assert len(s.D3) == 2744 and s.n["n3"] == 2744
    assert np.all(np.sum(s.upper == 1.0, axis=1) >= 2)


def test_copula_sets_deterministic():
    data = np.random.default_rng(3).random((30, 2))
    a = build_copula_sets(data, 100, 100, 20, 10, seed=9)
    b = build_copula_sets(data, 100, 100, 20, 10, seed=9)
    c = build_copula_sets(data, 100, 100, 20, 10, seed=10)
    assert np.array_equal(a.D4, b.D4) and np.array_equal(a.D5, b.D5)
    assert not np.array_equal(a.D4, c.D4)


def test_midpoint_lattice_shape():
    L = midpoint_lattice(3, 2)
    assert L.shape == (9, 2)
    assert set(L[:, 1]) == set(midpoint_grid(3))


# optimizer ---------------------------------------------------------------

def _reference_adam(theta, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def _grads_like(params, rng):
    return {k: rng.normal(size=a.shape) for k, a in params.named().items()}


def test_adam_first_step_is_signed_lr():
    p = init_params([2, 3, 1], seed=0)
    g = _grads_like(p, np.random.default_rng(0))
    q, state = adam_step(p, g, AdamState.zeros(p), lr=1e-3)
    for k, a in p.named().items():
        np.testing.assert_allclose(q.named()[k] - a, -1e-3 * np.sign(g[k]), rtol=1e-4)
    assert state.t == 1


def test_adam_matches_reference_over_steps():
    p = init_params([2, 3, 1], seed=1)
    rng = np.random.default_rng(1)
    seq = [_grads_like(p, rng) for _ in range(6)]
    q, state = p, AdamState.zeros(p)
    for g in seq:
        q, state = adam_step(q, g, state, lr=0.01)
    for k, a in p.named().items():
        ref = _reference_adam(a, [g[k] for g in seq], 0.01)
        np.testing.assert_allclose(q.named()[k], ref, rtol=1e-12, atol=1e-15)


def test_adam_zero_gradient_only_shrinks_weights():
    p = init_params([2, 3, 1], seed=2)
    p.biases[0][:] = 0.3
    zeros = {k: np.zeros_like(a) for k, a in p.named().items()}
    q, _ = adam_step(p, zeros, AdamState.zeros(p), lr=1e-3, l2_rate=1e-3)
    for b_old, b_new in zip(p.biases, q.biases):
        np.testing.assert_array_equal(b_old, b_new)
    for W_old, W_new in zip(p.weights, q.weights):
        assert np.all(np.abs(W_new) <= np.abs(W_old))
    r, _ = adam_step(p, zeros, AdamState.zeros(p), lr=1e-3, l2_rate=0.0)
    assert all(np.array_equal(x, y) for x, y in zip(p.weights, r.weights))


def test_adam_l2_gradient_matches_penalty():
    p = init_params([2, 3, 1], seed=3)
    h = 1e-6
    W = p.weights[0]
    Wp = p.copy()
    Wp.weights[0][0, 0] += h
    Wm = p.copy()
    Wm.weights[0][0, 0] -= h
    fd = (l2_penalty(Wp, 1e-3) - l2_penalty(Wm, 1e-3)) / (2 * h)
    assert fd == pytest.approx(2e-3 * W[0, 0], rel=1e-6)


def test_adam_rejects_nan_and_shape_errors():
    p = init_params([2, 3, 1], seed=0)
    g = {k: np.zeros_like(a) for k, a in p.named().items()}
    g["w0"][0, 0] = np.nan
    with pytest.raises(TrainingError):
        adam_step(p, g, AdamState.zeros(p), lr=1e-3)
    with pytest.raises(ValueError):
        adam_step(p, {"w0": np.zeros((3, 2))}, AdamState.zeros(p), lr=1e-3)


# run loop ----------------------------------------------------------------

class _Exploding:
    def __init__(self, bad_epoch):
        self.calls = 0
        self.bad_epoch = bad_epoch

    def __call__(self, params, want_grad=True):
        total = math.nan if self.calls == self.bad_epoch else 1.0
        self.calls += 1
        grads = {k: np.zeros_like(a) for k, a in params.named().items()}
        return LossBreakdown([total], total, ("x",)), grads


def test_divergence_reports_last_finite_epoch():
    p = init_params([1, 2, 1], seed=0)
    with pytest.raises(TrainingError) as info:
        _run(_Exploding(3), p, 10, 1e-3, 0.0, TrainConfig())
    assert info.value.epoch == 3 and info.value.last_finite == 2


def test_config_roundtrip_and_validation():
    cfg = TrainConfig(marginal_epochs=5, copula_epochs=7, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    d = TrainConfig().to_dict()
    assert d["marginal_lr"] == 1e-3 and d["copula_lr"] == 1e-4
    assert d["marginal_weights"] == [0.1, 1.0, 2.0, 2.0] and d["copula_weights"] == [0.1, 1.0, 1.0, 2.0, 5.0]
    assert (d["n_m2"], d["n_m3"], d["n_c2"], d["n_c3"], d["n_c4"], d["n_c5"]) == (1000, 1000, 2500, 2500, 800, 200)
    for bad in ({"marginal_epochs": 0}, {"copula_lr": 0.0}, {"n_c4": 0}, {"marginal_weights": (1, 2)},
                {"boundary_reduction": "max"}, {"copula_l2_rate": -1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3})


def test_phase_seeds_distinct_and_stable():
    a, b = phase_seeds(0, 3)
    assert len(set(a + [b])) == 4
    assert phase_seeds(0, 3) == (a, b)


# short training runs ------------------------------------------------------

SHORT = TrainConfig(marginal_epochs=40, copula_epochs=20, n_m2=50, n_m3=50, n_c2=100, n_c3=100, n_c4=20, n_c5=10)


def test_marginal_training_reduces_loss_and_logs_every_epoch():
    col = np.random.default_rng(0).beta(2, 2, size=200)
    seen = []
    params, hist, final = train_marginal(col, SHORT, seed=1, callback=lambda ph, rec: seen.append(ph))
    assert len(hist) == 40 and seen == ["marginal"] * 40
    assert final.total <= hist[0]["total"]
    assert set(hist[0]) == {"epoch", "nll", "negativity", "integral", "endpoint", "total"}


def test_copula_training_leaves_marginals_untouched():
    data = np.random.default_rng(1).random((100, 2))
    marginals = [init_params((1, 5, 5, 5, 5, 1), i) for i in range(2)]
    before = [m.copy() for m in marginals]
    params, hist, final = train_copula(data, marginals, SHORT, seed=0)
    for a, b in zip(before, marginals):
        assert all(np.array_equal(x, y) for x, y in zip(a.flat(), b.flat()))
    assert len(hist) == 20 and final.total <= hist[0]["total"]
    assert params.layer_sizes == [2, 10, 10, 10, 10, 10, 1]


def test_fit_is_bitwise_deterministic():
    data = np.random.default_rng(2).random((80, 2))
    a = fit(data, [0, 0], [1, 1], SHORT)
    b = fit(data, [0, 0], [1, 1], SHORT)
    assert a.model.dumps() == b.model.dumps()
    assert a.copula_history == b.copula_history


def test_fit_rejects_mismatched_marginals():
    with pytest.raises(ValueError):
        train_copula(np.random.default_rng(0).random((10, 2)), [init_params((1, 2, 1), 0)], SHORT)
