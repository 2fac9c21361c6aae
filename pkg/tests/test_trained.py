"""Examples that need a trained model.

The runs are session fixtures in conftest: desk-budget fits by default,
default-budget fits under JETCOPULA_FULL_BUDGET=1.
"""

import numpy as np
import pytest
from scipy import stats

from jetcopula.baselines import fit_mle, pseudo_observations
from jetcopula.evaluate import copula_validity_check, ks_distance, sample_from_model
from jetcopula.evaluate import test_log_loss as log_loss
from jetcopula.losses import (
    copula_anchor_penalty,
    copula_negativity_penalty,
    empirical_cdf,
    marginal_endpoint_penalty,
    marginal_negativity_penalty,
)
from jetcopula.models import copula_forward, forward_value, joint_cdf, joint_pdf, marginal_forward
from jetcopula.training import build_copula_sets, midpoint_grid, midpoint_lattice

RUNS = ["trained_uniform", "trained_eq35"]


# marginals ---------------------------------------------------------------

def test_uniform_marginals_close_to_identity(trained_uniform):
    for m in trained_uniform.model.marginals:
        F, _ = marginal_forward(m, np.array([0.5]))
        assert abs(F[0] - 0.5) <= 0.03
        assert ks_distance(m, lambda t: t) <= 0.03


def test_beta_marginal_ks(trained_beta):
    params, _, _ = trained_beta
    assert ks_distance(params, lambda t: 3 * t * t - 2 * t ** 3) <= 0.03


def test_endpoint_penalty_after_training(trained_uniform, trained_beta):
    for m in list(trained_uniform.model.marginals) + [trained_beta[0]]:
        assert marginal_endpoint_penalty(m) <= 0.02


@pytest.mark.parametrize("run", RUNS)
def test_marginal_negativity_grid_refinement(run, request):
    for m in request.getfixturevalue(run).model.marginals:
        coarse = marginal_negativity_penalty(m, midpoint_grid(1000))
        fine = marginal_negativity_penalty(m, midpoint_grid(10_000))
        assert abs(coarse - fine) <= 0.01


# copula ------------------------------------------------------------------

def test_independence_copula_center(trained_uniform):
    assert abs(forward_value(trained_uniform.model.copula, np.array([[0.5, 0.5]]))[0] - 0.25) <= 0.05


def test_independence_density_flat_in_the_middle(trained_uniform):
    t = np.linspace(0.1, 0.9, 41)
    u = np.array(np.meshgrid(t, t, indexing="ij")).reshape(2, -1).T
    _, c, _ = copula_forward(trained_uniform.model.copula, u)
    assert np.max(np.abs(c - 1.0)) <= 0.1


@pytest.mark.parametrize("run", RUNS)
def test_joint_cdf_corners(run, request):
    model = request.getfixturevalue(run).model
    assert abs(joint_cdf(model, np.ones(2)) - 1.0) <= 0.02
    assert abs(joint_cdf(model, np.zeros(2))) <= 0.02


@pytest.mark.parametrize("run", RUNS)
def test_joint_pdf_integrates_to_one(run, request):
    model = request.getfixturevalue(run).model
    assert abs(joint_pdf(model, midpoint_lattice(100, 2)).mean() - 1.0) <= 0.05


@pytest.mark.parametrize("run", RUNS)
def test_joint_cdf_matches_empirical_cdf(run, request):
    r = request.getfixturevalue(run)
    pts = np.random.default_rng(20).random((20, 2))
    emp = np.array([empirical_cdf(r.dataset.train, p) for p in pts])
    assert np.max(np.abs(joint_cdf(r.model, pts) - emp)) <= 0.05


@pytest.mark.parametrize("run", RUNS)
def test_joint_negativity_grid_refinement(run, request):
    model = request.getfixturevalue(run).model
    coarse = copula_negativity_penalty(model, midpoint_lattice(50, 2))
    fine = copula_negativity_penalty(model, midpoint_lattice(158, 2))
    assert abs(coarse - fine) <= 0.01


def test_anchor_on_fresh_points(trained_eq35):
    fresh = np.random.default_rng(31).random((200, 2))
    assert copula_anchor_penalty(trained_eq35.model, trained_eq35.dataset.train, fresh) <= 0.05


def test_boundary_on_fresh_points(trained_eq35):
    sets = build_copula_sets(trained_eq35.dataset.train[:10], 4, 4, 1000, 1, seed=12345)
    cop = trained_eq35.model.copula
    worst = max(np.max(np.abs(forward_value(cop, sets.lower))),
                np.max(np.abs(forward_value(cop, sets.upper) - sets.u_free)))
    assert worst <= 0.02


def test_joint_density_close_to_truth(trained_eq35):
    u = midpoint_lattice(51, 2)
    err = np.abs(joint_pdf(trained_eq35.model, u) - trained_eq35.oracle.joint_pdf_unit(u))
    assert err.mean() <= 0.15


def test_rectangle_inequality_after_training(trained_eq35):
    assert copula_validity_check(trained_eq35.model, 51)["rectangle_worst"] <= 1e-3


def test_copula_nll_trends_down(trained_eq35):
    nll = np.array([r["nll"] for r in trained_eq35.result.copula_history])
    windows = nll[: len(nll) // 100 * 100].reshape(-1, 100).mean(axis=1)
    rho = stats.spearmanr(np.arange(len(windows)), windows).statistic
    assert windows[-1] < windows[0] and rho <= -0.5


# sampling and scores -----------------------------------------------------

def test_samples_follow_true_density(trained_eq35):
    pts = sample_from_model(trained_eq35.model, 50_000, seed=0)
    counts, ex, ey = np.histogram2d(pts[:, 0], pts[:, 1], bins=16, range=[[0, 1], [0, 1]])
    cx, cy = (ex[:-1] + ex[1:]) / 2, (ey[:-1] + ey[1:]) / 2
    centers = np.array(np.meshgrid(cx, cy, indexing="ij")).reshape(2, -1).T
    truth = trained_eq35.oracle.joint_pdf_unit(centers)
    assert stats.pearsonr(counts.ravel(), truth).statistic >= 0.9


def test_bimodal_neural_beats_gaussian(trained_bimodal):
    ds = trained_bimodal.dataset
    gaussian = fit_mle("gaussian", pseudo_observations(ds.train))
    assert log_loss(trained_bimodal.model, ds.test) - log_loss(gaussian, ds.test) >= 0.2


def test_no_method_beats_the_oracle(trained_bimodal):
    ds = trained_bimodal.dataset
    assert log_loss(trained_bimodal.model, ds.test) <= log_loss(trained_bimodal.oracle, ds.test) + 0.05
