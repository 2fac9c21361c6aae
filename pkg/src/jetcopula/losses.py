"""Constraint losses for the marginal and copula networks.

Each ``*_term`` function works on plain arrays of network outputs and returns
the loss value together with its gradient with respect to those outputs; the
training loop chains those gradients through the tape.  The model-level
functions evaluate the networks first and return the value only.

Likelihood terms are negated (mean negative log density) so that every term
is minimized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from jetcopula.models import FittedModel, MlpParams, forward_value, joint_pdf, marginal_forward

EPS = 1e-8

MARGINAL_TERMS = ("nll", "negativity", "integral", "endpoint")
COPULA_TERMS = ("nll", "negativity", "integral", "boundary", "anchor")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam: tuple[float, ...]

    def __post_init__(self):
        lam = tuple(float(v) for v in self.lam)
        if not all(np.isfinite(v) and v >= 0 for v in lam):
            raise LossError(f"loss weights must be finite and non-negative, got {lam}")
        object.__setattr__(self, "lam", lam)

    def __len__(self):
        return len(self.lam)


MARGINAL_WEIGHTS = LossWeights((0.1, 1.0, 2.0, 2.0))
COPULA_WEIGHTS = LossWeights((0.1, 1.0, 1.0, 2.0, 5.0))


@dataclass
class LossBreakdown:
    terms: list[float]
    total: float
    names: tuple[str, ...] = field(default=())
    extra: dict = field(default_factory=dict)

    def record(self, epoch: int) -> dict:
        names = self.names or tuple(f"L{k + 1}" for k in range(len(self.terms)))
        rec = {"epoch": epoch}
        rec.update({n: float(v) for n, v in zip(names, self.terms)})
        rec["total"] = float(self.total)
        rec.update(self.extra)
        return rec

    def json_line(self, epoch: int) -> str:
        return json.dumps(self.record(epoch), sort_keys=True)


def total_loss(terms, weights: LossWeights) -> float:
    terms = list(terms.terms) if isinstance(terms, LossBreakdown) else list(terms)
    if len(terms) != len(weights):
        raise LossError(f"{len(terms)} terms but {len(weights)} weights")
    return float(sum(lam * t for lam, t in zip(weights.lam, terms)))


def _nonempty(a, what):
    a = np.asarray(a, float)
    if a.size == 0:
        raise LossError(f"{what} is empty")
    return a


# array-level terms -------------------------------------------------------

def nll_term(density):
    """Mean negative log of the clamped density, and its gradient."""
    density = _nonempty(density, "sample set")
    n = density.size
    clamped = np.maximum(density, EPS)
    value = -np.mean(np.log(clamped))
    grad = np.where(density > EPS, -1.0 / (n * clamped), 0.0)
    return float(value), grad


def negativity_term(density):
    density = _nonempty(density, "grid")
    n = density.size
    value = np.mean(np.maximum(-density, 0.0))
    grad = np.where(density < 0.0, -1.0 / n, 0.0)
    return float(value), grad


def integral_term(density, cell: float):
    """``|1 - sum(density) * cell|`` for a Riemann sum with cell volume ``cell``."""
    density = _nonempty(density, "grid")
    resid = 1.0 - np.sum(density) * cell
    grad = np.full(density.shape, -np.sign(resid) * cell)
    return float(abs(resid)), grad


def endpoint_term(F0: float, F1: float):
    value = F0 + abs(1.0 - F1)
    return float(value), (1.0, -float(np.sign(1.0 - F1)))


def boundary_term(C_lower, C_upper, u_free, per_face: int = 1):
    """Sum of copula values on lower faces plus absolute upper-edge misfit.

    ``per_face > 1`` divides by the number of points on each face, turning the
    sums into a sum over faces of per-face means.
    """
    C_lower = np.asarray(C_lower, float)
    C_upper = np.asarray(C_upper, float)
    resid = C_upper - np.asarray(u_free, float)
    k = 1.0 / per_face
    value = k * (np.sum(C_lower) + np.sum(np.abs(resid)))
    return float(value), (np.full(C_lower.shape, k), k * np.sign(resid))


def anchor_term(F_model, flag_counts, n1: int):
    """``(1/(n1 n5)) sum |n1 F - count|``: mean gap to the empirical CDF."""
    F_model = _nonempty(F_model, "observation set")
    flag_counts = np.asarray(flag_counts, float)
    n5 = F_model.size
    resid = n1 * F_model - flag_counts
    value = np.sum(np.abs(resid)) / (n1 * n5)
    grad = np.sign(resid) / n5
    return float(value), grad


# empirical CDF -----------------------------------------------------------

def flag_counts(D1, x) -> np.ndarray:
    """Number of samples strictly below each query point in every coordinate."""
    D1 = np.atleast_2d(np.asarray(D1, float))
    x = np.atleast_2d(np.asarray(x, float))
    if D1.shape[0] == 0 or D1.size == 0:
        raise LossError("empirical CDF needs at least one sample")
    if D1.shape[1] != x.shape[1]:
        raise LossError(f"samples have d={D1.shape[1]}, points have d={x.shape[1]}")
    counts = np.empty(x.shape[0])
    # chunked to bound the (points x samples) boolean block
    step = max(1, 2_000_000 // max(D1.shape[0] * D1.shape[1], 1))
    for s in range(0, x.shape[0], step):
        below = np.all(D1[None, :, :] < x[s:s + step, None, :], axis=2)
        counts[s:s + step] = below.sum(axis=1)
    return counts


def empirical_cdf(D1, x):
    D1 = np.asarray(D1, float)
    if D1.size == 0:
        raise LossError("empirical CDF needs at least one sample")
    D1 = D1.reshape(len(D1), -1)
    x = np.asarray(x, float)
    single = x.ndim <= 1 and x.size == D1.shape[1]
    out = flag_counts(D1, x.reshape(-1, D1.shape[1])) / D1.shape[0]
    return float(out[0]) if single else out


# model-level losses ------------------------------------------------------

def marginal_nll(params: MlpParams, D1) -> float:
    _, f = marginal_forward(params, _nonempty(D1, "sample set"))
    return nll_term(f)[0]


def marginal_negativity_penalty(params: MlpParams, D2) -> float:
    _, f = marginal_forward(params, _nonempty(D2, "grid"))
    return negativity_term(f)[0]


def marginal_integral_penalty(params: MlpParams, D3, spacing: float) -> float:
    _, f = marginal_forward(params, _nonempty(D3, "grid"))
    return integral_term(f, spacing)[0]


def marginal_endpoint_penalty(params: MlpParams) -> float:
    F = forward_value(params, np.array([[0.0], [1.0]]))
    return endpoint_term(F[0], F[1])[0]


def copula_nll(model: FittedModel, D1) -> float:
    D1 = np.atleast_2d(_nonempty(D1, "sample set"))
    return nll_term(joint_pdf(model, D1))[0]


def copula_negativity_penalty(model: FittedModel, D2) -> float:
    return negativity_term(joint_pdf(model, np.atleast_2d(_nonempty(D2, "grid"))))[0]


def copula_integral_penalty(model: FittedModel, D3, spacings) -> float:
    D3 = np.atleast_2d(_nonempty(D3, "grid"))
    spacings = np.asarray(spacings, float)
    axes = [np.unique(D3[:, j]) for j in range(D3.shape[1])]
    if int(np.prod([len(a) for a in axes])) != len(D3) or len(np.unique(D3, axis=0)) != len(D3):
        raise LossError("integration grid is not a full Cartesian lattice")
    return integral_term(joint_pdf(model, D3), float(np.prod(spacings)))[0]


def split_boundary(points, atol: float = 0.0):
    """Split boundary points into lower-face points and upper-edge points.

    Returns ``(lower, upper, u_free)``; raises on a point that is on neither.
    """
    points = np.atleast_2d(np.asarray(points, float))
    on_lower = np.any(np.abs(points) <= atol, axis=1)
    ones = np.abs(points - 1.0) <= atol
    on_upper = ones.sum(axis=1) >= points.shape[1] - 1
    bad = ~(on_lower | on_upper)
    if np.any(bad):
        raise LossError(f"point {points[np.argmax(bad)].tolist()} is neither on a lower face nor an upper edge")
    upper = points[~on_lower]
    free_idx = np.argmin(np.where(np.abs(upper - 1.0) <= atol, 1, 0), axis=1)
    u_free = upper[np.arange(len(upper)), free_idx]
    return points[on_lower], upper, u_free


def copula_boundary_penalty(copula_params: MlpParams, D4, per_face: int = 1) -> float:
    lower, upper, u_free = split_boundary(D4)
    C_lower = forward_value(copula_params, lower) if len(lower) else np.zeros(0)
    C_upper = forward_value(copula_params, upper) if len(upper) else np.zeros(0)
    return boundary_term(C_lower, C_upper, u_free, per_face)[0]


def copula_anchor_penalty(model: FittedModel, D1, D5) -> float:
    D1 = np.atleast_2d(_nonempty(D1, "sample set"))
    D5 = np.atleast_2d(_nonempty(D5, "observation set"))
    u, _ = model.pseudo_inputs(D5)
    F = forward_value(model.copula, u)
    return anchor_term(F, flag_counts(D1, D5), len(D1))[0]


__all__ = [
    "EPS", "LossWeights", "LossBreakdown", "MARGINAL_WEIGHTS", "COPULA_WEIGHTS", "total_loss",
    "nll_term", "negativity_term", "integral_term", "endpoint_term", "boundary_term", "anchor_term",
    "flag_counts", "empirical_cdf", "marginal_nll", "marginal_negativity_penalty",
    "marginal_integral_penalty", "marginal_endpoint_penalty", "copula_nll", "copula_negativity_penalty",
    "copula_integral_penalty", "split_boundary", "copula_boundary_penalty", "copula_anchor_penalty",
]
