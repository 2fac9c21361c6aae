"""Scores and checks for fitted copulas: test log-loss, grid errors against
ground truth, KS distances, copula validity sweeps, and sampling from a fit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from jetcopula.baselines import ParametricCopula, pseudo_observations
from jetcopula.data import OracleTables, unit_lattice
from jetcopula.losses import EPS
from jetcopula.models import FittedModel, MlpParams, copula_forward, forward_value, joint_pdf, marginal_forward
from jetcopula.training import midpoint_lattice

CHUNK = 20_000
INTERIOR = 1e-6


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    test_log_loss: dict = field(default_factory=dict)
    neural_joint_log_density: float | None = None
    mean_abs_C: float | None = None
    max_abs_C: float | None = None
    mean_abs_c: float | None = None
    max_abs_c: float | None = None
    ks: list = field(default_factory=list)
    boundary_violation_max: float | None = None
    integral_deviation: float | None = None
    rectangle_violations: int | None = None
    rectangle_worst: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def _chunked(fn, X, size=CHUNK):
    X = np.atleast_2d(X)
    return np.concatenate([np.asarray(fn(X[s:s + size])) for s in range(0, len(X), size)]) if len(X) else np.zeros(0)


def copula_surface(method, u):
    """Copula value and copula density of any supported method at lattice points ``u``.

    Parametric families are evaluated just inside the unit cube.
    """
    u = np.atleast_2d(np.asarray(u, float))
    if isinstance(method, FittedModel):
        method = method.copula
    if isinstance(method, MlpParams):
        C = _chunked(lambda x: copula_forward(method, x)[0], u)
        c = _chunked(lambda x: copula_forward(method, x)[1], u)
        return C, c
    if isinstance(method, OracleTables):
        return method.copula(u), method.copula_density(u)
    if isinstance(method, ParametricCopula):
        ui = np.clip(u, INTERIOR, 1.0 - INTERIOR)
        return method.cdf(u), method.density(ui)
    raise EvalError(f"unsupported method {type(method).__name__}")


def copula_log_density(method, u) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, float))
    if isinstance(method, FittedModel):
        method = method.copula
    if isinstance(method, MlpParams):
        c = _chunked(lambda x: copula_forward(method, x)[1], u)
        return np.log(np.maximum(c, EPS))
    if isinstance(method, ParametricCopula):
        return method.log_density(u)
    if isinstance(method, OracleTables):
        return np.log(np.maximum(method.copula_density(u), EPS))
    if callable(method):
        return np.log(np.maximum(np.asarray(method(u), float), EPS))
    raise EvalError(f"unsupported method {type(method).__name__}")


def test_log_loss(method, test_points) -> float:
    """Mean log copula density at the pseudo-observations of the test rows (larger is better)."""
    test_points = np.atleast_2d(np.asarray(test_points, float))
    if len(test_points) == 0:
        raise EvalError("empty test set")
    u = pseudo_observations(test_points)
    return float(np.mean(copula_log_density(method, u)))


def joint_log_density(model: FittedModel, test_points) -> float:
    """Mean log joint density at normalized test rows; a diagnostic beside the copula score."""
    x = np.clip(np.atleast_2d(np.asarray(test_points, float)), 0.0, 1.0)
    return float(np.mean(np.log(np.maximum(_chunked(lambda p: joint_pdf(model, p), x), EPS))))


def grid_errors(method, table) -> tuple[float, float, float, float]:
    """Mean and max absolute error of C and c against an oracle lattice table."""
    u = np.asarray(table["u"], float)
    if len(table["C"]) != len(u) or len(table["c"]) != len(u):
        raise EvalError("oracle table arrays do not match its lattice")
    if isinstance(method, MlpParams) and method.n_inputs != u.shape[1]:
        raise EvalError(f"model takes {method.n_inputs} inputs, grid has {u.shape[1]}")
    C, c = copula_surface(method, u)
    eC = np.abs(C - table["C"])
    ec = np.abs(c - table["c"])
    return float(eC.mean()), float(eC.max()), float(ec.mean()), float(ec.max())


def grid_table(method, table) -> dict:
    """Pointwise estimate, truth and error on the oracle lattice (for CSV export)."""
    C, c = copula_surface(method, table["u"])
    return {"u": table["u"], "C_hat": C, "c_hat": c, "C": table["C"], "c": table["c"],
            "err_C": np.abs(C - table["C"]), "err_c": np.abs(c - table["c"])}


def ks_distance(marginal_params: MlpParams, true_cdf, n_grid: int = 2001) -> float:
    """Max |F_hat - F| over an ``n_grid`` lattice on [0, 1].

    ``true_cdf`` is a callable on [0, 1] or an array already tabulated on that lattice.
    """
    t = np.linspace(0.0, 1.0, n_grid)
    F_hat, _ = marginal_forward(marginal_params, t)
    F = np.asarray(true_cdf(t) if callable(true_cdf) else true_cdf, float)
    if F.shape != t.shape:
        raise EvalError(f"true CDF table has shape {F.shape}, expected {t.shape}")
    return float(np.max(np.abs(F_hat - F)))


def _copula_values(copula, u):
    if isinstance(copula, FittedModel):
        copula = copula.copula
    if isinstance(copula, MlpParams):
        return _chunked(lambda x: forward_value(copula, x), u)
    if isinstance(copula, ParametricCopula):
        return copula.cdf(u)
    if isinstance(copula, OracleTables):
        return copula.copula(u)
    if callable(copula):
        return np.asarray(copula(u), float)
    raise EvalError(f"unsupported copula {type(copula).__name__}")


def copula_validity_check(copula, resolution: int, d: int | None = None, tol: float = 0.0) -> dict:
    """Boundary and d-increasing checks on a ``resolution**d`` lattice.

    Rectangle sums over adjacent cells are the iterated first differences of
    the lattice table along every axis; a sum below ``-tol`` is a violation.
    """
    if resolution < 2:
        raise EvalError(f"resolution must be >= 2, got {resolution}")
    if d is None:
        if isinstance(copula, FittedModel):
            d = copula.d
        elif isinstance(copula, MlpParams):
            d = copula.n_inputs
        elif isinstance(copula, OracleTables):
            d = copula.d
        else:
            d = 2
    u = unit_lattice(resolution, d)
    C = _copula_values(copula, u).reshape((resolution,) * d)
    axis = np.linspace(0.0, 1.0, resolution)
    lower = 0.0
    upper = 0.0
    for j in range(d):
        face = tuple(0 if i == j else slice(None) for i in range(d))
        lower = max(lower, float(np.max(np.abs(C[face]))))
        edge = tuple(slice(None) if i == j else -1 for i in range(d))
        upper = max(upper, float(np.max(np.abs(C[edge] - axis))))
    rect = C
    for j in range(d):
        rect = np.diff(rect, axis=j)
    neg = rect < -tol
    return {
        "resolution": resolution,
        "lower_face_max": lower,
        "upper_edge_max": upper,
        "boundary_max": max(lower, upper),
        "rectangle_violations": int(neg.sum()),
        "rectangle_worst": float(max(0.0, -rect.min())),
        "n_rectangles": int(rect.size),
    }


def integral_deviation(copula, resolution: int | None = None, d: int | None = None) -> float:
    """|1 - Riemann sum of the copula density| over a midpoint lattice of the unit cube."""
    if isinstance(copula, FittedModel):
        copula = copula.copula
    d = d or copula.n_inputs
    resolution = resolution or (100 if d <= 2 else 30)
    u = midpoint_lattice(resolution, d)
    _, c = copula_surface(copula, u)
    return float(abs(1.0 - c.mean()))


def joint_integral_deviation(model: FittedModel, resolution: int = 100) -> float:
    x = midpoint_lattice(resolution, model.d)
    return float(abs(1.0 - _chunked(lambda p: joint_pdf(model, p), x).mean()))


def sample_from_model(model: FittedModel, n: int, seed: int = 0, probe: int = 101, factor: float = 1.2,
                      batch: int = 8192, min_rate: float = 1e-4, stats: dict | None = None) -> np.ndarray:
    """Rejection sampling from the fitted joint density on the normalized cube."""
    if n <= 0:
        raise EvalError("n must be positive")
    d = model.d
    grid = unit_lattice(probe, d)
    peak = float(np.max(np.maximum(_chunked(lambda p: joint_pdf(model, p), grid), 0.0)))
    if not peak > 0.0:
        raise EvalError("fitted density is not positive anywhere on the probe grid")
    M = factor * peak
    rng = np.random.default_rng(seed)
    out, have, proposed = [], 0, 0
    while have < n:
        pts = rng.random((batch, d))
        dens = np.maximum(joint_pdf(model, pts), 0.0)
        accept = rng.random(batch) * M < dens
        proposed += batch
        have += int(accept.sum())
        out.append(pts[accept])
        if proposed >= 100 * batch and have / proposed < min_rate:
            raise EvalError(f"acceptance rate {have / proposed:.2e} below {min_rate:.0e} (envelope {M:.3g})")
    if stats is not None:
        stats.update(envelope=M, proposed=proposed, rate=have / proposed)
    return np.concatenate(out)[:n]


def evaluate(model: FittedModel, train_points, test_points, oracle: OracleTables | None = None,
             baselines: dict | None = None, resolution: int = 51, marginal_truth=None) -> EvalReport:
    """Full report for one fitted model; baselines are already-fitted parametric copulas."""
    if np.atleast_2d(test_points).shape[1] != model.d:
        raise EvalError(f"model has d={model.d}, data has {np.atleast_2d(test_points).shape[1]} columns")
    report = EvalReport()
    report.test_log_loss["neural"] = test_log_loss(model, test_points)
    for name, cop in (baselines or {}).items():
        report.test_log_loss[name] = test_log_loss(cop, test_points)
    report.neural_joint_log_density = joint_log_density(model, test_points)
    vres = resolution if model.d <= 2 else 21
    check = copula_validity_check(model, vres)
    report.boundary_violation_max = check["boundary_max"]
    report.rectangle_violations = check["rectangle_violations"]
    report.rectangle_worst = check["rectangle_worst"]
    report.integral_deviation = integral_deviation(model)
    report.extra["validity"] = check
    report.extra["joint_integral_deviation"] = joint_integral_deviation(model, 100 if model.d <= 2 else 30)
    if oracle is not None:
        table = oracle_table(oracle, resolution if model.d <= 2 else 21)
        report.mean_abs_C, report.max_abs_C, report.mean_abs_c, report.max_abs_c = grid_errors(model, table)
        if oracle.d == 2 and baselines:
            report.extra["baseline_grid_errors"] = {
                name: dict(zip(("mean_abs_C", "max_abs_C", "mean_abs_c", "max_abs_c"), grid_errors(cop, table)))
                for name, cop in baselines.items()}
        report.extra["test_log_loss_oracle"] = test_log_loss(oracle, test_points)
        report.ks = [ks_distance(m, lambda t, j=j: oracle.marginal_cdf_unit(j, t)) for j, m in enumerate(model.marginals)]
    elif marginal_truth is not None:
        report.ks = [ks_distance(m, f) for m, f in zip(model.marginals, marginal_truth)]
    return report


def oracle_table(oracle: OracleTables, resolution: int) -> dict:
    u = unit_lattice(resolution, oracle.d)
    return {"u": u, "C": oracle.copula(u), "c": oracle.copula_density(u)}
