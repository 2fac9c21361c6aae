"""Bivariate parametric copulas (Gaussian, Frank, Student-t) fit by maximum likelihood."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats

FAMILIES = ("gaussian", "frank", "student_t")
RHO_MAX = 0.999
FRANK_RANGE = (-30.0, 30.0)
FRANK_MIN_ABS = 1e-3
NU_GRID = tuple(range(3, 31))
INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class BaselineError(ValueError):
    pass


def pseudo_observations(data) -> np.ndarray:
    """Average ranks scaled by 1/(n+1), per column."""
    data = np.asarray(data, float)
    squeeze = data.ndim == 1
    data = data.reshape(len(data), -1)
    n = data.shape[0]
    if n < 2:
        raise BaselineError(f"pseudo-observations need at least 2 rows, got {n}")
    u = stats.rankdata(data, method="average", axis=0) / (n + 1.0)
    return u[:, 0] if squeeze else u


def inverse_normal_cdf(p):
    p = np.asarray(p, float)
    if np.any(~(p > 0.0) | ~(p < 1.0)):
        raise BaselineError("inverse normal CDF needs p strictly inside (0, 1)")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def _check_u(u):
    u = np.atleast_2d(np.asarray(u, float))
    if u.shape[1] != 2:
        raise BaselineError(f"bivariate copula needs points of shape (n, 2), got {u.shape}")
    if np.any(~(u > 0.0) | ~(u < 1.0)):
        raise BaselineError("copula density needs points strictly inside the unit square")
    return u


def _check_params(family, params):
    if family not in FAMILIES:
        raise BaselineError(f"unknown family {family!r}")
    if family in ("gaussian", "student_t"):
        rho = params.get("rho")
        if rho is None or not -1.0 < rho < 1.0:
            raise BaselineError(f"{family} needs rho in (-1, 1), got {rho}")
    if family == "frank":
        theta = params.get("theta")
        if theta is None or theta == 0.0 or not math.isfinite(theta):
            raise BaselineError(f"frank needs a finite non-zero theta, got {theta}")
    if family == "student_t":
        nu = params.get("nu")
        if nu is None or not nu > 2.0:
            raise BaselineError(f"student_t needs nu > 2, got {nu}")


def _gaussian_logpdf(u, rho):
    x, y = special.ndtri(u[:, 0]), special.ndtri(u[:, 1])
    r2 = 1.0 - rho * rho
    return -0.5 * math.log(r2) - (rho * rho * (x * x + y * y) - 2.0 * rho * x * y) / (2.0 * r2)


def _frank_logpdf(u, theta):
    a = -np.expm1(-theta)                       # 1 - e^-t
    au = -np.expm1(-theta * u[:, 0])
    av = -np.expm1(-theta * u[:, 1])
    denom = a - au * av
    return math.log(abs(theta * a)) - theta * (u[:, 0] + u[:, 1]) - 2.0 * np.log(np.abs(denom))


def _t_logpdf(u, rho, nu):
    x = stats.t.ppf(u[:, 0], nu)
    y = stats.t.ppf(u[:, 1], nu)
    r2 = 1.0 - rho * rho
    q = (x * x - 2.0 * rho * x * y + y * y) / (nu * r2)
    log_f2 = (special.gammaln((nu + 2.0) / 2.0) - special.gammaln(nu / 2.0) - math.log(nu * math.pi)
              - 0.5 * math.log(r2) - (nu + 2.0) / 2.0 * np.log1p(q))
    return log_f2 - stats.t.logpdf(x, nu) - stats.t.logpdf(y, nu)


def copula_log_density(family: str, params: dict, u) -> np.ndarray:
    _check_params(family, params)
    u = _check_u(u)
    if family == "gaussian":
        return _gaussian_logpdf(u, params["rho"])
    if family == "frank":
        return _frank_logpdf(u, params["theta"])
    return _t_logpdf(u, params["rho"], params["nu"])


def copula_density(family: str, params: dict, u):
    u = np.asarray(u, float)
    out = np.exp(copula_log_density(family, params, u))
    return float(out[0]) if u.ndim == 1 else out


def frank_cdf(theta: float, u, v):
    num = np.expm1(-theta * np.asarray(u, float)) * np.expm1(-theta * np.asarray(v, float))
    return -np.log1p(num / np.expm1(-theta)) / theta


def h_function(family: str, params: dict, u, v):
    """Conditional CDF of V given U = u, i.e. dC/du."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    if family == "gaussian":
        rho = params["rho"]
        return special.ndtr((special.ndtri(v) - rho * special.ndtri(u)) / math.sqrt(1.0 - rho * rho))
    if family == "student_t":
        rho, nu = params["rho"], params["nu"]
        x, y = special.stdtrit(nu, u), special.stdtrit(nu, v)
        scale = np.sqrt((nu + x * x) * (1.0 - rho * rho) / (nu + 1.0))
        return special.stdtr(nu + 1.0, (y - rho * x) / scale)
    theta = params["theta"]
    eu, ev = np.expm1(-theta * u), np.expm1(-theta * v)
    return np.exp(-theta * u) * ev / (np.expm1(-theta) + eu * ev)


def _t_cdf(a, b, rho, nu):
    # integrate in t-space from -inf up to the a-quantile; no quantile calls inside the integrand
    xa, y = special.stdtrit(nu, a), special.stdtrit(nu, b)
    log_norm = special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2) - 0.5 * math.log(nu * math.pi)

    def integrand(s):
        x = xa - s
        scale = np.sqrt((nu + x * x) * (1.0 - rho * rho) / (nu + 1.0))
        return np.exp(log_norm - (nu + 1) / 2 * np.log1p(x * x / nu)) * special.stdtr(nu + 1.0, (y - rho * x) / scale)

    return integrate.quad_vec(integrand, 0.0, np.inf, epsabs=1e-13, epsrel=1e-12, norm="max", limit=400)[0]


def copula_cdf(family: str, params: dict, u):
    """Copula CDF; Frank in closed form, elliptical families by vectorized quadrature.

    Gaussian: C(a, b) = a * int_0^1 h(a w, b) dw. Student t: the same integral
    taken over the t-quantile scale.
    """
    _check_params(family, params)
    u = np.atleast_2d(np.asarray(u, float))
    a, b = u[:, 0], u[:, 1]
    out = np.where((a <= 0.0) | (b <= 0.0), 0.0, np.where(a >= 1.0, np.minimum(b, 1.0), a))
    inner = (a > 0.0) & (a < 1.0) & (b > 0.0) & (b < 1.0)
    out = np.where((b >= 1.0) & (a > 0.0) & (a < 1.0), a, out)
    if not inner.any():
        return out
    A, B = a[inner], b[inner]
    if family == "frank":
        out[inner] = frank_cdf(params["theta"], A, B)
    elif family == "student_t":
        out[inner] = _t_cdf(A, B, params["rho"], params["nu"])
    else:
        val, _ = integrate.quad_vec(lambda w: h_function(family, params, A * w, B), 0.0, 1.0,
                                    epsabs=1e-13, epsrel=1e-12, norm="max", limit=400)
        out[inner] = A * val
    return out


@dataclass
class ParametricCopula:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = {k: float(v) for k, v in self.params.items()}
        _check_params(self.family, self.params)

    @property
    def independent(self) -> bool:
        return self.family == "frank" and abs(self.params["theta"]) < FRANK_MIN_ABS

    def log_density(self, u):
        return copula_log_density(self.family, self.params, u)

    def density(self, u):
        return copula_density(self.family, self.params, u)

    def cdf(self, u):
        return copula_cdf(self.family, self.params, u)

    def log_likelihood(self, u) -> float:
        return float(np.sum(self.log_density(u)))

    def to_json(self) -> dict:
        return {"kind": "parametric", "family": self.family, "params": dict(self.params)}

    @classmethod
    def from_json(cls, doc: dict) -> "ParametricCopula":
        if doc.get("kind") != "parametric":
            raise BaselineError(f"not a parametric copula document (kind={doc.get('kind')!r})")
        return cls(doc["family"], doc["params"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def golden_section_max(func, lo: float, hi: float, tol: float = 1e-6, max_iter: int = 200):
    """Maximizer of a unimodal ``func`` on [lo, hi]."""
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = func(c), func(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = func(d)
    x = 0.5 * (a + b)
    return x, func(x)


def _gaussian_ll(u, rho):
    return float(np.sum(_gaussian_logpdf(u, rho)))


def fit_mle(family: str, pseudo_obs) -> ParametricCopula:
    u = _check_u(pseudo_obs)
    if np.any(np.ptp(u, axis=0) == 0.0):
        raise BaselineError("degenerate data: a column is constant")
    if family == "gaussian":
        z = special.ndtri(u)
        rho0 = float(np.clip(np.corrcoef(z.T)[0, 1], -RHO_MAX, RHO_MAX))
        lo, hi = max(-RHO_MAX, rho0 - 0.1), min(RHO_MAX, rho0 + 0.1)
        rho, _ = golden_section_max(lambda r: _gaussian_ll(u, r), lo, hi, tol=1e-8)
        return ParametricCopula("gaussian", {"rho": rho})
    if family == "frank":
        best = None
        for lo, hi in ((FRANK_RANGE[0], -FRANK_MIN_ABS), (FRANK_MIN_ABS, FRANK_RANGE[1])):
            theta, ll = golden_section_max(lambda t: float(np.sum(_frank_logpdf(u, t))), lo, hi, tol=1e-6)
            if best is None or ll > best[1]:
                best = (theta, ll)
        return ParametricCopula("frank", {"theta": best[0]})
    if family == "student_t":
        best = None
        for nu in NU_GRID:
            x = stats.t.ppf(u[:, 0], nu)
            y = stats.t.ppf(u[:, 1], nu)
            norm = (special.gammaln((nu + 2.0) / 2.0) - special.gammaln(nu / 2.0) - math.log(nu * math.pi)
                    - np.sum(stats.t.logpdf(x, nu) + stats.t.logpdf(y, nu)) / len(u))

            def ll(rho, x=x, y=y, nu=nu, norm=norm):
                r2 = 1.0 - rho * rho
                q = (x * x - 2.0 * rho * x * y + y * y) / (nu * r2)
                return float(len(x) * (norm - 0.5 * math.log(r2)) - (nu + 2.0) / 2.0 * np.sum(np.log1p(q)))

            rho, val = golden_section_max(ll, -RHO_MAX, RHO_MAX, tol=1e-7)
            if best is None or val > best[2]:
                best = (rho, nu, val)
        return ParametricCopula("student_t", {"rho": best[0], "nu": float(best[1])})
    raise BaselineError(f"unknown family {family!r}")


def fit_all(pseudo_obs) -> dict[str, ParametricCopula]:
    return {fam: fit_mle(fam, pseudo_obs) for fam in FAMILIES}


def sample_frank(theta: float, n: int, seed: int = 0) -> np.ndarray:
    """Draws from a Frank copula by inverting the conditional distribution of V given U."""
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    p = rng.random(n)
    v = -np.log1p(p * np.expm1(-theta) / (p + (1.0 - p) * np.exp(-theta * u))) / theta
    return np.stack([u, v], axis=1)
