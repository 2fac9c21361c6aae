"""Training sets, Adam, and the two-phase fit (marginals first, then the copula)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from jetcopula.diffjet import Jet, backward, jet_inputs
from jetcopula.losses import (
    COPULA_TERMS,
    COPULA_WEIGHTS,
    MARGINAL_TERMS,
    MARGINAL_WEIGHTS,
    LossBreakdown,
    LossWeights,
    anchor_term,
    boundary_term,
    endpoint_term,
    flag_counts,
    integral_term,
    negativity_term,
    nll_term,
    total_loss,
)
from jetcopula.models import (
    COPULA_HIDDEN,
    MARGINAL_SHAPE,
    FittedModel,
    MlpParams,
    init_params,
    marginal_forward,
    record_forward,
)

log = logging.getLogger(__name__)

BOUNDARY_REDUCTIONS = ("face_mean", "sum")


class TrainingError(RuntimeError):
    """Training diverged; ``epoch`` is the first bad epoch."""

    def __init__(self, msg, epoch=None, last_finite=None):
        super().__init__(msg)
        self.epoch = epoch
        self.last_finite = last_finite


@dataclass
class TrainConfig:
    marginal_epochs: int = 60_000
    copula_epochs: int = 60_000
    marginal_lr: float = 1e-3
    copula_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # 1e-3 saturates the sigmoid edges and caps marginal KS near 0.04
    marginal_l2_rate: float = 1e-4
    copula_l2_rate: float = 1e-3
    marginal_weights: tuple[float, ...] = MARGINAL_WEIGHTS.lam
    copula_weights: tuple[float, ...] = COPULA_WEIGHTS.lam
    n_m2: int = 1000
    n_m3: int = 1000
    n_c2: int = 2500
    n_c3: int = 2500
    n_c4: int = 800
    n_c5: int = 200
    marginal_shape: tuple[int, ...] = MARGINAL_SHAPE
    copula_hidden: tuple[int, ...] = COPULA_HIDDEN
    # "face_mean" divides the boundary sums by n_c4; "sum" keeps them raw
    boundary_reduction: str = "face_mean"
    seed: int = 0

    def __post_init__(self):
        for name in ("marginal_weights", "copula_weights", "marginal_shape", "copula_hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        LossWeights(self.marginal_weights)
        LossWeights(self.copula_weights)
        if len(self.marginal_weights) != 4 or len(self.copula_weights) != 5:
            raise ValueError("need 4 marginal and 5 copula loss weights")
        if self.marginal_epochs < 1 or self.copula_epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("marginal_lr", "copula_lr", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("marginal_l2_rate", "copula_l2_rate"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("n_m2", "n_m3", "n_c2", "n_c3", "n_c4", "n_c5"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.boundary_reduction not in BOUNDARY_REDUCTIONS:
            raise ValueError(f"boundary_reduction must be one of {BOUNDARY_REDUCTIONS}")

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


# training sets -----------------------------------------------------------

def midpoint_grid(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def lattice_side(n: int, d: int) -> int:
    """Smallest per-axis count m with m**d >= n."""
    m = max(1, int(math.floor(n ** (1.0 / d))))
    while m ** d < n:
        m += 1
    while m > 1 and (m - 1) ** d >= n:
        m -= 1
    return m


def midpoint_lattice(m: int, d: int) -> np.ndarray:
    axis = midpoint_grid(m)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass
class MarginalSets:
    D1: np.ndarray
    D2: np.ndarray
    D3: np.ndarray
    spacing2: float
    spacing3: float
    D4: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))


@dataclass
class CopulaSets:
    D1: np.ndarray
    D2: np.ndarray
    D3: np.ndarray
    cell2: float
    cell3: float
    lower: np.ndarray
    upper: np.ndarray
    u_free: np.ndarray
    D5: np.ndarray
    D5_counts: np.ndarray

    @property
    def D4(self) -> np.ndarray:
        return np.concatenate([self.lower, self.upper])

    @property
    def n4(self) -> int:
        """Points per boundary face."""
        return len(self.lower) // self.D1.shape[1]

    @property
    def D5_targets(self) -> np.ndarray:
        return self.D5_counts / len(self.D1)

    @property
    def n(self) -> dict:
        return {"n1": len(self.D1), "n2": len(self.D2), "n3": len(self.D3),
                "n4": len(self.lower) + len(self.upper), "n5": len(self.D5)}


def build_marginal_sets(column, n2: int, n3: int, seed: int = 0) -> MarginalSets:
    """Data column plus midpoint grids on [0, 1]; D4 is always the two endpoints.

    Nothing here is random; ``seed`` is accepted for a uniform builder signature.
    """
    column = np.asarray(column, float).ravel()
    if column.size == 0:
        raise ValueError("empty data column")
    return MarginalSets(column.copy(), midpoint_grid(n2), midpoint_grid(n3), 1.0 / n2, 1.0 / n3)


def build_copula_sets(data, n2: int, n3: int, n4: int, n5: int, seed: int = 0) -> CopulaSets:
    data = np.atleast_2d(np.asarray(data, float))
    if data.shape[0] == 0:
        raise ValueError("empty data set")
    d = data.shape[1]
    m2, m3 = lattice_side(n2, d), lattice_side(n3, d)
    rng = np.random.default_rng(seed)
    lower, upper, u_free = [], [], []
    for i in range(d):
        lo = rng.uniform(0.0, 1.0, size=(n4, d))
        lo[:, i] = 0.0
        up = np.ones((n4, d))
        up[:, i] = rng.uniform(0.0, 1.0, size=n4)
        lower.append(lo)
        upper.append(up)
        u_free.append(up[:, i].copy())
    D5 = rng.uniform(0.0, 1.0, size=(n5, d))
    return CopulaSets(
        D1=data.copy(),
        D2=midpoint_lattice(m2, d),
        D3=midpoint_lattice(m3, d),
        cell2=(1.0 / m2) ** d,
        cell3=(1.0 / m3) ** d,
        lower=np.concatenate(lower),
        upper=np.concatenate(upper),
        u_free=np.concatenate(u_free),
        D5=D5,
        D5_counts=flag_counts(data, D5),
    )


# optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: MlpParams) -> "AdamState":
        named = params.named()
        return cls({k: np.zeros_like(a) for k, a in named.items()}, {k: np.zeros_like(a) for k, a in named.items()})


def adam_step(params: MlpParams, grads: dict, state: AdamState, lr: float, l2_rate: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; L2 adds ``2 * l2_rate * w`` to weight gradients only."""
    named = params.named()
    if set(grads) != set(named):
        raise ValueError(f"gradient keys {sorted(grads)} do not match parameters {sorted(named)}")
    for k, g in grads.items():
        if np.shape(g) != named[k].shape:
            raise ValueError(f"gradient for {k} has shape {np.shape(g)}, parameter has {named[k].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
    t = state.t + 1
    new, m_new, v_new = {}, {}, {}
    for k, p in named.items():
        g = grads[k]
        if k.startswith("w") and l2_rate:
            g = g + 2.0 * l2_rate * p
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return MlpParams.from_named(new), AdamState(m_new, v_new, t)


def l2_penalty(params: MlpParams, l2_rate: float) -> float:
    return float(l2_rate * sum(np.sum(W * W) for W in params.weights))


# batches -----------------------------------------------------------------

def _stack(parts):
    """Concatenate point sets, sharing storage for identical ones; returns (batch, slices)."""
    blocks, slices, start = [], [], 0
    for p in parts:
        for j, (prev, sl) in enumerate(zip(parts[:len(slices)], slices)):
            if prev.shape == p.shape and np.array_equal(prev, p):
                slices.append(sl)
                break
        else:
            slices.append(slice(start, start + len(p)))
            blocks.append(p)
            start += len(p)
    return np.concatenate(blocks), slices


def _check_finite(total, epoch, history):
    if not np.isfinite(total):
        last = history[-1]["epoch"] if history else None
        raise TrainingError(f"loss became non-finite at epoch {epoch}", epoch=epoch, last_finite=last)


class MarginalObjective:
    """Weighted marginal loss and its parameter gradient on fixed training sets."""

    def __init__(self, sets: MarginalSets, weights: LossWeights):
        self.sets = sets
        self.weights = weights
        self.x, (self.s1, self.s2, self.s3, self.s4) = _stack(
            [sets.D1, sets.D2, sets.D3, np.asarray(sets.D4, float)])
        self.inputs = jet_inputs(self.x[:, None])

    def __call__(self, params: MlpParams, want_grad: bool = True):
        tape, out = record_forward(params, self.inputs)
        F, f = tape.value(out).coeffs[..., 0]
        lam = self.weights.lam
        l1, g1 = nll_term(f[self.s1])
        l2, g2 = negativity_term(f[self.s2])
        l3, g3 = integral_term(f[self.s3], self.sets.spacing3)
        F4 = F[self.s4]
        l4, (gF0, gF1) = endpoint_term(F4[0], F4[1])
        terms = [l1, l2, l3, l4]
        breakdown = LossBreakdown(terms, total_loss(terms, self.weights), MARGINAL_TERMS)
        if not want_grad:
            return breakdown, None
        seed = np.zeros((2, len(self.x), 1))
        seed[1, self.s1, 0] += lam[0] * g1
        seed[1, self.s2, 0] += lam[1] * g2
        seed[1, self.s3, 0] += lam[2] * g3
        i0, i1 = self.s4.start, self.s4.start + 1
        seed[0, i0, 0] += lam[3] * gF0
        seed[0, i1, 0] += lam[3] * gF1
        return breakdown, backward(tape, seed=seed, output=out)


class CopulaObjective:
    """Weighted copula loss; marginal outputs enter as precomputed constants."""

    def __init__(self, sets: CopulaSets, marginals: list[MlpParams], weights: LossWeights,
                 boundary_reduction: str = "face_mean"):
        self.sets = sets
        self.per_face = sets.n4 if boundary_reduction == "face_mean" else 1
        self.weights = weights
        self.d = sets.D1.shape[1]
        # marginals are frozen, so their outputs on the fixed sets are constants
        x_all, (r1, r2, r3, r5) = _stack([sets.D1, sets.D2, sets.D3, sets.D5])
        u_all = np.empty_like(x_all)
        f_all = np.empty_like(x_all)
        for i, m in enumerate(marginals):
            u_all[:, i], f_all[:, i] = marginal_forward(m, x_all[:, i])
        prod_f = np.prod(f_all, axis=1)
        self.P1, self.P2, self.P3 = prod_f[r1], prod_f[r2], prod_f[r3]
        # sets that need the copula density go through full jets; boundary and
        # observation points only need the value, so they use a d=0 tape
        self.u, (self.s1, self.s2, self.s3) = _stack([u_all[r1], u_all[r2], u_all[r3]])
        self.u_val, (self.sl, self.su, self.s5) = _stack([sets.lower, sets.upper, u_all[r5]])
        self.inputs = jet_inputs(self.u)
        self.inputs_val = Jet(self.u_val[None], 0)
        self.n1 = len(sets.D1)

    def __call__(self, params: MlpParams, want_grad: bool = True):
        tape, out = record_forward(params, self.inputs)
        co = tape.value(out).coeffs[..., 0]
        vtape, vout = record_forward(params, self.inputs_val)
        C = vtape.value(vout).coeffs[0, :, 0]
        c = co[-1]
        lam = self.weights.lam
        l1, g1 = nll_term(c[self.s1] * self.P1)
        l2, g2 = negativity_term(c[self.s2] * self.P2)
        l3, g3 = integral_term(c[self.s3] * self.P3, self.sets.cell3)
        l4, (gl, gu) = boundary_term(C[self.sl], C[self.su], self.sets.u_free, self.per_face)
        l5, g5 = anchor_term(C[self.s5], self.sets.D5_counts, self.n1)
        terms = [l1, l2, l3, l4, l5]
        breakdown = LossBreakdown(terms, total_loss(terms, self.weights), COPULA_TERMS)
        if not want_grad:
            return breakdown, None
        full = (1 << self.d) - 1
        seed = np.zeros(co.shape + (1,))
        seed[full, self.s1, 0] += lam[0] * g1 * self.P1
        seed[full, self.s2, 0] += lam[1] * g2 * self.P2
        seed[full, self.s3, 0] += lam[2] * g3 * self.P3
        vseed = np.zeros((1, len(self.u_val), 1))
        vseed[0, self.sl, 0] += lam[3] * gl
        vseed[0, self.su, 0] += lam[3] * gu
        vseed[0, self.s5, 0] += lam[4] * g5
        grads = backward(tape, seed=seed, output=out)
        vgrads = backward(vtape, seed=vseed, output=vout)
        return breakdown, {k: grads[k] + vgrads[k] for k in grads}


def _run(objective, params, epochs, lr, l2_rate, config: TrainConfig, callback=None, phase=""):
    state = AdamState.zeros(params)
    history = []
    for epoch in range(epochs):
        breakdown, grads = objective(params)
        _check_finite(breakdown.total, epoch, history)
        rec = breakdown.record(epoch)
        history.append(rec)
        if callback is not None:
            callback(phase, rec)
        try:
            params, state = adam_step(params, grads, state, lr, l2_rate,
                                      config.beta1, config.beta2, config.adam_eps)
        except TrainingError as exc:
            raise TrainingError(f"{phase} epoch {epoch}: {exc}", epoch=epoch,
                                last_finite=history[-2]["epoch"] if len(history) > 1 else None) from exc
    final, _ = objective(params, want_grad=False)
    _check_finite(final.total, epochs, history)
    return params, history, final


def train_marginal(column, config: TrainConfig, seed: int | None = None, callback=None):
    """Fit one marginal network on a normalized data column.

    Returns ``(params, history, final_breakdown)``; history holds one record per epoch.
    """
    seed = config.seed if seed is None else seed
    sets = build_marginal_sets(column, config.n_m2, config.n_m3, seed)
    objective = MarginalObjective(sets, LossWeights(config.marginal_weights))
    params = init_params(config.marginal_shape, seed)
    return _run(objective, params, config.marginal_epochs, config.marginal_lr, config.marginal_l2_rate, config,
                callback, "marginal")


def train_copula(data, marginals: list[MlpParams], config: TrainConfig, seed: int | None = None,
                 callback=None, sets: CopulaSets | None = None):
    """Fit the copula network with the marginal networks held fixed."""
    seed = config.seed if seed is None else seed
    data = np.atleast_2d(np.asarray(data, float))
    d = data.shape[1]
    if len(marginals) != d:
        raise ValueError(f"{len(marginals)} marginals for d={d} data")
    if sets is None:
        sets = build_copula_sets(data, config.n_c2, config.n_c3, config.n_c4, config.n_c5, seed)
    objective = CopulaObjective(sets, marginals, LossWeights(config.copula_weights), config.boundary_reduction)
    params = init_params((d,) + tuple(config.copula_hidden) + (1,), seed)
    return _run(objective, params, config.copula_epochs, config.copula_lr, config.copula_l2_rate, config,
                callback, "copula")


def phase_seeds(seed: int, d: int) -> tuple[list[int], int]:
    ss = np.random.SeedSequence(seed).spawn(d + 1)
    ints = [int(s.generate_state(1)[0]) for s in ss]
    return ints[:d], ints[d]


@dataclass
class FitResult:
    model: FittedModel
    marginal_histories: list[list[dict]]
    copula_history: list[dict]
    sets: CopulaSets


def fit(train_data, lower, upper, config: TrainConfig, columns=None, callback=None) -> FitResult:
    """Two-phase fit on normalized training rows: each marginal, then the copula."""
    train_data = np.atleast_2d(np.asarray(train_data, float))
    d = train_data.shape[1]
    m_seeds, c_seed = phase_seeds(config.seed, d)
    marginals, m_hist = [], []
    for i in range(d):
        params, hist, final = train_marginal(train_data[:, i], config, m_seeds[i], callback)
        log.info("marginal %d done: %s", i, final.record(len(hist)))
        marginals.append(params)
        m_hist.append(hist)
    sets = build_copula_sets(train_data, config.n_c2, config.n_c3, config.n_c4, config.n_c5, c_seed)
    copula, c_hist, final = train_copula(train_data, marginals, config, c_seed, callback, sets=sets)
    log.info("copula done: %s", final.record(len(c_hist)))
    model = FittedModel(marginals, copula, lower, upper, columns=list(columns or []),
                        meta={"config": config.to_dict()})
    return FitResult(model, m_hist, c_hist, sets)
