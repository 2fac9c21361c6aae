"""Marginal and copula networks, evaluated through square-free jets.

Both networks are tanh stacks with a sigmoid output.  A marginal network maps
one normalized coordinate to a CDF value; its first partial is the density.
The copula network maps ``d`` pseudo-observations to a copula value; its full
mixed partial is the copula density.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from jetcopula.diffjet import Jet, Tape, jet_inputs

MARGINAL_SHAPE = (1, 5, 5, 5, 5, 1)
COPULA_HIDDEN = (10, 10, 10, 10, 10)


def copula_shape(d: int) -> tuple[int, ...]:
    return (d,) + COPULA_HIDDEN + (1,)


class ModelError(ValueError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ModelError("need one bias per weight matrix and at least one layer")
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ModelError(f"layer {j}: weight {W.shape} and bias {b.shape} do not match")
            if j and W.shape[1] != self.weights[j - 1].shape[0]:
                raise ModelError(f"layer {j} takes {W.shape[1]} inputs, previous layer gives {self.weights[j - 1].shape[0]}")
        if self.weights[-1].shape[0] != 1:
            raise ModelError("output layer must have width 1")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{j}"] = W
            out[f"b{j}"] = b
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> "MlpParams":
        n = sum(1 for k in arrays if k.startswith("w"))
        return cls([np.asarray(arrays[f"w{j}"], float) for j in range(n)],
                   [np.asarray(arrays[f"b{j}"], float) for j in range(n)])

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.named().values()])

    def to_json(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MlpParams":
        params = cls([np.asarray(W, float).reshape(-1, n_in) for W, n_in in zip(doc["weights"], doc["layer_sizes"][:-1])],
                     [np.asarray(b, float) for b in doc["biases"]])
        if params.layer_sizes != list(doc["layer_sizes"]):
            raise ModelError(f"layer sizes {doc['layer_sizes']} do not match the stored arrays")
        return params


def init_params(layer_sizes, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    layer_sizes = list(layer_sizes)
    if len(layer_sizes) < 2:
        raise ModelError(f"need at least input and output sizes, got {layer_sizes}")
    if any(int(s) < 1 for s in layer_sizes):
        raise ModelError(f"layer sizes must be positive, got {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def zero_params(layer_sizes) -> MlpParams:
    return MlpParams([np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])],
                     [np.zeros(o) for o in layer_sizes[1:]])


def record_forward(params: MlpParams, inputs: Jet, tape: Tape | None = None) -> tuple[Tape, int]:
    """Push ``inputs`` (coefficient shape (2**d, n, n_inputs)) through the network."""
    if inputs.coeffs.shape[-1] != params.n_inputs:
        raise ModelError(f"network takes {params.n_inputs} inputs, got {inputs.coeffs.shape[-1]}")
    tape = tape or Tape(inputs.d)
    h = tape.input(inputs)
    last = len(params.weights) - 1
    for j, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = tape.linear(h, f"w{j}", f"b{j}", W, b)
        h = tape.activation(h, "sigmoid" if j == last else "tanh")
    return tape, h


def forward_jet(params: MlpParams, u) -> Jet:
    """Evaluate the network with all mixed partials; output coeffs shape (2**d, n)."""
    tape, out = record_forward(params, jet_inputs(u))
    jet = tape.value(out)
    return Jet(jet.coeffs[..., 0], jet.d)


def forward_value(params: MlpParams, u) -> np.ndarray:
    """Plain network output without derivatives."""
    h = np.atleast_2d(np.asarray(u, float))
    last = len(params.weights) - 1
    for j, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        h = np.exp(-np.logaddexp(0.0, -z)) if j == last else np.tanh(z)
    return h[:, 0]


def _check_unit(x, what):
    x = np.asarray(x, float)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ModelError(f"{what} must lie in [0, 1]")
    return x


def marginal_forward(params: MlpParams, x):
    """CDF estimate and density estimate of a marginal network at ``x``.

    Scalar ``x`` returns floats, array ``x`` returns arrays.
    """
    if params.n_inputs != 1:
        raise ModelError("marginal network must have one input")
    x = _check_unit(x, "marginal input")
    jet = forward_jet(params, x.reshape(-1, 1))
    F, f = jet.coeffs[0], jet.coeffs[1]
    if x.ndim == 0:
        return float(F[0]), float(f[0])
    return F.reshape(x.shape), f.reshape(x.shape)


def copula_forward(params: MlpParams, u):
    """Copula value, copula density, and all ``2**d`` jet coefficients.

    ``u`` is one point of shape (d,) or a batch of shape (n, d).
    """
    u = _check_unit(u, "copula input")
    single = u.ndim == 1
    u2 = np.atleast_2d(u)
    if u2.shape[1] != params.n_inputs:
        raise ModelError(f"copula network takes {params.n_inputs} inputs, got {u2.shape[1]}")
    jet = forward_jet(params, u2)
    if single:
        return float(jet.coeffs[0, 0]), float(jet.coeffs[-1, 0]), jet.coeffs[:, 0]
    return jet.coeffs[0], jet.coeffs[-1], jet.coeffs


@dataclass
class FittedModel:
    marginals: list[MlpParams]
    copula: MlpParams
    lower: np.ndarray
    upper: np.ndarray
    columns: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, float)
        self.upper = np.asarray(self.upper, float)
        d = len(self.marginals)
        if self.copula.n_inputs != d:
            raise ModelError(f"{d} marginals but copula takes {self.copula.n_inputs} inputs")
        if self.lower.shape != (d,) or self.upper.shape != (d,):
            raise ModelError("need one normalization bound pair per dimension")
        if np.any(self.lower >= self.upper):
            raise ModelError("normalization bounds need min < max in every dimension")
        if not self.columns:
            self.columns = [f"x{i}" for i in range(d)]

    @property
    def d(self) -> int:
        return len(self.marginals)

    def _marginals(self, x):
        x = np.atleast_2d(_check_unit(x, "normalized point"))
        if x.shape[1] != self.d:
            raise ModelError(f"model has d={self.d}, point has {x.shape[1]} coordinates")
        F = np.empty_like(x)
        f = np.empty_like(x)
        for i, m in enumerate(self.marginals):
            F[:, i], f[:, i] = marginal_forward(m, x[:, i])
        return F, f

    def pseudo_inputs(self, x):
        """Marginal CDF values (copula inputs) and marginal densities at ``x``."""
        return self._marginals(x)

    def normalize(self, raw):
        return (np.asarray(raw, float) - self.lower) / (self.upper - self.lower)

    def denormalize(self, x):
        return self.lower + np.asarray(x, float) * (self.upper - self.lower)

    def to_json(self) -> dict:
        return {
            "kind": "neural",
            "d": self.d,
            "columns": list(self.columns),
            "normalization": {"min": self.lower.tolist(), "max": self.upper.tolist()},
            "marginals": [m.to_json() for m in self.marginals],
            "copula": self.copula.to_json(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FittedModel":
        if doc.get("kind", "neural") != "neural":
            raise ModelError(f"not a neural model document (kind={doc.get('kind')!r})")
        return cls(
            marginals=[MlpParams.from_json(m) for m in doc["marginals"]],
            copula=MlpParams.from_json(doc["copula"]),
            lower=doc["normalization"]["min"],
            upper=doc["normalization"]["max"],
            columns=list(doc.get("columns", [])),
            meta=doc.get("meta", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "FittedModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def joint_pdf(model: FittedModel, x) -> np.ndarray | float:
    """Density of the fitted model at normalized points: copula density times marginal densities."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    u, f = model.pseudo_inputs(x)
    _, c, _ = copula_forward(model.copula, u)
    out = c * np.prod(f, axis=1)
    return float(out[0]) if single else out


def joint_cdf(model: FittedModel, x) -> np.ndarray | float:
    x = np.asarray(x, float)
    single = x.ndim == 1
    u, _ = model.pseudo_inputs(x)
    C = forward_value(model.copula, u)
    return float(C[0]) if single else C
