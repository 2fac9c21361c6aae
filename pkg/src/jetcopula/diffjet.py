"""Square-free mixed-partial jets and a reverse-mode tape over jet arithmetic.

A jet over ``d`` active inputs stores ``2**d`` coefficients, indexed by subset
bitmask: ``coeffs[0]`` is the function value and ``coeffs[mask]`` is the mixed
partial derivative taken once with respect to every input whose bit is set in
``mask``.  Each coefficient may itself be an array, so one jet carries a whole
batch (and a whole layer of neurons) at once.

The :class:`Tape` records jet-valued primitives (input, linear layer,
activation, add, scale, mul) so that :func:`backward` can pull the gradient of
any output coefficient back onto the network parameters.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

MAX_ORDER = 8
ACTIVATIONS = ("tanh", "sigmoid")


class JetError(ValueError):
    pass


def subset_mask(subset) -> int:
    """Bitmask for an iterable of input indices (an int is passed through)."""
    if isinstance(subset, (int, np.integer)):
        return int(subset)
    mask = 0
    for i in subset:
        mask |= 1 << int(i)
    return mask


def mask_members(mask: int) -> tuple[int, ...]:
    return tuple(i for i in range(mask.bit_length()) if mask >> i & 1)


def submasks(mask: int) -> list[int]:
    """All submasks of ``mask``, including 0 and ``mask`` itself."""
    out = []
    sub = mask
    while True:
        out.append(sub)
        if sub == 0:
            break
        sub = (sub - 1) & mask
    return out


@lru_cache(maxsize=None)
def set_partitions(mask: int) -> tuple[tuple[int, ...], ...]:
    """Set partitions of the members of ``mask`` as tuples of block masks.

    The empty set has exactly one partition, the empty one.
    """
    if mask == 0:
        return ((),)
    low = mask & -mask
    rest = mask ^ low
    parts = []
    # the block holding the lowest member is ``low | extra`` for extra <= rest
    for extra in submasks(rest):
        block = low | extra
        for tail in set_partitions(rest ^ extra):
            parts.append((block,) + tail)
    return tuple(parts)


class Jet:
    """Value plus square-free mixed partials with respect to ``d`` inputs."""

    __slots__ = ("coeffs", "d")

    def __init__(self, coeffs, d: int):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[0] != 1 << d:
            raise JetError(f"expected {1 << d} coefficients for d={d}, got {coeffs.shape[0]}")
        self.coeffs = coeffs
        self.d = d

    @property
    def universe(self) -> frozenset[int]:
        return frozenset(range(self.d))

    @property
    def value(self):
        return self.coeffs[0]

    @property
    def full(self):
        """Coefficient of the full set, i.e. the d-th mixed partial."""
        return self.coeffs[(1 << self.d) - 1]

    def coeff(self, subset):
        mask = subset_mask(subset)
        if mask >> self.d:
            raise JetError(f"subset {subset!r} is not inside the universe of size {self.d}")
        return self.coeffs[mask]

    def as_dict(self) -> dict[frozenset[int], float]:
        return {frozenset(mask_members(m)): self.coeffs[m] for m in range(1 << self.d)}

    def __add__(self, other):
        return jet_add(self, other)

    def __mul__(self, other):
        if isinstance(other, Jet):
            return jet_mul(self, other)
        return jet_scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Jet(d={self.d}, coeffs={self.coeffs!r})"


def _check_same(a: Jet, b: Jet):
    if a.d != b.d:
        raise JetError(f"universe mismatch: d={a.d} vs d={b.d}")


def jet_var(index: int, value, d: int) -> Jet:
    """Seed jet for input ``index``: value, unit first partial, zeros elsewhere."""
    if not 0 <= index < d:
        raise JetError(f"input index {index} out of range for d={d}")
    value = np.asarray(value, dtype=float)
    coeffs = np.zeros((1 << d,) + value.shape)
    coeffs[0] = value
    coeffs[1 << index] = 1.0
    return Jet(coeffs, d)


def jet_const(value, d: int) -> Jet:
    value = np.asarray(value, dtype=float)
    coeffs = np.zeros((1 << d,) + value.shape)
    coeffs[0] = value
    return Jet(coeffs, d)


def jet_inputs(u) -> Jet:
    """Jet over a batch of input vectors ``u`` of shape (n, d).

    Column ``i`` is seeded as input variable ``i``; the result has coefficient
    shape (2**d, n, d), ready for a linear layer.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n, d = u.shape
    coeffs = np.zeros((1 << d, n, d))
    coeffs[0] = u
    for i in range(d):
        coeffs[1 << i, :, i] = 1.0
    return Jet(coeffs, d)


def jet_add(a: Jet, b: Jet) -> Jet:
    _check_same(a, b)
    return Jet(a.coeffs + b.coeffs, a.d)


def jet_scale(a: Jet, k) -> Jet:
    return Jet(a.coeffs * k, a.d)


def leibniz(ac: np.ndarray, bc: np.ndarray) -> np.ndarray:
    """Subset convolution ``(ab)_S = sum_{A in S} a_A b_{S minus A}``."""
    out = np.zeros(np.broadcast_shapes(ac.shape, bc.shape))
    for s in range(out.shape[0]):
        for sub in submasks(s):
            out[s] += ac[sub] * bc[s ^ sub]
    return out


def jet_mul(a: Jet, b: Jet) -> Jet:
    _check_same(a, b)
    return Jet(leibniz(a.coeffs, b.coeffs), a.d)


def faa_di_bruno(fc: np.ndarray, derivs) -> np.ndarray:
    """Coefficients of ``g(f)`` given ``derivs[k] = g^(k)(f_0)``."""
    n = fc.shape[0]
    out = np.empty_like(fc)
    for s in range(n):
        acc = 0.0
        for part in set_partitions(s):
            term = derivs[len(part)]
            for block in part:
                term = term * fc[block]
            acc = acc + term
        out[s] = acc
    return out


def jet_unary(a: Jet, derivs) -> Jet:
    """Compose a scalar function with a jet, given its derivatives at ``a.value``."""
    if len(derivs) < a.d + 1:
        raise JetError(f"need {a.d + 1} derivatives for d={a.d}, got {len(derivs)}")
    return Jet(faa_di_bruno(a.coeffs, derivs), a.d)


@lru_cache(maxsize=None)
def _derivative_polys(kind: str, order: int) -> tuple[np.ndarray, ...]:
    # derivatives of tanh and sigmoid are polynomials in the activation itself:
    # tanh' = 1 - t^2, sigmoid' = s - s^2
    if kind == "tanh":
        base = np.array([0.0, 1.0])
        chain = np.array([1.0, 0.0, -1.0])
    elif kind == "sigmoid":
        base = np.array([0.0, 1.0])
        chain = np.array([0.0, 1.0, -1.0])
    else:
        raise JetError(f"unknown activation {kind!r}")
    polys = [base]
    for _ in range(order):
        p = np.polynomial.polynomial.polyder(polys[-1])
        polys.append(np.polynomial.polynomial.polymul(p, chain))
    return tuple(polys)


def activation_derivs(kind: str, x, up_to: int) -> np.ndarray:
    """Derivatives ``[g(x), g'(x), ..., g^(up_to)(x)]`` of tanh or sigmoid.

    Array ``x`` gives an array of shape ``(up_to + 1,) + x.shape``.
    """
    if not 0 <= up_to <= MAX_ORDER:
        raise JetError(f"derivative order {up_to} unsupported (max {MAX_ORDER})")
    x = np.asarray(x, dtype=float)
    if kind == "tanh":
        t = np.tanh(x)
    elif kind == "sigmoid":
        # stable logistic
        t = np.exp(-np.logaddexp(0.0, -x))
    else:
        raise JetError(f"unknown activation {kind!r}")
    out = np.empty((up_to + 1,) + x.shape)
    out[0] = t
    if up_to <= 4:
        # closed forms; orders above 4 fall back to the polynomial recursion
        if kind == "tanh":
            q = 1.0 - t * t
            t2 = t * t
            closed = (lambda: q, lambda: -2.0 * t * q, lambda: q * (6.0 * t2 - 2.0),
                      lambda: q * t * (16.0 - 24.0 * t2))
        else:
            q = t * (1.0 - t)
            closed = (lambda: q, lambda: q * (1.0 - 2.0 * t), lambda: q * (1.0 + t * (6.0 * t - 6.0)),
                      lambda: q * (1.0 + t * (-14.0 + t * (36.0 - 24.0 * t))))
        for k in range(1, up_to + 1):
            out[k] = closed[k - 1]()
        return out
    polys = _derivative_polys(kind, up_to)
    for k in range(1, up_to + 1):
        out[k] = np.polynomial.polynomial.polyval(t, polys[k])
    return out


class Tape:
    """Records a forward pass of jet primitives for one reverse sweep.

    Parameters are referenced by name; the arrays are held by reference and
    must not be mutated between the forward pass and :func:`backward`.
    """

    def __init__(self, d: int):
        self.d = d
        self.nodes: list[dict] = []
        self.values: list[Jet] = []
        self.params: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: dict) -> int:
        self.nodes.append(node)
        self.values.append(_FORWARD[node["op"]](self, node))
        return len(self.nodes) - 1

    def value(self, node_id: int = -1) -> Jet:
        return self.values[node_id]

    def input(self, jet: Jet) -> int:
        if jet.d != self.d:
            raise JetError(f"universe mismatch: tape d={self.d}, jet d={jet.d}")
        return self._push({"op": "input", "jet": jet})

    def linear(self, x: int, weight: str, bias: str | None, W: np.ndarray, b=None) -> int:
        """Record ``x @ W.T + b`` applied to every coefficient (bias on the value only)."""
        self.params[weight] = W
        if bias is not None:
            self.params[bias] = b
        return self._push({"op": "linear", "args": (x,), "weight": weight, "bias": bias})

    def activation(self, x: int, kind: str) -> int:
        if kind not in ACTIVATIONS:
            raise JetError(f"unknown activation {kind!r}")
        return self._push({"op": "activation", "args": (x,), "kind": kind})

    def add(self, a: int, b: int) -> int:
        return self._push({"op": "add", "args": (a, b)})

    def scale(self, a: int, k: float) -> int:
        return self._push({"op": "scale", "args": (a,), "k": k})

    def mul(self, a: int, b: int) -> int:
        return self._push({"op": "mul", "args": (a, b)})

    def replay(self) -> Jet:
        """Re-run every recorded node forward and return the last value."""
        if not self.nodes:
            raise JetError("empty tape")
        self.values = []
        for node in self.nodes:
            self.values.append(_FORWARD[node["op"]](self, node))
        return self.values[-1]


def _fwd_input(tape, node):
    return node["jet"]


def _fwd_linear(tape, node):
    x = tape.values[node["args"][0]].coeffs
    W = tape.params[node["weight"]]
    out = x @ W.T
    if node["bias"] is not None:
        out[0] += tape.params[node["bias"]]
    return Jet(out, tape.d)


def _fwd_activation(tape, node):
    x = tape.values[node["args"][0]]
    # one extra order is kept for the reverse sweep
    derivs = activation_derivs(node["kind"], x.value, tape.d + 1)
    node["derivs"] = derivs
    return Jet(faa_di_bruno(x.coeffs, derivs), tape.d)


def _fwd_add(tape, node):
    a, b = node["args"]
    return jet_add(tape.values[a], tape.values[b])


def _fwd_scale(tape, node):
    return jet_scale(tape.values[node["args"][0]], node["k"])


def _fwd_mul(tape, node):
    a, b = node["args"]
    return jet_mul(tape.values[a], tape.values[b])


_FORWARD = {
    "input": _fwd_input,
    "linear": _fwd_linear,
    "activation": _fwd_activation,
    "add": _fwd_add,
    "scale": _fwd_scale,
    "mul": _fwd_mul,
}


def _bwd_linear(tape, node, g, grads):
    x = tape.values[node["args"][0]].coeffs
    W = tape.params[node["weight"]]
    gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    grads[node["weight"]] = grads.get(node["weight"], 0.0) + gw
    if node["bias"] is not None:
        gb = g[0].reshape(-1, g.shape[-1]).sum(axis=0)
        grads[node["bias"]] = grads.get(node["bias"], 0.0) + gb
    return (g @ W,)


def _bwd_activation(tape, node, g, grads):
    fc = tape.values[node["args"][0]].coeffs
    derivs = node["derivs"]
    gf = np.zeros_like(fc)
    for s in range(fc.shape[0]):
        gs = g[s]
        for part in set_partitions(s):
            # d/df_0 through g^(|part|)(f_0)
            term = derivs[len(part) + 1]
            for block in part:
                term = term * fc[block]
            gf[0] += gs * term
            for i, block in enumerate(part):
                term = gs * derivs[len(part)]
                for j, other in enumerate(part):
                    if j != i:
                        term = term * fc[other]
                gf[block] += term
    return (gf,)


def _bwd_add(tape, node, g, grads):
    return (g, g)


def _bwd_scale(tape, node, g, grads):
    return (g * node["k"],)


def _bwd_mul(tape, node, g, grads):
    a, b = (tape.values[i].coeffs for i in node["args"])
    ga = np.zeros(a.shape)
    gb = np.zeros(b.shape)
    for s in range(g.shape[0]):
        for sub in submasks(s):
            ga[sub] += g[s] * b[s ^ sub]
            gb[s ^ sub] += g[s] * a[sub]
    return (ga, gb)


_BACKWARD = {
    "linear": _bwd_linear,
    "activation": _bwd_activation,
    "add": _bwd_add,
    "scale": _bwd_scale,
    "mul": _bwd_mul,
}


def backward(tape: Tape, output_coeff=None, seed=None, output: int = -1) -> dict[str, np.ndarray]:
    """Gradient of an output coefficient with respect to every tape parameter.

    Either ``output_coeff`` (a subset of input indices or a bitmask; the
    coefficient is summed over the batch) or an explicit cotangent ``seed`` of
    the output coefficient shape is given.  Parameters that receive no
    gradient come back as zero arrays.
    """
    if not tape.nodes:
        raise JetError("empty tape")
    out_id = output % len(tape.nodes)
    out_coeffs = tape.values[out_id].coeffs
    if seed is None:
        if output_coeff is None:
            raise JetError("give output_coeff or seed")
        mask = subset_mask(output_coeff)
        if mask < 0 or mask >> tape.d:
            raise JetError(f"coefficient {output_coeff!r} is not in the universe of size {tape.d}")
        seed = np.zeros_like(out_coeffs)
        seed[mask] = 1.0
    else:
        seed = np.asarray(seed, dtype=float)
        if seed.shape != out_coeffs.shape:
            raise JetError(f"seed shape {seed.shape} != output shape {out_coeffs.shape}")

    cot: dict[int, np.ndarray] = {out_id: seed}
    grads: dict[str, np.ndarray] = {}
    for nid in range(out_id, -1, -1):
        g = cot.pop(nid, None)
        node = tape.nodes[nid]
        if g is None or node["op"] == "input":
            continue
        for arg, ga in zip(node["args"], _BACKWARD[node["op"]](tape, node, g, grads)):
            if arg in cot:
                cot[arg] = cot[arg] + ga
            else:
                cot[arg] = ga
    return {name: np.asarray(grads.get(name, np.zeros_like(p)), dtype=float) for name, p in tape.params.items()}
