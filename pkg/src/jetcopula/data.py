"""Datasets: CSV ingest, min-max normalization, train/test split, synthetic
generators and their numerical ground truth (marginal CDFs and the copula).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.interpolate import RegularGridInterpolator


class DataError(ValueError):
    pass


# datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    columns: list[str]
    values: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, float))
        if self.values.shape[1] != len(self.columns):
            raise DataError(f"{len(self.columns)} column names for {self.values.shape[1]} columns")

    def __len__(self):
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def normalized(self) -> np.ndarray:
        if self.lower is None:
            raise DataError("dataset has not been normalized")
        return np.clip((self.values - self.lower) / (self.upper - self.lower), 0.0, 1.0)

    @property
    def train(self) -> np.ndarray:
        return self.normalized[self.train_idx]

    @property
    def test(self) -> np.ndarray:
        return self.normalized[self.test_idx]

    def denormalize(self, x) -> np.ndarray:
        return self.lower + np.asarray(x, float) * (self.upper - self.lower)


def load_csv(path, columns=None) -> Dataset:
    """Read a header-row, comma-separated numeric file.

    ``columns`` selects and orders columns by name; default is every column.
    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        wanted = list(columns) if columns else header
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; file has {header}")
        idx = [header.index(c) for c in wanted]
        rows = []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {rownum} has {len(row)} cells, header has {len(header)}")
            vals = []
            for j in idx:
                cell = row[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {rownum}, column {j + 1} ({header[j]!r}): "
                                    f"not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {rownum}, column {j + 1} ({header[j]!r}): non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(wanted, np.array(rows))


def write_csv(path, columns, values):
    values = np.atleast_2d(np.asarray(values, float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def normalize_split(dataset: Dataset, train_frac: float = 2 / 3, seed: int = 0, bounds=None) -> Dataset:
    """Min-max bounds over all rows, then a seeded shuffle and a floor split."""
    values = dataset.values
    if bounds is None:
        lower, upper = values.min(axis=0), values.max(axis=0)
    else:
        lower, upper = (np.asarray(b, float) for b in bounds)
    const = [c for c, lo, hi in zip(dataset.columns, lower, upper) if not hi > lo]
    if const:
        raise DataError(f"constant column(s) {const}: min == max")
    n = len(values)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(train_frac * n + 1e-9))
    return Dataset(list(dataset.columns), values.copy(), np.asarray(lower, float), np.asarray(upper, float),
                   np.sort(perm[:n_train]), np.sort(perm[n_train:]))


# synthetic densities -----------------------------------------------------

@dataclass
class SyntheticSpec:
    """A known density on a box.

    ``eq35``: [sin(x + k y) + 1] / a on [0,3]x[0,2].
    ``eq36``: [sin(x + k y + l z) + 1] / a on [0,3]x[0,2]x[0,z_max].
    ``bimodal``: equal mixture of two isotropic Gaussians truncated to the unit square.
    The normalization ``a`` is always recomputed by Simpson quadrature.
    """

    formula: str
    box: tuple[tuple[float, float], ...]
    k: float = 0.0
    l: float = 0.0
    centers: tuple[tuple[float, ...], ...] = ()
    sd: float = 0.0
    reference_a: float | None = None
    resolution: int = 0
    a: float = field(init=False)

    def __post_init__(self):
        if self.formula not in ("eq35", "eq36", "bimodal"):
            raise DataError(f"unknown formula {self.formula!r}")
        self.box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        if any(not hi > lo for lo, hi in self.box):
            raise DataError(f"degenerate box {self.box}")
        if self.formula == "bimodal" and (not self.centers or self.sd <= 0):
            raise DataError("bimodal spec needs centers and sd > 0")
        if not self.resolution:
            self.resolution = 2001 if self.d <= 2 else 241
        self.a = simpson_box_integral(self.unnormalized, self.box, self.resolution)
        if not self.a > 0:
            raise DataError("density integrates to a non-positive value")

    @property
    def d(self) -> int:
        return len(self.box)

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.box]))

    def unnormalized(self, *coords):
        if self.formula == "eq35":
            x, y = coords
            return np.sin(x + self.k * y) + 1.0
        if self.formula == "eq36":
            x, y, z = coords
            return np.sin(x + self.k * y + self.l * z) + 1.0
        out = 0.0
        for c in self.centers:
            r2 = sum((q - ci) ** 2 for q, ci in zip(coords, c))
            out = out + np.exp(-0.5 * r2 / self.sd ** 2)
        return out

    def density(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, float))
        inside = np.all([(points[:, j] >= lo) & (points[:, j] <= hi) for j, (lo, hi) in enumerate(self.box)], axis=0)
        vals = self.unnormalized(*points.T) / self.a
        return np.where(inside, vals, 0.0)

    @cached_property
    def envelope(self) -> float:
        """Upper bound on the normalized density over the box."""
        if self.formula in ("eq35", "eq36"):
            return 2.0 / self.a
        # each Gaussian bump peaks at 1
        return len(self.centers) / self.a

    def to_dict(self) -> dict:
        return {"formula": self.formula, "box": [list(b) for b in self.box], "k": self.k, "l": self.l,
                "centers": [list(c) for c in self.centers], "sd": self.sd, "a": self.a,
                "reference_a": self.reference_a, "resolution": self.resolution}

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        try:
            return cls(doc["formula"], tuple(map(tuple, doc["box"])), k=doc.get("k", 0.0), l=doc.get("l", 0.0),
                       centers=tuple(map(tuple, doc.get("centers", ()))), sd=doc.get("sd", 0.0),
                       reference_a=doc.get("reference_a"), resolution=doc.get("resolution", 0))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed synthetic spec: {exc}") from None


def eq35_spec(k: float = 5.0) -> SyntheticSpec:
    return SyntheticSpec("eq35", ((0.0, 3.0), (0.0, 2.0)), k=k, reference_a=5.835386372)


def eq36_spec(k: float = 2.0, l: float = 3.0, z_max: float = 1.0) -> SyntheticSpec:
    # 4.843 is the constant for z in [0, 1]; kept as a cross-check only
    return SyntheticSpec("eq36", ((0.0, 3.0), (0.0, 2.0), (0.0, z_max)), k=k, l=l, reference_a=4.843)


def bimodal_spec(centers=((0.3, 0.3), (0.7, 0.7)), sd: float = 0.08) -> SyntheticSpec:
    return SyntheticSpec("bimodal", ((0.0, 1.0), (0.0, 1.0)), centers=tuple(map(tuple, centers)), sd=sd)


def make_spec(formula: str, **kw) -> SyntheticSpec:
    if formula == "eq35":
        return eq35_spec(**kw)
    if formula == "eq36":
        return eq36_spec(**kw)
    if formula == "bimodal":
        return bimodal_spec(**kw)
    raise DataError(f"unknown formula {formula!r}")


def _axes(box, resolution):
    if resolution < 3:
        raise DataError(f"resolution must be >= 3 per axis, got {resolution}")
    if resolution % 2 == 0:
        resolution += 1
    return [np.linspace(lo, hi, resolution) for lo, hi in box]


def simpson_box_integral(func, box, resolution: int = 2001) -> float:
    """Composite Simpson integral of ``func(*coords)`` over an axis-aligned box."""
    axes = _axes(box, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    vals = func(*mesh)
    for ax in reversed(axes):
        vals = simpson(vals, x=ax, axis=-1)
    return float(vals)


def sample_synthetic(spec: SyntheticSpec, n: int, seed: int = 0, batch: int = 8192,
                     stats: dict | None = None) -> np.ndarray:
    """Exactly ``n`` points by rejection sampling under a flat envelope on the box."""
    if n < 0:
        raise DataError("n must be >= 0")
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in spec.box])
    hi = np.array([b[1] for b in spec.box])
    out, proposed = [], 0
    have = 0
    while have < n:
        pts = lo + (hi - lo) * rng.random((batch, spec.d))
        accept = rng.random(batch) * spec.envelope < spec.density(pts)
        proposed += batch
        out.append(pts[accept])
        have += int(accept.sum())
    if stats is not None:
        stats["proposed"] = proposed
        stats["accepted"] = have
        stats["rate"] = have / proposed if proposed else float("nan")
    return np.concatenate(out)[:n] if out else np.zeros((0, spec.d))


# ground truth ------------------------------------------------------------

class OracleTables:
    """Numerical marginals and copula of a :class:`SyntheticSpec`.

    The joint CDF is tabulated by cumulative Simpson along every axis and
    rescaled so the table ends at exactly 1; marginal CDFs are its edges, so
    the boundary conditions of the induced copula hold to rounding.
    """

    def __init__(self, spec: SyntheticSpec, grid_resolution: int | None = None):
        self.spec = spec
        res = grid_resolution or spec.resolution
        self.axes = _axes(spec.box, res)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pdf = spec.unnormalized(*mesh) / spec.a
        cdf = pdf
        for j, ax in enumerate(self.axes):
            cdf = cumulative_simpson(cdf, x=ax, axis=j, initial=0.0)
        total = cdf[(-1,) * spec.d]
        self.cdf_table = cdf / total
        self.marginal_cdf_tables = []
        self.marginal_pdf_tables = []
        for j in range(spec.d):
            edge = tuple(slice(None) if i == j else -1 for i in range(spec.d))
            Fj = np.maximum.accumulate(self.cdf_table[edge])
            self.marginal_cdf_tables.append(Fj)
            others = pdf
            for i in reversed(range(spec.d)):
                if i != j:
                    others = simpson(others, x=self.axes[i], axis=i)
            self.marginal_pdf_tables.append(others / total)
        self._cdf = RegularGridInterpolator(self.axes, self.cdf_table, method="linear")

    @property
    def d(self) -> int:
        return self.spec.d

    def marginal_cdf(self, j: int, x):
        return np.interp(x, self.axes[j], self.marginal_cdf_tables[j])

    def marginal_pdf(self, j: int, x):
        return np.interp(x, self.axes[j], self.marginal_pdf_tables[j])

    def marginal_inverse(self, j: int, u):
        """Quantile of marginal ``j`` by bisection on the tabulated CDF, linear inside a cell."""
        u = np.asarray(u, float)
        F = self.marginal_cdf_tables[j]
        ax = self.axes[j]
        # right-most node with F <= u keeps ties (flat CDF stretches) well defined
        i = np.clip(np.searchsorted(F, u, side="right") - 1, 0, len(F) - 2)
        F0, F1 = F[i], F[i + 1]
        w = np.where(F1 > F0, (u - F0) / np.where(F1 > F0, F1 - F0, 1.0), 0.0)
        return np.clip(ax[i] + np.clip(w, 0.0, 1.0) * (ax[i + 1] - ax[i]), ax[0], ax[-1])

    def joint_cdf(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        lo = [a[0] for a in self.axes]
        hi = [a[-1] for a in self.axes]
        return self._cdf(np.clip(x, lo, hi))

    def joint_pdf(self, x):
        return self.spec.density(x)

    def _to_x(self, u):
        u = np.atleast_2d(np.asarray(u, float))
        return np.stack([self.marginal_inverse(j, u[:, j]) for j in range(self.d)], axis=1)

    def copula(self, u):
        """C(u) = F(F_1^-1(u_1), ..., F_d^-1(u_d)); exact zeros on lower faces."""
        u = np.atleast_2d(np.asarray(u, float))
        out = self.joint_cdf(self._to_x(u))
        return np.where(np.any(u <= 0.0, axis=1), 0.0, out)

    def copula_density(self, u):
        x = self._to_x(u)
        denom = np.prod([self.marginal_pdf(j, x[:, j]) for j in range(self.d)], axis=0)
        return self.spec.density(x) / denom

    # views in min-max normalized coordinates of the box
    def _from_unit(self, t):
        t = np.atleast_2d(np.asarray(t, float))
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        return lo + t * (hi - lo)

    def marginal_cdf_unit(self, j: int, t):
        lo, hi = self.axes[j][0], self.axes[j][-1]
        return self.marginal_cdf(j, lo + np.asarray(t, float) * (hi - lo))

    def joint_pdf_unit(self, t):
        return self.spec.density(self._from_unit(t)) * self.spec.volume

    def joint_cdf_unit(self, t):
        return self.joint_cdf(self._from_unit(t))


def true_marginals_and_copula(spec: SyntheticSpec, grid_resolution: int | None = None) -> OracleTables:
    return OracleTables(spec, grid_resolution)


def unit_lattice(resolution: int, d: int) -> np.ndarray:
    """Nodes of a ``resolution**d`` lattice on [0, 1]^d including the faces."""
    axis = np.linspace(0.0, 1.0, resolution)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def oracle_grid(oracle: OracleTables, resolution: int = 51) -> dict:
    """Copula and copula density tabulated on the unit lattice."""
    u = unit_lattice(resolution, oracle.d)
    return {"u": u, "C": oracle.copula(u), "c": oracle.copula_density(u), "resolution": resolution}
