"""Categorical measures on a shared return grid and the metrics between them.

All measures live on the lattice ``x_k = k * delta`` with
``delta = 1 / ((K + 1) * (1 - gamma))``, ``k = 0..K``.  Probability measures
(:class:`CategoricalMeasure`) and zero-total signed measures
(:class:`SignedCategorical`) share the same weight layout, so every linear
operation acts on both identically.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Union

import numpy as np
from scipy import sparse
from scipy.ndimage import uniform_filter1d

__all__ = [
    "Cdf",
    "CategoricalMeasure",
    "GridMismatchError",
    "GridRangeError",
    "MassError",
    "NormKind",
    "ReturnGrid",
    "SignedCategorical",
    "cdf",
    "density_estimate",
    "from_cdf",
    "ks",
    "make_dirac",
    "mix",
    "moment",
    "projection_matrix",
    "pushforward_affine",
    "quantile",
    "signed_norm",
    "tv",
    "uniform_advantage",
    "w1",
    "wp",
]

PROB_TOL = 1e-12
SIGNED_TOL = 1e-10
# Accepted drift of an incoming probability vector before renormalization.
_INPUT_MASS_TOL = 1e-8
# Grid-unit positions this close to an integer are treated as on-atom.
_SNAP_TOL = 1e-9


class GridMismatchError(ValueError):
    """Raised when measures on different grids are combined."""


class GridRangeError(ValueError):
    """Raised when a value falls outside ``[x_0, x_K]``."""


class MassError(ValueError):
    """Raised when a weight vector violates its total-mass constraint."""


class NormKind(str, enum.Enum):
    W1 = "W1"
    KS = "KS"
    TV = "TV"

    @classmethod
    def parse(cls, value: Union[str, "NormKind"]) -> "NormKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown norm kind {value!r}; expected W1, KS or TV") from None


@dataclass(frozen=True)
class ReturnGrid:
    """Atom lattice on ``[0, 1/(1-gamma))`` with ``num_atoms = K + 1`` atoms."""

    num_atoms: int
    gamma: float

    def __post_init__(self) -> None:
        if int(self.num_atoms) != self.num_atoms or self.num_atoms < 2:
            raise ValueError(f"num_atoms must be an integer >= 2, got {self.num_atoms}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        object.__setattr__(self, "num_atoms", int(self.num_atoms))
        object.__setattr__(self, "gamma", float(self.gamma))

    @classmethod
    def from_k(cls, K: int, gamma: float) -> "ReturnGrid":
        return cls(K + 1, gamma)

    @property
    def K(self) -> int:
        return self.num_atoms - 1

    @property
    def delta(self) -> float:
        return 1.0 / (self.num_atoms * (1.0 - self.gamma))

    @property
    def upper(self) -> float:
        """The return bound ``1/(1-gamma)``; strictly above the last atom."""
        return 1.0 / (1.0 - self.gamma)

    @cached_property
    def atoms(self) -> np.ndarray:
        x = np.arange(self.num_atoms, dtype=np.float64) * self.delta
        x.flags.writeable = False
        return x

    def nearest_index(self, value: float) -> int:
        return int(np.clip(round(value / self.delta), 0, self.K))


def _frozen(weights: np.ndarray) -> np.ndarray:
    w = np.array(weights, dtype=np.float64, copy=True)
    w.flags.writeable = False
    return w


@dataclass(frozen=True, eq=False)
class CategoricalMeasure:
    """Probability vector on a :class:`ReturnGrid`."""

    grid: ReturnGrid
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.grid.num_atoms,):
            raise ValueError(f"expected {self.grid.num_atoms} weights, got shape {w.shape}")
        if np.any(w < -PROB_TOL):
            raise MassError(f"negative weight {w.min():.3e} in a probability measure")
        w = np.clip(w, 0.0, None)
        total = w.sum()
        if abs(total - 1.0) > _INPUT_MASS_TOL:
            raise MassError(f"probability weights sum to {total!r}, not 1")
        object.__setattr__(self, "weights", _frozen(w / total))

    @property
    def total_mass(self) -> float:
        return 1.0

    def __sub__(self, other: "CategoricalMeasure | SignedCategorical") -> "SignedCategorical":
        _check_grids(self, other)
        return SignedCategorical(self.grid, self.weights - other.weights)


@dataclass(frozen=True, eq=False)
class SignedCategorical:
    """Zero-total signed weight vector on a :class:`ReturnGrid`."""

    grid: ReturnGrid
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.grid.num_atoms,):
            raise ValueError(f"expected {self.grid.num_atoms} weights, got shape {w.shape}")
        total = w.sum()
        if abs(total) > SIGNED_TOL * max(1.0, np.abs(w).sum()):
            raise MassError(f"signed weights must total 0, got {total!r}")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def zeros(cls, grid: ReturnGrid) -> "SignedCategorical":
        return cls(grid, np.zeros(grid.num_atoms))

    @property
    def total_mass(self) -> float:
        return 0.0

    def __add__(self, other: "SignedCategorical") -> "SignedCategorical":
        _check_grids(self, other)
        return SignedCategorical(self.grid, self.weights + other.weights)

    def __sub__(self, other: "SignedCategorical | CategoricalMeasure") -> "SignedCategorical":
        _check_grids(self, other)
        return SignedCategorical(self.grid, self.weights - other.weights)

    def __mul__(self, c: float) -> "SignedCategorical":
        return SignedCategorical(self.grid, self.weights * float(c))

    __rmul__ = __mul__


Measure = Union[CategoricalMeasure, SignedCategorical]


@dataclass(frozen=True, eq=False)
class Cdf:
    grid: ReturnGrid
    cumulative: np.ndarray


def cdf(mu: Measure) -> Cdf:
    return Cdf(mu.grid, _frozen(np.cumsum(mu.weights)))


def _check_grids(*measures: Measure) -> ReturnGrid:
    grid = measures[0].grid
    for m in measures[1:]:
        if m.grid != grid:
            raise GridMismatchError(f"grids differ: {grid} vs {m.grid}")
    return grid


# -- construction -----------------------------------------------------------


def projection_matrix(positions: np.ndarray, num_atoms: int) -> sparse.csr_matrix:
    """Sparse map sending unit mass at grid-unit ``positions[i]`` onto the lattice.

    Column ``i`` splits one unit of mass between ``floor(p)`` and ``floor(p)+1``
    by linear interpolation, so the mean is preserved.  Positions at or above
    ``K`` collapse onto atom ``K``; positions below 0 are not allowed.
    """
    K = num_atoms - 1
    p = np.asarray(positions, dtype=np.float64)
    if np.any(p < -_SNAP_TOL):
        raise GridRangeError("negative position in projection")
    nearest = np.rint(p)
    p = np.where(np.abs(p - nearest) <= _SNAP_TOL, nearest, p)
    p = np.clip(p, 0.0, K)
    lo = np.floor(p).astype(np.int64)
    frac = p - lo
    hi = np.minimum(lo + 1, K)
    cols = np.arange(p.size)
    rows = np.concatenate([lo, hi])
    data = np.concatenate([1.0 - frac, frac])
    cols = np.concatenate([cols, cols])
    keep = data != 0.0
    m = sparse.coo_matrix(
        (data[keep], (rows[keep], cols[keep])), shape=(num_atoms, p.size)
    )
    return m.tocsr()


def make_dirac(grid: ReturnGrid, value: float) -> CategoricalMeasure:
    """Point mass at ``value``, split between the two bracketing atoms."""
    pos = value / grid.delta
    if not (-_SNAP_TOL <= pos <= grid.K + _SNAP_TOL):
        raise GridRangeError(
            f"value {value!r} outside grid range [0, {grid.atoms[-1]!r}]"
        )
    w = projection_matrix(np.array([max(pos, 0.0)]), grid.num_atoms).toarray()[:, 0]
    return CategoricalMeasure(grid, w)


def from_cdf(
    grid: ReturnGrid, F: Callable[[np.ndarray], np.ndarray], max_index: int | None = None
) -> CategoricalMeasure:
    """Discretize a distribution by giving each atom the mass of its Voronoi cell.

    The first cell extends to ``-inf`` and the cell of atom ``max_index``
    (default ``K``) to ``+inf``; atoms above ``max_index`` get nothing.
    """
    top = grid.K if max_index is None else int(max_index)
    edges = (np.arange(top) + 0.5) * grid.delta
    cum = np.concatenate([[0.0], np.asarray(F(edges), dtype=np.float64), [1.0]])
    w = np.zeros(grid.num_atoms)
    w[: top + 1] = np.clip(np.diff(cum), 0.0, None)
    return CategoricalMeasure(grid, w / w.sum())


# -- linear operations ------------------------------------------------------


def pushforward_affine(mu: Measure, r: float) -> Measure:
    """Image of ``mu`` under ``x -> r + gamma * x``, projected back on the grid."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"reward shift must lie in [0, 1], got {r}")
    grid = mu.grid
    pos = r / grid.delta + grid.gamma * np.arange(grid.num_atoms)
    w = projection_matrix(pos, grid.num_atoms) @ mu.weights
    return type(mu)(grid, w)


def mix(terms: Iterable[tuple[float, Measure]]) -> Measure:
    """Real linear combination of measures on a common grid."""
    terms = list(terms)
    if not terms:
        raise ValueError("mix needs at least one term")
    grid = _check_grids(*(m for _, m in terms))
    coeffs = np.array([float(c) for c, _ in terms])
    w = np.zeros(grid.num_atoms)
    for c, m in terms:
        w = w + float(c) * m.weights
    is_prob = all(isinstance(m, CategoricalMeasure) for _, m in terms)
    if is_prob and np.all(coeffs >= 0) and abs(coeffs.sum() - 1.0) <= SIGNED_TOL:
        return CategoricalMeasure(grid, w)
    return SignedCategorical(grid, w)


# -- metrics ----------------------------------------------------------------


def w1(mu: CategoricalMeasure, nu: CategoricalMeasure) -> float:
    grid = _check_grids(mu, nu)
    diff = np.cumsum(mu.weights - nu.weights)[:-1]
    return float(grid.delta * np.abs(diff).sum())


def ks(mu: CategoricalMeasure, nu: CategoricalMeasure) -> float:
    _check_grids(mu, nu)
    return float(np.abs(np.cumsum(mu.weights - nu.weights)).max())


def tv(mu: CategoricalMeasure, nu: CategoricalMeasure) -> float:
    _check_grids(mu, nu)
    return float(0.5 * np.abs(mu.weights - nu.weights).sum())


def wp(mu: CategoricalMeasure, nu: CategoricalMeasure, p: float) -> float:
    """p-Wasserstein distance via the quantile coupling, exact on the grid."""
    grid = _check_grids(mu, nu)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    cm = np.cumsum(mu.weights)
    cn = np.cumsum(nu.weights)
    cm[-1] = cn[-1] = 1.0
    u = np.unique(np.concatenate([[0.0], np.clip(cm, 0, 1), np.clip(cn, 0, 1)]))
    mids = 0.5 * (u[:-1] + u[1:])
    du = np.diff(u)
    qm = grid.atoms[np.minimum(np.searchsorted(cm, mids, side="left"), grid.K)]
    qn = grid.atoms[np.minimum(np.searchsorted(cn, mids, side="left"), grid.K)]
    return float((du * np.abs(qm - qn) ** p).sum() ** (1.0 / p))


def signed_norm(mu: SignedCategorical, kind: NormKind | str) -> float:
    kind = NormKind.parse(kind)
    if abs(mu.weights.sum()) > SIGNED_TOL * max(1.0, np.abs(mu.weights).sum()):
        raise MassError("signed_norm needs a zero-total measure")
    return float(norms_array(mu.weights, mu.grid.delta, kind))


def norms_array(weights: np.ndarray, delta: float, kind: NormKind | str) -> np.ndarray:
    """Vectorized signed norms along the last axis of ``weights``."""
    kind = NormKind.parse(kind)
    if kind is NormKind.TV:
        return np.clip(weights, 0.0, None).sum(axis=-1)
    cum = np.cumsum(weights, axis=-1)
    if kind is NormKind.KS:
        return np.abs(cum).max(axis=-1)
    return delta * np.abs(cum[..., :-1]).sum(axis=-1)


# -- functionals ------------------------------------------------------------


def moment(mu: Measure, r: int) -> float:
    if r < 1:
        raise ValueError("moment order must be a positive integer")
    return float(mu.weights @ mu.grid.atoms**r)


def quantile(mu: CategoricalMeasure, p: float) -> float:
    """Smallest atom whose cumulative mass reaches ``p``."""
    return float(mu.grid.atoms[quantile_index(mu, p)])


def quantile_index(mu: CategoricalMeasure, p: float) -> int:
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    cum = np.cumsum(mu.weights)
    return int(min(np.searchsorted(cum, p - PROB_TOL, side="left"), mu.grid.K))


def survival(weights: np.ndarray) -> np.ndarray:
    """``S[j] = sum_{k >= j} w[k]`` along the last axis."""
    return np.flip(np.cumsum(np.flip(weights, axis=-1), axis=-1), axis=-1)


def uniform_advantage(mu1: CategoricalMeasure, mu2: CategoricalMeasure) -> float:
    """P(G1 >= G2) for independent ``G1 ~ mu1``, ``G2 ~ mu2``; ties count."""
    _check_grids(mu1, mu2)
    return float(mu2.weights @ survival(mu1.weights))


def density_estimate(mu: CategoricalMeasure, window: int) -> np.ndarray:
    """Moving-average density ``w / delta`` with reflecting edges.

    Reflection keeps a constant density constant and preserves total mass.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd positive integer, got {window}")
    if window > mu.grid.num_atoms:
        raise ValueError("window wider than the grid")
    raw = mu.weights / mu.grid.delta
    if window == 1:
        return raw.copy()
    return uniform_filter1d(raw, size=window, mode="reflect")


def random_measure(grid: ReturnGrid, rng: np.random.Generator, concentration: float = 1.0) -> CategoricalMeasure:
    return CategoricalMeasure(grid, rng.dirichlet(np.full(grid.num_atoms, concentration)))

