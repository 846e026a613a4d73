"""Plug-in inference for return distributions.

The limiting law of ``sqrt(n) * (eta_hat - eta)`` is the image under
``(I - T)^{-1}`` of a Gaussian mixture ``G`` of next-state return
distributions.  Everything here works from Monte-Carlo draws of

    D = [(I - T_hat)^{-1} G_hat](state)

computed with the estimated operator ``T_hat``:

* confidence balls take the ``1 - alpha`` quantile of a norm of ``D``;
* delta-method intervals take ``alpha/2`` and ``1 - alpha/2`` quantiles of a
  linear functional of ``D`` (moments, variance, quantiles, uniform advantage).

``G_hat`` is linear in the Gaussian tensor ``Z``, so the default draw path
solves the Neumann series once per coordinate of ``Z`` and forms each draw
as a linear combination.  ``method="direct"`` builds ``G_hat`` and runs the
series per draw instead; both give the same draws up to round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bellman import BellmanOperator, ReturnDistributionVector, SignedVector, neumann_series
from .measures import (
    CategoricalMeasure,
    NormKind,
    density_estimate,
    ks,
    moment,
    norms_array,
    quantile,
    quantile_index,
    survival,
    tv,
    uniform_advantage,
    w1,
)
from .rng import make_rng

__all__ = [
    "ConfidenceBall",
    "DegenerateDensityError",
    "FunctionalCI",
    "GaussianPerturbation",
    "LimitDraws",
    "advantage_ci",
    "ball_contains",
    "build_G",
    "confidence_ball",
    "empirical_quantile",
    "limit_draws",
    "mixed_pushforwards",
    "moment_ci",
    "plug_in_quantile",
    "quantile_ci",
    "sample_Z",
    "variance_ci",
]

DEFAULT_DRAWS = 1000
DEFAULT_TAIL_TOL = 1e-5
DEFAULT_WINDOW = 21

Sampler = Callable[[np.random.Generator, int], np.ndarray]


class DegenerateDensityError(ValueError):
    """The estimated density at a quantile is too small to divide by."""


@dataclass(frozen=True, eq=False)
class GaussianPerturbation:
    Z: np.ndarray  # (S, A, S); each (s, a) row sums to 0


def sample_Z_batch(P_hat: np.ndarray, rng: np.random.Generator, m: int) -> np.ndarray:
    """``m`` draws of Z with Cov(Z[s,a,.]) = diag(p) - p p^T, shape (m, S, A, S).

    ``Z = sqrt(p) * W - p * <sqrt(p), W>`` for standard normal ``W``; rows sum
    to zero identically and entries with ``p = 0`` are exactly zero.
    """
    P = np.asarray(P_hat, dtype=np.float64)
    root = np.sqrt(P)
    W = rng.standard_normal((m, *P.shape))
    proj = (root * W).sum(axis=-1, keepdims=True)
    return root * W - P * proj


def sample_Z(P_hat: np.ndarray, seed: int | np.random.Generator) -> GaussianPerturbation:
    return GaussianPerturbation(sample_Z_batch(P_hat, make_rng(seed), 1)[0])


def mixed_pushforwards(op: BellmanOperator, eta: np.ndarray) -> np.ndarray:
    """``nu[s, a, t] = int (b_{r,gamma})_# eta[t] dR(r | s, a)``, shape (S, A, S, K+1)."""
    S, A = op.num_states, op.num_actions
    out = np.empty((S, A, S, op.grid.num_atoms))
    for s in range(S):
        for a in range(A):
            out[s, a] = op.kernel_apply(s, a, eta)
    return out


def _g_from_z(op: BellmanOperator, nu: np.ndarray, Z: np.ndarray) -> np.ndarray:
    # G[..., s, :] = sum_a pi(a|s) sum_t Z[..., s, a, t] nu[s, a, t, :]
    return np.einsum("sa,...sat,satk->...sk", op.policy.probs, Z, nu)


def build_G(Z: GaussianPerturbation, eta: ReturnDistributionVector, op: BellmanOperator) -> SignedVector:
    if Z.Z.shape != op.transition.shape or eta.num_states != op.num_states:
        raise ValueError("Z, eta and operator shapes disagree")
    nu = mixed_pushforwards(op, eta.weights)
    return SignedVector(op.grid, _g_from_z(op, nu, Z.Z))


@dataclass(frozen=True, eq=False)
class LimitDraws:
    """Monte-Carlo draws of ``D`` at one state, shape (m, K+1)."""

    D: np.ndarray
    center: CategoricalMeasure
    state: int
    depth: int

    @property
    def m(self) -> int:
        return self.D.shape[0]

    def norms(self, kind: NormKind | str) -> np.ndarray:
        return norms_array(self.D, self.center.grid.delta, kind)


def limit_draws(
    op: BellmanOperator,
    eta_hat: ReturnDistributionVector,
    state: int,
    m: int = DEFAULT_DRAWS,
    tail_tol: float = DEFAULT_TAIL_TOL,
    seed: int | np.random.Generator = 0,
    sampler: Sampler | None = None,
    method: str = "basis",
) -> LimitDraws:
    """Draw ``D = [(I - T_hat)^{-1} G_hat](state)`` ``m`` times."""
    if m < 2:
        raise ValueError("need at least two Monte-Carlo draws")
    rng = make_rng(seed)
    Z = sampler(rng, m) if sampler is not None else sample_Z_batch(op.transition, rng, m)
    nu = mixed_pushforwards(op, eta_hat.weights)
    S, n = op.num_states, op.grid.num_atoms
    if method == "direct":
        total, depth = neumann_series(op, _g_from_z(op, nu, Z), tail_tol)
        D = total[:, state, :]
    elif method == "basis":
        # Z rows sum to zero, so Z[s,a,t0] = -sum_{t != t0} Z[s,a,t] and
        # G = sum pi * Z[s,a,t] * (nu[s,a,t] - nu[s,a,t0]) over t != t0: one
        # zero-total basis direction per free coordinate of Z.
        live = np.any(Z != 0, axis=0) & (op.policy.probs[:, :, None] > 0)
        ref = np.argmax(live, axis=-1)
        live[np.arange(S)[:, None], np.arange(op.num_actions)[None, :], ref] = False
        coords = np.argwhere(live)
        if coords.size == 0:
            return LimitDraws(np.zeros((m, n)), eta_hat[state], state, 0)
        basis = np.zeros((len(coords), S, n))
        for i, (s, a, t) in enumerate(coords):
            basis[i, s] = op.policy.probs[s, a] * (nu[s, a, t] - nu[s, a, ref[s, a]])
        response, depth = neumann_series(op, basis, tail_tol)
        coeff = Z[:, coords[:, 0], coords[:, 1], coords[:, 2]]
        D = coeff @ response[:, state, :]
    else:
        raise ValueError(f"unknown method {method!r}")
    return LimitDraws(D, eta_hat[state], state, depth)


def empirical_quantile(values: np.ndarray, p: float) -> float:
    """Order statistic ``ceil(p * m)`` (1-based): the inf-quantile of the sample."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    k = max(1, math.ceil(p * v.size - 1e-9))
    return float(v[k - 1])


def _draws(op, eta_hat, state, m, tail_tol, seed, sampler, draws) -> LimitDraws:
    if draws is not None:
        if draws.state != state:
            raise ValueError("precomputed draws belong to another state")
        return draws
    return limit_draws(op, eta_hat, state, m=m, tail_tol=tail_tol, seed=seed, sampler=sampler)


def plug_in_quantile(
    op: BellmanOperator,
    eta_hat: ReturnDistributionVector,
    state: int,
    kind: NormKind | str,
    p: float,
    m: int = DEFAULT_DRAWS,
    tail_tol: float = DEFAULT_TAIL_TOL,
    seed: int | np.random.Generator = 0,
    sampler: Sampler | None = None,
    draws: LimitDraws | None = None,
) -> float:
    d = _draws(op, eta_hat, state, m, tail_tol, seed, sampler, draws)
    return empirical_quantile(d.norms(kind), p)


# -- confidence balls -------------------------------------------------------

_METRICS = {NormKind.W1: w1, NormKind.KS: ks, NormKind.TV: tv}


@dataclass(frozen=True, eq=False)
class ConfidenceBall:
    center: CategoricalMeasure
    radius: float
    kind: NormKind
    alpha: float
    state: int
    n: int

    def contains(self, candidate: CategoricalMeasure) -> bool:
        return ball_contains(self, candidate)


def confidence_ball(
    op: BellmanOperator,
    eta_hat: ReturnDistributionVector,
    state: int,
    kind: NormKind | str,
    alpha: float,
    n: int,
    m: int = DEFAULT_DRAWS,
    tail_tol: float = DEFAULT_TAIL_TOL,
    seed: int | np.random.Generator = 0,
    draws: LimitDraws | None = None,
) -> ConfidenceBall:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if n < 1:
        raise ValueError("n must be positive")
    kind = NormKind.parse(kind)
    z = plug_in_quantile(op, eta_hat, state, kind, 1.0 - alpha, m, tail_tol, seed, draws=draws)
    return ConfidenceBall(eta_hat[state], z / math.sqrt(n), kind, alpha, state, n)


def ball_contains(ball: ConfidenceBall, candidate: CategoricalMeasure) -> bool:
    return _METRICS[ball.kind](ball.center, candidate) <= ball.radius


# -- delta-method intervals -------------------------------------------------


@dataclass(frozen=True)
class FunctionalCI:
    lower: float
    upper: float
    functional: str
    alpha: float
    estimate: float

    def __post_init__(self) -> None:
        if self.lower > self.upper:
            raise ValueError("lower endpoint above upper endpoint")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _interval(name: str, estimate: float, stats: np.ndarray, alpha: float, n: int) -> FunctionalCI:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    root_n = math.sqrt(n)
    lo = estimate + empirical_quantile(stats, alpha / 2) / root_n
    hi = estimate + empirical_quantile(stats, 1 - alpha / 2) / root_n
    return FunctionalCI(lo, hi, name, alpha, estimate)


def moment_statistics(D: np.ndarray, atoms: np.ndarray, r: int) -> np.ndarray:
    return D @ atoms**r


def variance_statistics(D: np.ndarray, atoms: np.ndarray, center_mean: float) -> np.ndarray:
    return D @ atoms**2 - 2.0 * (D @ atoms) * center_mean


def quantile_statistics(D: np.ndarray, index: int, density: float) -> np.ndarray:
    return -np.cumsum(D, axis=-1)[..., index] / density


def advantage_statistics(D1: np.ndarray, D2: np.ndarray, w1_hat: np.ndarray, w2_hat: np.ndarray) -> np.ndarray:
    """Derivative of ``(mu1, mu2) -> sum_j mu2[j] * S_mu1[j]`` applied to ``(D1, D2)``.

    ``S_mu[j] = mu([x_j, inf))``; the functional is bilinear so this is exact
    to first order.
    """
    return D2 @ survival(w1_hat) + survival(D1) @ w2_hat


def moment_ci(
    op: BellmanOperator,
    eta_hat: ReturnDistributionVector,
    state: int,
    r: int,
    alpha: float,
    n: int,
    m: int = DEFAULT_DRAWS,
    tail_tol: float = DEFAULT_TAIL_TOL,
    seed: int | np.random.Generator = 0,
    sampler: Sampler | None = None,
    draws: LimitDraws | None = None,
) -> FunctionalCI:
    if r < 1:
        raise ValueError("moment order must be >= 1")
    d = _draws(op, eta_hat, state, m, tail_tol, seed, sampler, draws)
    stats = moment_statistics(d.D, op.grid.atoms, r)
    return _interval(f"moment{r}", moment(d.center, r), stats, alpha, n)


def variance_ci(
    op: BellmanOperator,
    eta_hat: ReturnDistributionVector,
    state: int,
    alpha: float,
    n: int,
    m: int = DEFAULT_DRAWS,
    tail_tol: float = DEFAULT_TAIL_TOL,
    seed: int | np.random.Generator = 0,
    sampler: Sampler | None = None,
    draws: LimitDraws | None = None,
) -> FunctionalCI:
    d = _draws(op, eta_hat, state, m, tail_tol, seed, sampler, draws)
    mean = moment(d.center, 1)
    estimate = moment(d.center, 2) - mean**2
    stats = variance_statistics(d.D, op.grid.atoms, mean)
    return _interval("variance", estimate, stats, alpha, n)


def quantile_ci(
    op: BellmanOperator,
    eta_hat: ReturnDistributionVector,
    state: int,
    p: float,
    alpha: float,
    n: int,
    m: int = DEFAULT_DRAWS,
    window: int = DEFAULT_WINDOW,
    tail_tol: float = DEFAULT_TAIL_TOL,
    seed: int | np.random.Generator = 0,
    sampler: Sampler | None = None,
    draws: LimitDraws | None = None,
) -> FunctionalCI:
    center = eta_hat[state]
    idx = quantile_index(center, p)
    g = float(density_estimate(center, window)[idx])
    floor = 1e-6 / op.grid.delta
    if g < floor:
        raise DegenerateDensityError(f"density {g:.3e} at the {p}-quantile is below {floor:.3e}")
    d = _draws(op, eta_hat, state, m, tail_tol, seed, sampler, draws)
    stats = quantile_statistics(d.D, idx, g)
    return _interval(f"quantile{p:g}", quantile(center, p), stats, alpha, n)


def advantage_ci(
    op1: BellmanOperator,
    eta1_hat: ReturnDistributionVector,
    op2: BellmanOperator,
    eta2_hat: ReturnDistributionVector,
    state: int,
    alpha: float,
    n: int,
    m: int = DEFAULT_DRAWS,
    tail_tol: float = DEFAULT_TAIL_TOL,
    seed: int = 0,
    draws: tuple[LimitDraws, LimitDraws] | None = None,
) -> FunctionalCI:
    """Interval for P(G1 >= G2) from two independently estimated models."""
    if op1.grid != op2.grid:
        raise ValueError("both policies must share one grid")
    if draws is None:
        d1 = limit_draws(op1, eta1_hat, state, m, tail_tol, make_rng(seed, 1))
        d2 = limit_draws(op2, eta2_hat, state, m, tail_tol, make_rng(seed, 2))
    else:
        d1, d2 = draws
    mu1, mu2 = eta1_hat[state], eta2_hat[state]
    stats = advantage_statistics(d1.D, d2.D, mu1.weights, mu2.weights)
    return _interval("advantage", uniform_advantage(mu1, mu2), stats, alpha, n)
