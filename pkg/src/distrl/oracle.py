"""Independent ground truth by trajectory simulation.

Rollouts share nothing with the Bellman code path except the grid projection
used to compare the two: trajectories are sampled step by step from the
MDP, truncated at horizon ``H``, and their discounted returns are projected
onto the return grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bellman import BellmanOperator, ddp
from .measures import CategoricalMeasure, ReturnGrid, ks, projection_matrix, w1
from .mdp import Policy, TabularMdp
from .rng import make_rng

__all__ = [
    "DiscrepancyError",
    "RolloutConfig",
    "RolloutReport",
    "default_horizon",
    "rollout_returns",
    "rollout_samples",
    "rollout_vs_ddp",
]


def default_horizon(grid: ReturnGrid) -> int:
    """Smallest ``H`` with ``gamma^H / (1 - gamma) <= delta``."""
    g = grid.gamma
    return max(1, math.ceil(math.log(grid.delta * (1.0 - g)) / math.log(g)))


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int
    num_trajectories: int
    seed: int = 0
    gamma: float | None = None  # discount used by the simulator; None means the MDP's

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.num_trajectories < 1:
            raise ValueError("horizon and num_trajectories must be positive")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma override must lie in (0, 1)")

    def tail_bound(self, gamma: float) -> float:
        """Largest possible return mass beyond the horizon, ``gamma^H / (1 - gamma)``."""
        return gamma**self.horizon / (1.0 - gamma)


def _inverse_cdf(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.count_nonzero(u[:, None] >= cum, axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def rollout_samples(mdp: TabularMdp, policy: Policy, s0: int, config: RolloutConfig) -> np.ndarray:
    """Truncated discounted returns ``sum_{t<H} gamma^t R_t`` of independent trajectories from ``s0``."""
    S, A = mdp.num_states, mdp.num_actions
    if not 0 <= s0 < S:
        raise IndexError(f"state {s0} out of range for {S} states")
    gamma = mdp.gamma if config.gamma is None else config.gamma
    rng = make_rng(config.seed)
    N = config.num_trajectories
    pi_cum = np.cumsum(policy.probs, axis=-1)
    P_cum = np.cumsum(mdp.transition, axis=-1)
    states = np.full(N, s0, dtype=np.int64)
    returns = np.zeros(N)
    rewards = np.empty(N)
    discount = 1.0
    for _ in range(config.horizon):
        actions = _inverse_cdf(pi_cum[states], rng.random(N))
        pair = states * A + actions
        for key in np.flatnonzero(np.bincount(pair, minlength=S * A)):
            chunk = np.flatnonzero(pair == key)
            s, a = divmod(int(key), A)
            rewards[chunk] = mdp.rewards[s][a].sample(rng, chunk.size)
        returns += discount * rewards
        discount *= gamma
        states = _inverse_cdf(P_cum[states, actions], rng.random(N))
    return returns


def rollout_returns(
    mdp: TabularMdp,
    policy: Policy,
    s0: int,
    config: RolloutConfig,
    grid: ReturnGrid | None = None,
) -> CategoricalMeasure:
    """Empirical law of truncated returns, projected onto ``grid`` (default K=1000)."""
    grid = grid or ReturnGrid.from_k(1000, mdp.gamma)
    g = rollout_samples(mdp, policy, s0, config)
    proj = projection_matrix(g / grid.delta, grid.num_atoms)
    weights = np.asarray(proj.sum(axis=1)).ravel() / g.size
    return CategoricalMeasure(grid, weights)


@dataclass(frozen=True, eq=False)
class RolloutReport:
    w1: float
    ks: float
    mc_term: float
    truncation: float
    ddp_term: float
    discretization: float
    rollout: CategoricalMeasure
    ddp: CategoricalMeasure

    @property
    def budget(self) -> float:
        return self.mc_term + self.truncation + self.ddp_term + self.discretization

    @property
    def within_budget(self) -> bool:
        return self.w1 <= self.budget

    def to_json(self) -> dict:
        return {
            "w1": self.w1,
            "ks": self.ks,
            "budget": self.budget,
            "mc_term": self.mc_term,
            "truncation": self.truncation,
            "ddp_term": self.ddp_term,
            "discretization": self.discretization,
            "grid": {"num_atoms": self.rollout.grid.num_atoms, "gamma": self.rollout.grid.gamma},
            "rollout_weights": self.rollout.weights.tolist(),
            "ddp_weights": self.ddp.weights.tolist(),
        }


class DiscrepancyError(RuntimeError):
    """Rollout and DDP disagree by more than the analytic budget."""

    def __init__(self, report: RolloutReport) -> None:
        super().__init__(f"rollout vs DDP: w1={report.w1:.4g} exceeds budget {report.budget:.4g}")
        self.report = report


def rollout_vs_ddp(
    mdp: TabularMdp,
    policy: Policy,
    state: int,
    config: RolloutConfig,
    ddp_tol: float = 1e-8,
    grid: ReturnGrid | None = None,
    raise_on_violation: bool = True,
) -> RolloutReport:
    """Compare a rollout estimate with the DDP fixed point at ``state``.

    Budget: ``3 * delta * sum_k sqrt(F_k (1 - F_k) / N)`` (Monte Carlo, three
    pointwise standard errors of the CDF), ``gamma^H / (1 - gamma)``
    (truncation), ``tol * gamma / (1 - gamma)`` (DDP stopping) and ``4 * delta``
    (grid).
    """
    grid = grid or ReturnGrid.from_k(1000, mdp.gamma)
    op = BellmanOperator.from_mdp(mdp, policy, grid)
    eta, _ = ddp(op, tol=ddp_tol)
    target = eta[state]
    roll = rollout_returns(mdp, policy, state, config, grid)
    F = np.clip(np.cumsum(roll.weights), 0.0, 1.0)
    mc = 3.0 * grid.delta * float(np.sqrt(F * (1.0 - F) / config.num_trajectories).sum())
    g = mdp.gamma
    report = RolloutReport(
        w1=w1(roll, target),
        ks=ks(roll, target),
        mc_term=mc,
        truncation=config.tail_bound(g),
        ddp_term=ddp_tol * g / (1.0 - g),
        discretization=4.0 * grid.delta,
        rollout=roll,
        ddp=target,
    )
    if raise_on_violation and not report.within_budget:
        raise DiscrepancyError(report)
    return report
