"""Tabular MDPs, reward specifications and generative-model sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

import numpy as np
from scipy import special, stats

from .measures import CategoricalMeasure, ReturnGrid, from_cdf, make_dirac, mix
from .rng import make_rng

__all__ = [
    "Bernoulli",
    "Dirac",
    "Discrete",
    "MdpParseError",
    "MdpValidationError",
    "Policy",
    "RewardSpec",
    "TabularMdp",
    "TransitionCounts",
    "TruncatedGaussian",
    "discretize_reward",
    "empirical_transition",
    "example1_mdp",
    "load_mdp",
    "random_mdp",
    "sample_transitions",
    "save_mdp",
    "three_state_mdp",
]

ROW_TOL = 1e-12


class MdpValidationError(ValueError):
    """An MDP or policy violates its invariants."""


class MdpParseError(ValueError):
    """An MDP file could not be parsed."""


# -- reward specifications --------------------------------------------------


@dataclass(frozen=True)
class Dirac:
    c: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.c <= 1.0:
            raise MdpValidationError(f"Dirac reward {self.c} outside [0, 1]")

    def mean(self) -> float:
        return float(self.c)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, float(self.c))

    def to_json(self) -> dict:
        return {"type": "dirac", "c": self.c}


@dataclass(frozen=True)
class Bernoulli:
    q: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.q <= 1.0:
            raise MdpValidationError(f"Bernoulli parameter {self.q} outside [0, 1]")

    def mean(self) -> float:
        return float(self.q)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return (rng.random(size) < self.q).astype(np.float64)

    def to_json(self) -> dict:
        return {"type": "bernoulli", "q": self.q}


@dataclass(frozen=True)
class Discrete:
    atoms: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "atoms", tuple(float(a) for a in self.atoms))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.atoms) != len(self.weights) or not self.atoms:
            raise MdpValidationError("discrete reward needs matching, non-empty atoms and weights")
        if any(not 0.0 <= a <= 1.0 for a in self.atoms):
            raise MdpValidationError("discrete reward atoms must lie in [0, 1]")
        if any(w < 0 for w in self.weights) or abs(math.fsum(self.weights) - 1.0) > ROW_TOL:
            raise MdpValidationError("discrete reward weights must be nonnegative and sum to 1")

    def mean(self) -> float:
        return math.fsum(a * w for a, w in zip(self.atoms, self.weights))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(np.array(self.atoms), size=size, p=np.array(self.weights))

    def to_json(self) -> dict:
        return {"type": "discrete", "atoms": list(self.atoms), "weights": list(self.weights)}


@dataclass(frozen=True)
class TruncatedGaussian:
    """Normal(loc, scale) conditioned on ``[0, 1]``."""

    loc: float
    scale: float

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise MdpValidationError(f"scale must be positive, got {self.scale}")

    @property
    def _bounds(self) -> tuple[float, float]:
        return (0.0 - self.loc) / self.scale, (1.0 - self.loc) / self.scale

    def cdf(self, x: np.ndarray) -> np.ndarray:
        a, b = self._bounds
        return stats.truncnorm.cdf(np.clip(x, 0.0, 1.0), a, b, loc=self.loc, scale=self.scale)

    def mean(self) -> float:
        a, b = self._bounds
        return float(stats.truncnorm.mean(a, b, loc=self.loc, scale=self.scale))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        # Inverse CDF, written for the side of [0, 1] nearer the mode so the
        # lower-tail probabilities stay accurate; mirror when loc > 1/2.
        flip = self.loc > 0.5
        loc = 1.0 - self.loc if flip else self.loc
        lo = special.ndtr(-loc / self.scale)
        hi = special.ndtr((1.0 - loc) / self.scale)
        u = rng.random(size)
        x = np.clip(loc + self.scale * special.ndtri(lo + u * (hi - lo)), 0.0, 1.0)
        return 1.0 - x if flip else x

    def to_json(self) -> dict:
        return {"type": "truncated_gaussian", "loc": self.loc, "scale": self.scale}


RewardSpec = Union[Dirac, Bernoulli, Discrete, TruncatedGaussian]


def reward_from_json(obj: Any, where: str = "") -> RewardSpec:
    if not isinstance(obj, dict) or "type" not in obj:
        raise MdpParseError(f"reward {where}: expected an object with a 'type' field")
    kind = obj["type"]
    try:
        if kind == "dirac":
            return Dirac(float(obj["c"]))
        if kind == "bernoulli":
            return Bernoulli(float(obj["q"]))
        if kind == "discrete":
            return Discrete(tuple(obj["atoms"]), tuple(obj["weights"]))
        if kind == "truncated_gaussian":
            return TruncatedGaussian(float(obj["loc"]), float(obj["scale"]))
    except KeyError as exc:
        raise MdpParseError(f"reward {where}: missing field {exc}") from None
    raise MdpParseError(f"reward {where}: unknown reward type {kind!r}")


def discretize_reward(spec: RewardSpec, grid: ReturnGrid) -> CategoricalMeasure:
    """Place a reward distribution on the return grid.

    Point masses are split between bracketing atoms (mean-preserving).  A
    truncated Gaussian gets, at each atom in ``[0, 1]``, its mass over that
    atom's Voronoi cell.  Atoms above the last grid atom are clipped to it,
    which only happens on grids too coarse to reach 1.
    """
    top = float(grid.atoms[-1])
    if isinstance(spec, Dirac):
        return make_dirac(grid, min(spec.c, top))
    if isinstance(spec, Bernoulli):
        return mix([(1.0 - spec.q, make_dirac(grid, 0.0)), (spec.q, make_dirac(grid, min(1.0, top)))])
    if isinstance(spec, Discrete):
        return mix([(w, make_dirac(grid, min(a, top))) for a, w in zip(spec.atoms, spec.weights)])
    if isinstance(spec, TruncatedGaussian):
        max_index = min(grid.K, int(math.floor(1.0 / grid.delta + 1e-9)))
        return from_cdf(grid, spec.cdf, max_index=max_index)
    raise TypeError(f"unsupported reward spec {spec!r}")


# -- MDP and policy ---------------------------------------------------------


def _check_rows(arr: np.ndarray, what: str, index_names: tuple[str, ...]) -> None:
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        bad = np.argwhere(~np.isfinite(arr) | (arr < 0))[0]
        idx = ", ".join(f"{n}={i}" for n, i in zip(index_names, bad[:-1]))
        raise MdpValidationError(f"{what} row ({idx}) has a negative or non-finite entry")
    sums = arr.sum(axis=-1)
    off = np.abs(sums - 1.0) > ROW_TOL
    if np.any(off):
        bad = np.argwhere(off)[0]
        idx = ", ".join(f"{n}={i}" for n, i in zip(index_names, bad))
        raise MdpValidationError(f"{what} row ({idx}) sums to {sums[tuple(bad)]!r}, not 1")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    gamma: float
    transition: np.ndarray
    rewards: tuple[tuple[RewardSpec, ...], ...]

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise MdpValidationError(f"gamma must lie in (0, 1), got {self.gamma}")
        P = np.array(self.transition, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise MdpValidationError(f"transition must have shape (S, A, S), got {P.shape}")
        _check_rows(P, "transition", ("s", "a"))
        rewards = tuple(tuple(row) for row in self.rewards)
        if len(rewards) != P.shape[0] or any(len(row) != P.shape[1] for row in rewards):
            raise MdpValidationError("rewards must be an S x A table")
        P.flags.writeable = False
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def reward_means(self) -> np.ndarray:
        return np.array([[r.mean() for r in row] for row in self.rewards])

    def with_gamma(self, gamma: float) -> "TabularMdp":
        return TabularMdp(gamma, self.transition, self.rewards)

    def with_transition(self, transition: np.ndarray) -> "TabularMdp":
        return TabularMdp(self.gamma, transition, self.rewards)


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise MdpValidationError(f"policy must be an S x A matrix, got shape {p.shape}")
        _check_rows(p, "policy", ("s",))
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))


@dataclass(frozen=True, eq=False)
class TransitionCounts:
    counts: np.ndarray
    n: int

    def __post_init__(self) -> None:
        c = np.asarray(self.counts)
        if np.any(c < 0) or np.any(c.sum(axis=-1) != self.n):
            raise MdpValidationError(f"every (s, a) row of counts must sum to n={self.n}")


def sample_transitions(mdp: TabularMdp, n: int, seed: int) -> TransitionCounts:
    """``n`` generative-model calls per state-action pair, aggregated as counts."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    S, A = mdp.num_states, mdp.num_actions
    counts = np.empty((S, A, S), dtype=np.int64)
    for s in range(S):
        for a in range(A):
            rng = make_rng(seed, s, a)
            counts[s, a] = rng.multinomial(n, mdp.transition[s, a])
    return TransitionCounts(counts, int(n))


def empirical_transition(counts: TransitionCounts) -> np.ndarray:
    return counts.counts / float(counts.n)


# -- constructors -----------------------------------------------------------


def random_mdp(S: int, A: int, gamma: float, seed: int, reward_scale: float = 0.1) -> tuple[TabularMdp, Policy]:
    """Random MDP with flat-Dirichlet transitions and truncated-Gaussian rewards."""
    if S < 1 or A < 1:
        raise ValueError("S and A must be positive")
    rng = make_rng(seed)
    P = rng.dirichlet(np.ones(S), size=(S, A))
    locs = rng.uniform(0.0, 1.0, size=(S, A))
    pi = rng.dirichlet(np.ones(A), size=S)
    # Dirichlet rows can miss 1 by a few ulps.
    P /= P.sum(axis=-1, keepdims=True)
    pi /= pi.sum(axis=-1, keepdims=True)
    rewards = tuple(tuple(TruncatedGaussian(float(locs[s, a]), reward_scale) for a in range(A)) for s in range(S))
    return TabularMdp(gamma, P, rewards), Policy(pi)


def example1_mdp() -> tuple[TabularMdp, Policy]:
    """Single state, single action, Bernoulli(1/2) reward, gamma = 1/2."""
    return TabularMdp(0.5, np.ones((1, 1, 1)), ((Bernoulli(0.5),),)), Policy(np.ones((1, 1)))


def three_state_mdp(gamma: float, p: float = 0.5) -> tuple[TabularMdp, Policy]:
    """s0 -> {s1 w.p. p, s2 w.p. 1-p}; s1 absorbing with reward 1, s2 absorbing with reward 0."""
    P = np.zeros((3, 1, 3))
    P[0, 0, 1], P[0, 0, 2] = p, 1.0 - p
    P[1, 0, 1] = 1.0
    P[2, 0, 2] = 1.0
    rewards = ((Dirac(0.0),), (Dirac(1.0),), (Dirac(0.0),))
    return TabularMdp(gamma, P, rewards), Policy(np.ones((3, 1)))


# -- file format ------------------------------------------------------------


def mdp_to_json(mdp: TabularMdp, policy: Policy | None = None) -> dict:
    out: dict[str, Any] = {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "rewards": [[r.to_json() for r in row] for row in mdp.rewards],
    }
    if policy is not None:
        out["policy"] = policy.probs.tolist()
    return out


def mdp_from_json(obj: Any) -> tuple[TabularMdp, Policy]:
    if not isinstance(obj, dict):
        raise MdpParseError("MDP file must hold a JSON object")
    for key in ("num_states", "num_actions", "gamma", "transition", "rewards"):
        if key not in obj:
            raise MdpParseError(f"missing field {key!r}")
    S, A = int(obj["num_states"]), int(obj["num_actions"])
    try:
        P = np.array(obj["transition"], dtype=np.float64)
    except (TypeError, ValueError):
        raise MdpParseError("transition must be a rectangular numeric array") from None
    if P.shape != (S, A, S):
        raise MdpValidationError(f"transition has shape {P.shape}, expected {(S, A, S)}")
    raw = obj["rewards"]
    if not isinstance(raw, list) or len(raw) != S or any(not isinstance(r, list) or len(r) != A for r in raw):
        raise MdpParseError(f"rewards must be a {S} x {A} nested list")
    rewards = tuple(
        tuple(reward_from_json(raw[s][a], where=f"(s={s}, a={a})") for a in range(A)) for s in range(S)
    )
    gamma = float(obj["gamma"])
    mdp = TabularMdp(gamma, P, rewards)
    if obj.get("policy") is not None:
        policy = Policy(np.array(obj["policy"], dtype=np.float64))
        if policy.probs.shape != (S, A):
            raise MdpValidationError(f"policy has shape {policy.probs.shape}, expected {(S, A)}")
    else:
        policy = Policy.uniform(S, A)
    return mdp, policy


def save_mdp(mdp: TabularMdp, policy: Policy | None, path: Union[str, Path]) -> None:
    # json writes floats with repr, which round-trips doubles exactly.
    Path(path).write_text(json.dumps(mdp_to_json(mdp, policy), indent=1) + "\n", encoding="utf-8")


def load_mdp(path: Union[str, Path]) -> tuple[TabularMdp, Policy]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise MdpParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line.strip()}") from None
    return mdp_from_json(obj)
