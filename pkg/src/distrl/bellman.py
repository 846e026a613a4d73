"""Categorical distributional Bellman operator, DDP and the Neumann inverse.

The operator acts linearly on per-state weight arrays of shape
``(..., S, K + 1)``; leading axes are batch axes.  For each state-action pair
it precomputes one sparse kernel ``M[s, a]`` that maps a next-state
distribution to ``sum_j R[s, a, j] * pushforward(eta, x_j)`` (reward mixture
of projected affine images).  Applying the operator is then

    out[s] = sum_a pi(a|s) * M[s, a] @ (sum_t P[s, a, t] * eta[t]).

Batches of four or more arrays take an FFT route instead (scale projection
followed by reward convolution), which agrees with the sparse kernels to
round-off and is several times cheaper per vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import fft as sfft
from scipy import sparse

from .mdp import Policy, TabularMdp, discretize_reward
from .measures import (
    CategoricalMeasure,
    GridMismatchError,
    MassError,
    ReturnGrid,
    SignedCategorical,
    make_dirac,
    norms_array,
    projection_matrix,
)

__all__ = [
    "BellmanOperator",
    "DdpTrace",
    "NumericFailure",
    "ReturnDistributionVector",
    "SignedVector",
    "apply",
    "classical_value",
    "ddp",
    "exact_inverse_apply",
    "neumann_depth",
    "neumann_inverse",
    "operator_matrix",
    "sup_w1",
]

MATRIX_SIZE_CAP = 5000
FFT_MIN_BATCH = 4  # below this the sparse product is faster
_TINY = 1e-300


class NumericFailure(RuntimeError):
    """A dense solve did not meet its residual bound."""


# -- state-indexed vectors --------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReturnDistributionVector:
    """One probability vector per state on a shared grid."""

    grid: ReturnGrid
    weights: np.ndarray  # (S, K+1)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != self.grid.num_atoms:
            raise ValueError(f"expected shape (S, {self.grid.num_atoms}), got {w.shape}")
        if np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-8):
            raise MassError("each state needs a probability vector")
        w = np.clip(w, 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_measures(cls, measures: list[CategoricalMeasure]) -> "ReturnDistributionVector":
        grid = measures[0].grid
        if any(m.grid != grid for m in measures):
            raise GridMismatchError("all states must share one grid")
        return cls(grid, np.stack([m.weights for m in measures]))

    @classmethod
    def dirac(cls, grid: ReturnGrid, num_states: int, value: float = 0.0) -> "ReturnDistributionVector":
        w = make_dirac(grid, value).weights
        return cls(grid, np.tile(w, (num_states, 1)))

    @property
    def num_states(self) -> int:
        return self.weights.shape[0]

    def __len__(self) -> int:
        return self.num_states

    def __getitem__(self, s: int) -> CategoricalMeasure:
        return CategoricalMeasure(self.grid, self.weights[s])

    def __sub__(self, other: "ReturnDistributionVector") -> "SignedVector":
        if other.grid != self.grid:
            raise GridMismatchError("grids differ")
        return SignedVector(self.grid, self.weights - other.weights)


@dataclass(frozen=True, eq=False)
class SignedVector:
    """One zero-total signed weight vector per state."""

    grid: ReturnGrid
    weights: np.ndarray  # (S, K+1)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != self.grid.num_atoms:
            raise ValueError(f"expected shape (S, {self.grid.num_atoms}), got {w.shape}")
        scale = np.maximum(1.0, np.abs(w).sum(axis=1))
        if np.any(np.abs(w.sum(axis=1)) > 1e-10 * scale):
            raise MassError("each state needs a zero-total signed vector")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, grid: ReturnGrid, num_states: int) -> "SignedVector":
        return cls(grid, np.zeros((num_states, grid.num_atoms)))

    @property
    def num_states(self) -> int:
        return self.weights.shape[0]

    def __len__(self) -> int:
        return self.num_states

    def __getitem__(self, s: int) -> SignedCategorical:
        return SignedCategorical(self.grid, self.weights[s])

    def __add__(self, other: "SignedVector") -> "SignedVector":
        return SignedVector(self.grid, self.weights + other.weights)

    def __sub__(self, other: "SignedVector") -> "SignedVector":
        return SignedVector(self.grid, self.weights - other.weights)

    def __mul__(self, c: float) -> "SignedVector":
        return SignedVector(self.grid, self.weights * float(c))

    __rmul__ = __mul__


StateVector = Union[ReturnDistributionVector, SignedVector]


def sup_w1(a: np.ndarray, b: np.ndarray, delta: float) -> float:
    """``max_s W1(a[s], b[s])`` for weight arrays of shape (S, K+1)."""
    return float(norms_array(a - b, delta, "W1").max())


# -- operator ---------------------------------------------------------------


def _reward_kernel(reward_weights: np.ndarray, scale: sparse.csr_matrix) -> sparse.csr_matrix:
    """``sum_j r[j] * shift_j`` with overflow collapsed onto atom K, composed with ``scale``."""
    n = reward_weights.size
    K = n - 1
    support = np.flatnonzero(reward_weights)
    i = np.arange(n)
    rows = np.minimum(i[None, :] + support[:, None], K).ravel()
    cols = np.broadcast_to(i, (support.size, n)).ravel()
    data = np.repeat(reward_weights[support], n)
    shift = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    return (shift @ scale).tocsr()


class BellmanOperator:
    """Categorical distributional Bellman operator for a fixed policy.

    The same class serves as the true operator (pass the MDP's transition
    tensor) and as the empirical one (pass an estimate ``P_hat``).
    """

    def __init__(
        self,
        transition: np.ndarray,
        policy: Policy,
        reward_weights: np.ndarray,
        grid: ReturnGrid,
    ) -> None:
        P = np.asarray(transition, dtype=np.float64)
        R = np.asarray(reward_weights, dtype=np.float64)
        S, A = P.shape[:2]
        if P.shape != (S, A, S) or policy.probs.shape != (S, A):
            raise ValueError("transition, policy and rewards have inconsistent shapes")
        if R.shape != (S, A, grid.num_atoms):
            raise GridMismatchError(f"reward weights have shape {R.shape}, expected {(S, A, grid.num_atoms)}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=-1) - 1.0) > 1e-12):
            raise ValueError("transition rows must be probability vectors")
        self.grid = grid
        self.transition = P
        self.policy = policy
        self.reward_weights = R
        self.num_states = S
        self.num_actions = A
        scale = projection_matrix(grid.gamma * np.arange(grid.num_atoms), grid.num_atoms)
        self._kernels = {(s, a): _reward_kernel(R[s, a], scale) for s in range(S) for a in range(A)}
        self._pairs = [
            (s, a, float(policy.probs[s, a]), self._kernels[s, a])
            for s in range(S)
            for a in range(A)
            if policy.probs[s, a] > 0
        ]
        # One block-sparse matrix mapping stacked (s, a) mixtures to states.
        blocks = [[None] * (S * A) for _ in range(S)]
        for s, a, prob, kernel in self._pairs:
            blocks[s][s * A + a] = prob * kernel
        for s in range(S):
            if all(b is None for b in blocks[s]):
                blocks[s][0] = sparse.csr_matrix((grid.num_atoms, grid.num_atoms))
        self._stacked = sparse.bmat(blocks, format="csr")
        # Batched path: gamma-scale projection, then reward convolution by FFT.
        self._scale = scale
        reach = np.flatnonzero(R.reshape(-1, grid.num_atoms).any(axis=0))
        self._fft_len = sfft.next_fast_len(grid.num_atoms + int(reach.max(initial=0)), real=True)
        self._reward_fft = sfft.rfft(R, self._fft_len, axis=-1)

    @classmethod
    def from_mdp(
        cls,
        mdp: TabularMdp,
        policy: Policy,
        grid: ReturnGrid,
        transition: np.ndarray | None = None,
    ) -> "BellmanOperator":
        if abs(grid.gamma - mdp.gamma) > 0:
            raise GridMismatchError(f"grid gamma {grid.gamma} differs from MDP gamma {mdp.gamma}")
        R = np.array([[discretize_reward(r, grid).weights for r in row] for row in mdp.rewards])
        P = mdp.transition if transition is None else transition
        return cls(P, policy, R, grid)

    def with_transition(self, transition: np.ndarray) -> "BellmanOperator":
        """Same policy, rewards and grid with another transition tensor (kernels are reused)."""
        other = object.__new__(BellmanOperator)
        other.__dict__.update(self.__dict__)
        P = np.asarray(transition, dtype=np.float64)
        if P.shape != self.transition.shape or np.any(np.abs(P.sum(axis=-1) - 1.0) > 1e-12):
            raise ValueError("transition rows must be probability vectors of the same shape")
        other.transition = P
        return other

    @property
    def gamma(self) -> float:
        return self.grid.gamma

    def policy_transition(self) -> np.ndarray:
        """``P_pi[s, t] = sum_a pi(a|s) P(t|s, a)``."""
        return np.einsum("sa,sat->st", self.policy.probs, self.transition)

    def mix_next_states(self, arr: np.ndarray) -> np.ndarray:
        """``Q[..., s, a, :] = sum_t P[s, a, t] * arr[..., t, :]``."""
        return np.einsum("sat,...tk->...sak", self.transition, arr)

    def kernel_apply(self, s: int, a: int, arr: np.ndarray) -> np.ndarray:
        """Reward-mixed pushforward ``M[s, a]`` along the last axis of ``arr``."""
        flat = arr.reshape(-1, arr.shape[-1])
        return (self._kernels[s, a] @ flat.T).T.reshape(arr.shape)

    def apply_array(self, arr: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.float64)
        S, n = self.num_states, self.grid.num_atoms
        if arr.shape[-2:] != (S, n):
            raise GridMismatchError(f"expected trailing shape {(S, n)}, got {arr.shape[-2:]}")
        batch = arr.shape[:-2]
        B = int(np.prod(batch, dtype=np.int64))
        if B >= FFT_MIN_BATCH:
            return self._apply_fft(arr.reshape(B, S, n)).reshape(*batch, S, n)
        # Batch-last layout keeps the sparse product on contiguous rows.
        cols = np.moveaxis(arr.reshape(B, S, n), 0, -1).reshape(S, n * B)
        mixed = (self.transition.reshape(S * self.num_actions, S) @ cols).reshape(-1, B)
        out = (self._stacked @ mixed).reshape(S, n, B)
        return np.moveaxis(out, -1, 0).reshape(*batch, S, n)

    def _apply_fft(self, arr: np.ndarray) -> np.ndarray:
        B, S, n = arr.shape
        A = self.num_actions
        mixed = np.einsum("sat,btk->bsak", self.transition, arr).reshape(-1, n)
        scaled = (self._scale @ mixed.T).T.reshape(B, S, A, n)
        spec = sfft.rfft(scaled, self._fft_len, axis=-1)
        spec = np.einsum("sa,bsak,sak->bsk", self.policy.probs, spec, self._reward_fft)
        full = sfft.irfft(spec, self._fft_len, axis=-1)
        out = full[..., :n].copy()
        out[..., -1] += full[..., n:].sum(axis=-1)
        return out

    def __call__(self, eta: StateVector) -> StateVector:
        return apply(self, eta)


def apply(op: BellmanOperator, eta: StateVector) -> StateVector:
    if eta.grid != op.grid:
        raise GridMismatchError(f"operator grid {op.grid} differs from input grid {eta.grid}")
    return type(eta)(eta.grid, op.apply_array(eta.weights))


# -- distributional dynamic programming -------------------------------------


@dataclass
class DdpTrace:
    steps: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.steps)


def ddp(
    op: BellmanOperator,
    eta0: ReturnDistributionVector | None = None,
    max_iters: int = 10_000,
    tol: float = 1e-8,
    callback=None,
) -> tuple[ReturnDistributionVector, DdpTrace]:
    """Iterate ``eta <- T eta`` until the sup-state W1 step is at most ``tol``.

    Returns the last iterate.  When ``max_iters`` runs out first the trace has
    ``converged = False``; callers must check it.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if eta0 is None:
        eta0 = ReturnDistributionVector.dirac(op.grid, op.num_states)
    if eta0.grid != op.grid:
        raise GridMismatchError("initial distribution is on another grid")
    trace = DdpTrace()
    cur = eta0.weights
    delta = op.grid.delta
    for _ in range(max_iters):
        nxt = op.apply_array(cur)
        step = sup_w1(nxt, cur, delta)
        trace.steps.append(step)
        cur = nxt
        if callback is not None:
            callback(cur)
        if step <= tol:
            trace.converged = True
            break
    return ReturnDistributionVector(op.grid, cur), trace


def classical_value(mdp: TabularMdp, policy: Policy, transition: np.ndarray | None = None) -> np.ndarray:
    """Solve ``(I - gamma P_pi) V = r_pi`` directly."""
    P = mdp.transition if transition is None else np.asarray(transition)
    P_pi = np.einsum("sa,sat->st", policy.probs, P)
    r_pi = (policy.probs * mdp.reward_means()).sum(axis=1)
    return np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * P_pi, r_pi)


# -- Neumann inverse --------------------------------------------------------


def neumann_depth(gamma: float, norm: float, tail_tol: float) -> int:
    """Smallest ``J`` with ``gamma**J * norm <= tail_tol * (1 - gamma)``."""
    if tail_tol <= 0:
        raise ValueError("tail_tol must be positive")
    ratio = tail_tol * (1.0 - gamma) / max(norm, _TINY)
    if ratio >= 1.0:
        return 0
    return max(0, math.ceil(math.log(ratio) / math.log(gamma)))


def neumann_series(op: BellmanOperator, arr: np.ndarray, tail_tol: float) -> tuple[np.ndarray, int]:
    """``sum_{j<=J} T^j arr`` for a batch of zero-total inputs; returns the depth used."""
    arr = np.asarray(arr, dtype=np.float64)
    norm = float(norms_array(arr, op.grid.delta, "W1").max()) if arr.size else 0.0
    J = neumann_depth(op.gamma, norm, tail_tol)
    total = arr.copy()
    term = arr
    for _ in range(J):
        term = op.apply_array(term)
        total += term
    return total, J


def neumann_inverse(op: BellmanOperator, nu: SignedVector, tail_tol: float) -> SignedVector:
    """Truncated ``(I - T)^{-1} nu`` with W1 tail error at most ``tail_tol``."""
    if nu.grid != op.grid:
        raise GridMismatchError("input is on another grid")
    total, _ = neumann_series(op, nu.weights, tail_tol)
    return SignedVector(op.grid, total)


# -- dense oracle -----------------------------------------------------------


def operator_matrix(op: BellmanOperator) -> np.ndarray:
    """Dense matrix of the operator on flattened ``(S, K+1)`` weights."""
    S, n = op.num_states, op.grid.num_atoms
    if S * n > MATRIX_SIZE_CAP:
        raise ValueError(f"operator matrix of size {S * n} exceeds cap {MATRIX_SIZE_CAP}")
    M = np.zeros((S * n, S * n))
    for s, a, prob, kernel in op._pairs:
        dense = kernel.toarray()
        for t in range(S):
            c = prob * op.transition[s, a, t]
            if c:
                M[s * n:(s + 1) * n, t * n:(t + 1) * n] += c * dense
    return M


def _zero_total_basis(S: int, n: int) -> np.ndarray:
    """Columns ``e_{s,k} - e_{s,k+1}`` spanning the zero-total-per-state subspace."""
    B = np.zeros((S * n, S * (n - 1)))
    col = 0
    for s in range(S):
        for k in range(n - 1):
            B[s * n + k, col] = 1.0
            B[s * n + k + 1, col] = -1.0
            col += 1
    return B


def exact_inverse_apply(M: np.ndarray, nu: SignedVector, residual_tol: float = 1e-8) -> SignedVector:
    """Solve ``(I - M) x = nu`` with ``x`` restricted to zero total per state."""
    S, n = nu.weights.shape
    if M.shape != (S * n, S * n):
        raise ValueError("matrix and input sizes disagree")
    rhs = nu.weights.ravel()
    if not np.any(rhs):
        return SignedVector(nu.grid, np.zeros((S, n)))
    B = _zero_total_basis(S, n)
    A = (np.eye(S * n) - M) @ B
    y, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    x = B @ y
    residual = np.abs((x - M @ x) - rhs).max()
    if residual > residual_tol:
        raise NumericFailure(f"restricted solve residual {residual:.3e} exceeds {residual_tol:.1e}")
    return SignedVector(nu.grid, x.reshape(S, n))
