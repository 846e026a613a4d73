"""Replicate-level experiment logic shared by the CLI and the acceptance tests.

A replicate samples a generative dataset, fits the empirical fixed point and
scores it against the true one.  Each replicate seeds itself from
``(seed, gamma index, n index, replicate)`` so results do not depend on
scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bellman import BellmanOperator, ReturnDistributionVector, ddp, sup_w1
from .inference import (
    DegenerateDensityError,
    confidence_ball,
    limit_draws,
    quantile_ci,
    variance_ci,
)
from .measures import NormKind, ReturnGrid, moment, norms_array, quantile
from .mdp import Policy, TabularMdp, empirical_transition, sample_transitions
from .rng import derive_seed, make_rng

__all__ = [
    "BALL_KINDS",
    "FUNCTIONALS",
    "Context",
    "convergence_replicate",
    "coverage_replicate",
    "loglog_slope",
    "make_context",
    "replicate_seed",
]

BALL_KINDS = (NormKind.W1, NormKind.KS, NormKind.TV)
FUNCTIONALS = ("variance", "quantile0.1", "quantile0.9")


@dataclass(frozen=True, eq=False)
class Context:
    """Everything a replicate needs about the true model."""

    mdp: TabularMdp
    policy: Policy
    op: BellmanOperator
    eta: ReturnDistributionVector
    ddp_tol: float
    max_iters: int


def make_context(mdp: TabularMdp, policy: Policy, K: int, ddp_tol: float, max_iters: int) -> Context:
    grid = ReturnGrid.from_k(K, mdp.gamma)
    op = BellmanOperator.from_mdp(mdp, policy, grid)
    eta, _ = ddp(op, tol=ddp_tol, max_iters=max_iters)
    return Context(mdp, policy, op, eta, ddp_tol, max_iters)


def _estimate(ctx: Context, n: float, seed: int) -> tuple[BellmanOperator, ReturnDistributionVector, list[float]]:
    """Empirical operator and fixed point; ``n = inf`` uses the true kernel."""
    if math.isinf(n):
        op_hat = ctx.op
    else:
        counts = sample_transitions(ctx.mdp, int(n), seed)
        op_hat = ctx.op.with_transition(empirical_transition(counts))
    errors: list[float] = []
    truth, delta = ctx.eta.weights, ctx.op.grid.delta

    def record(weights):
        errors.append(sup_w1(weights, truth, delta))

    eta_hat, _ = ddp(op_hat, tol=ctx.ddp_tol, max_iters=ctx.max_iters, callback=record)
    return op_hat, eta_hat, errors


def convergence_replicate(ctx: Context, n: float, seed: int) -> dict:
    """Sup-state W1/KS/TV errors of the empirical fixed point, plus its sup-W1 trace."""
    _, eta_hat, trace = _estimate(ctx, n, seed)
    diff = eta_hat.weights - ctx.eta.weights
    delta = ctx.op.grid.delta
    errors = {kind.value: float(norms_array(diff, delta, kind).max()) for kind in BALL_KINDS}
    return {"errors": errors, "trace": trace}


def coverage_replicate(
    ctx: Context,
    n: int,
    seed: int,
    state: int,
    alpha: float,
    m: int,
    tail_tol: float,
    functionals: bool = True,
) -> dict:
    """Whether each confidence set and interval at ``state`` covers the truth.

    Returns ``{name: (covered, size)}`` with size the ball radius or interval
    width; a refused quantile interval (density below floor) counts as not
    covered with size NaN.
    """
    op_hat, eta_hat, _ = _estimate(ctx, n, seed)
    draws = limit_draws(op_hat, eta_hat, state, m=m, tail_tol=tail_tol, seed=make_rng(seed, 7))
    truth = ctx.eta[state]
    out: dict[str, tuple[bool, float]] = {}
    for kind in BALL_KINDS:
        ball = confidence_ball(op_hat, eta_hat, state, kind, alpha, n, draws=draws)
        out[kind.value] = (ball.contains(truth), ball.radius)
    if functionals:
        ci = variance_ci(op_hat, eta_hat, state, alpha, n, draws=draws)
        var = moment(truth, 2) - moment(truth, 1) ** 2
        out["variance"] = (ci.contains(var), ci.width)
        for p in (0.1, 0.9):
            name = f"quantile{p:g}"
            try:
                ci = quantile_ci(op_hat, eta_hat, state, p, alpha, n, draws=draws)
            except DegenerateDensityError:
                out[name] = (False, float("nan"))
            else:
                out[name] = (ci.contains(quantile(truth, p)), ci.width)
    return out


def replicate_seed(seed: int, gamma_index: int, n_index: int, rep: int) -> int:
    return derive_seed(seed, gamma_index, n_index, rep)


def loglog_slope(ns, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(ns)``."""
    x, y = np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])
