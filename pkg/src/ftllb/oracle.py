"""Centralized reference processes for auditing load-balancing traces.

Replays a run's actual delivery sets through three reference recurrences
(ideal on the degree-regularized graph, skewed toward 0, skewed toward 1)
and checks the envelope that makes adversarial runs testable: the factual
loads must sit entrywise between the two skewed processes.  Also tracks the
converged-core/remainder sets through the fixing loop and checks their
geometric shrinkage.

These computations require global knowledge and exist only in the harness;
no node ever sees them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import Graph
from .llb import LLBRun, shrink_factor


class TraceMismatch(Exception):
    """The supplied trace does not cover the expected number of rounds."""


def _executed_tau1(run: LLBRun) -> int:
    return 0 if run.x_main is None else len(run.x_main) - 1


def _delivered(run: LLBRun, engine_round: int) -> np.ndarray:
    """Deliveries actually consumed: dead receivers consume nothing."""
    mask = run.delivered_mask(engine_round)
    live_end = run.live_by_round[engine_round - 1]
    return mask & live_end[None, :]


def ideal_run(g: Graph, x0, d_max: float, tau1: int) -> np.ndarray:
    """Fault-free averaging on the graph regularized to degree d_max by self-loops.

    Every vertex gets d_max - deg(v) loops, which folds into a self-weight of
    (2 d_max - deg(v)) / (2 d_max); the transition is doubly stochastic, so
    the total load is conserved (checked each round).
    """
    degs = g.degrees().astype(np.float64)
    if degs.max() > d_max:
        raise ValueError("regularization needs every degree <= d_max")
    a = g.adjacency_matrix()
    inv2d = 1.0 / (2.0 * d_max)
    two_dmax = 2.0 * d_max
    x = np.asarray(x0, dtype=np.float64).copy()
    out = np.empty((tau1 + 1, g.n))
    out[0] = x
    mass = x.sum()
    for i in range(1, tau1 + 1):
        y = a.T @ x
        x = (y + (two_dmax - degs) * x) * inv2d
        out[i] = x
        if abs(x.sum() - mass) > 1e-8 * max(1.0, abs(mass)):
            raise AssertionError(
                f"mass drifted by {x.sum() - mass:.3e} at round {i}: not doubly stochastic"
            )
    return out


def skewed_runs(
    run: LLBRun,
    upper_term: str = "d_max",
) -> tuple[np.ndarray, np.ndarray]:
    """Replay the trace's delivery sets through both skewed recurrences.

    The toward-0 process gives faulty senders load 0 and keeps self-weight
    exactly 1/2; the toward-1 process adds (term - |N_i(v)|)/(2 d_max) with
    term = d_max by default.  `upper_term="d_min"` reproduces the literal
    definition instead, whose additive term goes negative once a node hears
    more than d_min senders and which therefore fails to dominate on
    irregular graphs (all-ones input is no longer a fixed point); it is kept
    for exhibiting exactly that finding.
    """
    if run.senders_by_round is None:
        raise TraceMismatch("run was executed without delivery recording")
    tau1 = _executed_tau1(run)
    if tau1 == 0:
        raise TraceMismatch("run holds no balancing rounds to replay")
    if len(run.senders_by_round) < tau1:
        raise TraceMismatch(
            f"trace covers {len(run.senders_by_round)} rounds, need {tau1}"
        )
    if upper_term not in ("d_max", "d_min"):
        raise ValueError("upper_term must be 'd_max' or 'd_min'")
    d_max = run.cfg.d_max
    term = d_max if upper_term == "d_max" else run.cfg.d_min
    inv2d = 1.0 / (2.0 * d_max)
    n = len(run.x0)
    x_zero = np.empty((tau1 + 1, n))
    x_one = np.empty((tau1 + 1, n))
    x_zero[0] = run.x0
    x_one[0] = run.x0
    for i in range(1, tau1 + 1):
        delivered = _delivered(run, i).astype(np.float64)
        counts = delivered.sum(axis=0)
        x_zero[i] = (delivered.T @ x_zero[i - 1]) * inv2d + 0.5 * x_zero[i - 1]
        x_one[i] = (
            (delivered.T @ x_one[i - 1]) * inv2d
            + 0.5 * x_one[i - 1]
            + (term - counts) * inv2d
        )
    return x_zero, x_one


@dataclass
class SandwichVerdict:
    passed: bool
    violations: int = 0
    first: Optional[dict] = None  # round, node, x_zero, value, x_one, which

    def __bool__(self):
        return self.passed


def sandwich_check(
    run: LLBRun,
    graph: Optional[Graph] = None,
    tol: float = 1e-9,
    upper_term: str = "d_max",
) -> SandwichVerdict:
    """Assert the skewed envelope around both the factual and the ideal loads.

    For every balancing round and every node still computing at that round,
    x_zero <= x <= x_one within tol; when `graph` is given, the ideal
    process on it is checked against the same envelope at all nodes.
    """
    tau1 = _executed_tau1(run)
    x_zero, x_one = skewed_runs(run, upper_term=upper_term)
    verdict = SandwichVerdict(passed=True)

    def record(i, v, value, which):
        verdict.violations += 1
        if verdict.first is None:
            verdict.first = {
                "round": int(i),
                "node": int(v),
                "x_zero": float(x_zero[i, v]),
                "value": float(value),
                "x_one": float(x_one[i, v]),
                "which": which,
            }

    x_ideal = None
    if graph is not None:
        x_ideal = ideal_run(graph, run.x0, run.cfg.d_max, tau1)
    for i in range(1, tau1 + 1):
        computing = run.participants & run.live_by_round[i - 1]
        xi = run.x_main[i]
        low_bad = computing & (xi < x_zero[i] - tol)
        high_bad = computing & (xi > x_one[i] + tol)
        for v in np.flatnonzero(low_bad):
            record(i, v, xi[v], "actual_below_zero_skew")
        for v in np.flatnonzero(high_bad):
            record(i, v, xi[v], "actual_above_one_skew")
        if x_ideal is not None:
            ivals = x_ideal[i]
            for v in np.flatnonzero(ivals < x_zero[i] - tol):
                record(i, v, ivals[v], "ideal_below_zero_skew")
            for v in np.flatnonzero(ivals > x_one[i] + tol):
                record(i, v, ivals[v], "ideal_above_one_skew")
    verdict.passed = verdict.violations == 0
    return verdict


@dataclass
class ShrinkageVerdict:
    precondition_met: bool
    rho: float
    r_sizes: list = field(default_factory=list)
    decay_ok: bool = True
    emptied: bool = False
    core_converged: bool = True
    first_decay_break: Optional[int] = None

    def __bool__(self):
        return self.decay_ok and self.emptied and self.core_converged


def _greedy_core(eligible: np.ndarray, adjacency: np.ndarray, threshold: float) -> np.ndarray:
    """Largest subset of `eligible` whose members each keep >= threshold
    neighbors inside; iterative removal reaches the maximum such set."""
    member = eligible.copy()
    while True:
        inside = adjacency[:, member].sum(axis=1) if member.any() else np.zeros(len(member))
        drop = member & (inside < threshold)
        if not drop.any():
            return member
        member &= ~drop


def remainder_shrinkage_check(
    run: LLBRun,
    graph: Graph,
    epsilon: float,
    mu: Optional[float] = None,
    t: Optional[int] = None,
    tol: float = 1e-9,
) -> ShrinkageVerdict:
    """Track the converged core through the fixing loop and check shrinkage.

    The starting core holds active nodes within epsilon of the mean that keep
    at least (d_max + 1)/2 neighbors inside the core (greedy fixed point).
    Each fixing round, a node rejoins the core by hearing at least that many
    messages from the previous core; the remainder (active nodes outside)
    must shrink geometrically and empty by the last round, and the final
    core's loads must sit within epsilon of the mean.

    When the fault budget violates t < (2 d_min / d_max) * (epsilon n / 81),
    the verdict reports precondition_met=False instead of failing.
    """
    if run.x_fix is None or run.senders_by_round is None:
        raise TraceMismatch("run lacks recorded fixing-loop data")
    cfg = run.cfg
    n = len(run.x0)
    if mu is None:
        mu = float(np.mean(np.asarray(run.x0)[run.participants]))
    if t is None:
        t = len(run.faulted)
    bound = (2.0 * cfg.d_min / cfg.d_max) * epsilon * n / 81.0
    precondition = t < bound
    rho = shrink_factor(cfg.d_min, cfg.d_max)
    threshold = 0.5 * (cfg.d_max + 1.0)

    active = run.participants & run.live & ~run.silent
    adjacency = graph.adjacency_matrix(dtype=bool)
    converged0 = np.abs(run.x_fix[0] - mu) <= epsilon + tol
    core = _greedy_core(active & converged0, adjacency, threshold)

    tau1 = _executed_tau1(run)
    verdict = ShrinkageVerdict(precondition_met=precondition, rho=rho)
    remainder = active & ~core
    verdict.r_sizes.append(int(remainder.sum()))
    for j in range(1, cfg.tau2 + 1):
        delivered = _delivered(run, tau1 + j)
        heard_from_core = delivered[core, :].sum(axis=0)
        core = active & (heard_from_core >= threshold)
        remainder = active & ~core
        verdict.r_sizes.append(int(remainder.sum()))
        prev, cur = verdict.r_sizes[-2], verdict.r_sizes[-1]
        if cur > rho * prev + 1.0 + tol:
            verdict.decay_ok = False
            if verdict.first_decay_break is None:
                verdict.first_decay_break = j
    verdict.emptied = verdict.r_sizes[-1] == 0
    if core.any():
        final_err = np.abs(run.x_fix[cfg.tau2][core] - mu)
        verdict.core_converged = bool(final_err.max() <= epsilon + tol)
    return verdict


def agreement_with_ideal(run: LLBRun, graph: Graph, atol: float = 1e-12) -> bool:
    """Fault-free regular-case cross-check: simulator loads equal the ideal run."""
    tau1 = _executed_tau1(run)
    ideal = ideal_run(graph, run.x0, run.cfg.d_max, tau1)
    return bool(np.max(np.abs(ideal - run.x_main)) <= atol)
