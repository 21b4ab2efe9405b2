"""Applications of fault-tolerant load balancing on randomized link graphs.

All three protocols share the same skeleton: sample communication links by
reciprocal handshake, run the balancing protocol on them, and act on the
resulting mean estimates.  Execution is vectorized round by round; every
round consults the run's single adversary through the shared context, so
fault budgets span whole protocol executions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graph import Graph
from .llb import LLBConfig, config_with_fallback, run_llb
from .simnet import SimContext, TraceRound, state_digest


class InvalidDensity(Exception):
    """Raised when the requested link density exceeds probability 1."""


def loglog(n) -> float:
    return math.log(math.log(n))


def set_graph_probability(n: int, c2: float) -> tuple[float, float]:
    """(q, p): the union-graph edge probability and the per-side sampling
    probability solving 2p - p^2 = q = c2 ln(n) (ln ln n)^2 / (n - 1)."""
    q = c2 * math.log(n) * loglog(n) ** 2 / (n - 1)
    if q > 1.0:
        raise InvalidDensity(
            f"density q = {q:.4f} > 1 at n = {n}, c2 = {c2}; infeasible regime"
        )
    p = 1.0 - math.sqrt(1.0 - q)
    return q, p


@dataclass(frozen=True)
class SetGraphConfig:
    n: int
    c2: float
    q: float
    p: float

    @classmethod
    def for_n(cls, n: int, c2: float) -> "SetGraphConfig":
        q, p = set_graph_probability(n, c2)
        return cls(n, c2, q, p)


@dataclass
class SetGraphResult:
    sends: np.ndarray  # directed: sends[u, v] means u will message v
    union: np.ndarray  # union of draws restricted to links between live nodes
    picks: int  # dummy messages sent

    def union_graph(self) -> Graph:
        n = self.union.shape[0]
        sym = self.union | self.union.T
        return Graph.from_edges(
            n, ((int(u), int(v)) for u, v in np.argwhere(np.triu(sym, 1)))
        )


def set_graph(
    ctx: SimContext,
    p: float,
    participants: Optional[np.ndarray] = None,
    phase: str = "setgraph",
) -> SetGraphResult:
    """One handshake round: sample candidate links, swap dummies, merge.

    Each live participant draws every other participant independently with
    probability p and messages its picks; every received dummy adds its
    sender to the port set.  The union of draws is distributed G(n, 2p-p^2)
    over participants; faults can only remove links from a node's view.
    """
    n = ctx.n
    if participants is None:
        participants = np.ones(n, dtype=bool)
    samplers = participants & ctx.live
    picks = ctx.protocol_rng.random((n, n)) < p
    np.fill_diagonal(picks, False)
    picks &= samplers[:, None]
    picks &= participants[None, :]

    ctx.round_idx = ctx.metrics.rounds + 1
    decision = ctx.decide(picks, loads=None, phase=phase)
    delivered = picks.copy()
    for u, v in decision.drops:
        delivered[u, v] = False
    delivered &= ctx.live[None, :]  # crashed nodes receive nothing

    sent = int(picks.sum())
    ctx.metrics.rounds += 1
    ctx.metrics.messages_sent += sent
    ctx.metrics.messages_dropped += len(decision.drops)
    if ctx.trace is not None:
        ctx.trace.append(
            TraceRound(
                ctx.round_idx, sorted(decision.newly_faulted), sent,
                len(decision.drops),
                state_digest([picks.tobytes(), delivered.tobytes()]), phase,
            )
        )
    sends = picks | delivered.T
    sends &= ctx.live[:, None]  # crashed samplers will not speak again
    union = (picks | picks.T) & ctx.live[:, None] & ctx.live[None, :]
    return SetGraphResult(sends=sends, union=union, picks=sent)


def decide_threshold(mu: float, margin: float, rng: np.random.Generator) -> int:
    """Three-way vote: below the band 0, above it 1, inside it a fair coin."""
    if mu < 0.5 - margin:
        return 0
    if mu > 0.5 + margin:
        return 1
    return int(rng.integers(0, 2))


@dataclass(frozen=True)
class ConsensusConfig:
    """Loop counts, thresholds, and inquiry sizes for one consensus mode."""

    mode: str  # "crash" | "omission"
    n: int
    t: int
    c1: float
    c2: float
    iterations: int
    dissemination_rounds: int
    threshold_margin: float
    inquiry_count: int
    resume_after_skip: bool = True

    @classmethod
    def crash(
        cls, n: int, t: int, c1: float = 4.0, c2: float = 8.0,
        resume_after_skip: bool = True,
    ) -> "ConsensusConfig":
        ln = math.log(n)
        return cls(
            mode="crash", n=n, t=t, c1=c1, c2=c2,
            iterations=math.ceil(c1 * math.sqrt(n * ln)),
            dissemination_rounds=40 * math.ceil(ln) + 1,
            threshold_margin=math.sqrt(ln / n) / 40.0,
            inquiry_count=math.ceil(10.0 * ln),
            resume_after_skip=resume_after_skip,
        )

    @classmethod
    def omission(cls, n: int, t: int, c1: float = 4.0, c2: float = 8.0) -> "ConsensusConfig":
        ln = math.log(n)
        return cls(
            mode="omission", n=n, t=t, c1=c1, c2=c2,
            iterations=math.ceil(2.0 * c1 * max(t * ln / math.sqrt(n), ln)),
            dissemination_rounds=0,
            threshold_margin=math.sqrt(ln / n) / 12.0,
            inquiry_count=math.ceil(11.0 * c2 * ln * loglog(n) ** 2 * t) + 1,
        )


def estimated_llb_config(n: int, c2: float) -> LLBConfig:
    """Per-iteration degree window from the node-side size estimate (all of n)."""
    q, _ = set_graph_probability(n, c2)
    delta = 1.0 / (20.0 * loglog(n))
    d_est = q * n
    return config_with_fallback(d_est * (1.0 - delta), d_est * (1.0 + delta), n)


def _threshold_decide_vector(
    mu: np.ndarray, margin: float, mask: np.ndarray, b: np.ndarray, ctx: SimContext
) -> int:
    """Apply the three-way vote for every node in mask; returns coin count."""
    lo = mu < 0.5 - margin
    hi = mu > 0.5 + margin
    b[mask & lo] = 0.0
    b[mask & hi] = 1.0
    mid = mask & ~lo & ~hi
    for v in np.flatnonzero(mid):
        b[v] = float(ctx.node_rng(int(v)).integers(0, 2))
    return int(mid.sum())


def _sample_targets(rng: np.random.Generator, v: int, n: int, count: int) -> np.ndarray:
    """count distinct targets uniform over all processes except v."""
    count = min(count, n - 1)
    draw = rng.choice(n - 1, size=count, replace=False)
    return np.where(draw >= v, draw + 1, draw)


def _one_shot_round(
    ctx: SimContext, sends: np.ndarray, loads: np.ndarray, phase: str
) -> np.ndarray:
    """Send one message matrix through the adversary; returns the deliveries."""
    ctx.round_idx = ctx.metrics.rounds + 1
    decision = ctx.decide(sends, loads=loads, phase=phase)
    delivered = sends.copy()
    for u, v in decision.drops:
        delivered[u, v] = False
    delivered &= ctx.live[None, :]
    ctx.metrics.rounds += 1
    ctx.metrics.messages_sent += int(sends.sum())
    ctx.metrics.messages_dropped += len(decision.drops)
    if ctx.trace is not None:
        ctx.trace.append(
            TraceRound(
                ctx.round_idx, sorted(decision.newly_faulted), int(sends.sum()),
                len(decision.drops), state_digest([delivered.tobytes()]), phase,
            )
        )
    return delivered


def _inquiry_phase(
    ctx: SimContext,
    inquirers: np.ndarray,
    responders: np.ndarray,
    b: np.ndarray,
    count: int,
) -> None:
    """Two engine rounds: broadcast queries, adopt any response (lowest id)."""
    n = ctx.n
    queries = np.zeros((n, n), dtype=bool)
    for v in np.flatnonzero(inquirers & ctx.live):
        queries[v, _sample_targets(ctx.node_rng(int(v)), int(v), n, count)] = True
    delivered_q = _one_shot_round(ctx, queries, b, "inquiry")
    responses = delivered_q.T & (responders & ctx.live)[:, None]
    delivered_r = _one_shot_round(ctx, responses, b, "inquiry")

    got = delivered_r.any(axis=0)
    source = delivered_r.argmax(axis=0)
    adopt = inquirers & ctx.live & got
    b[adopt] = b[source[adopt]]


@dataclass
class BoundaryLog:
    """Per-iteration (active mask, b vector) snapshots for persistence audits."""

    masks: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def append(self, mask: np.ndarray, b: np.ndarray) -> None:
        self.masks.append(mask.copy())
        self.values.append(b.copy())


def check_agreement_persistence(log: BoundaryLog) -> bool:
    """Once every active node shares b at a boundary, the shared value must
    survive every later boundary."""
    locked: Optional[float] = None
    for mask, b in zip(log.masks, log.values):
        vals = np.unique(b[mask]) if mask.any() else np.array([])
        agreed = len(vals) == 1
        if locked is not None and (not agreed or vals[0] != locked):
            return False
        if locked is None and agreed:
            locked = float(vals[0])
    return True


@dataclass
class CountingResult:
    estimates: list  # per-node Optional[int]
    active: np.ndarray
    faulted: frozenset
    live: np.ndarray
    rounds: int
    messages: int
    bits: int
    range_violations: int
    union: np.ndarray
    llb_cfg: LLBConfig

    def returned(self) -> int:
        return sum(1 for e in self.estimates if e is not None)


def ae_counting(
    flags: Sequence[int],
    c2: float = 8.0,
    seed: int = 0,
    adversary=None,
    ctx: Optional[SimContext] = None,
) -> CountingResult:
    """Almost-everywhere counting: balance the flag indicators over a sampled
    link graph; active nodes report round(n * mean estimate)."""
    flags = np.asarray(flags, dtype=np.float64)
    n = len(flags)
    q, p = set_graph_probability(n, c2)
    d_min = 0.75 * q * (n - 1)
    cfg = config_with_fallback(d_min, 1.25 * d_min, n)
    if ctx is None:
        ctx = SimContext(n, seed, adversary)
    ctx.begin(1 + cfg.rounds)
    sg = set_graph(ctx, p)
    run = run_llb(sg.sends, flags, cfg, ctx=ctx, record_loads=False, phase="llb")
    estimates: list = []
    for v in range(n):
        if run.active[v]:
            estimates.append(int(np.rint(n * run.x_final[v])))
        else:
            estimates.append(None)
    return CountingResult(
        estimates=estimates,
        active=run.active,
        faulted=ctx.faulted,
        live=ctx.live.copy(),
        rounds=ctx.metrics.rounds,
        messages=ctx.metrics.messages_sent,
        bits=ctx.metrics.bits,
        range_violations=run.range_report.violations,
        union=sg.union,
        llb_cfg=cfg,
    )


@dataclass
class ConsensusResult:
    decisions: list  # per-node Optional[int]; None for crashed nodes
    correct: np.ndarray  # never-faulted nodes
    faulted: frozenset
    agreed: bool
    valid: bool
    decided_value: Optional[int]
    rounds: int
    messages: int
    bits: int
    range_violations: int
    persistence_ok: bool
    boundaries: BoundaryLog
    coin_iterations: int
    active_count: int  # crash: never-skipped live; omission: never-suspected
    suspected_count: int = 0

    @property
    def ok(self) -> bool:
        return self.agreed and self.valid


def _finish_consensus(
    inputs, b, ctx, decided_mask, boundaries, coin_iterations,
    range_violations, active_count, suspected_count=0,
) -> ConsensusResult:
    inputs = np.asarray(inputs)
    correct = np.ones(ctx.n, dtype=bool)
    for v in ctx.faulted:
        correct[v] = False
    decisions = [int(b[v]) if decided_mask[v] else None for v in range(ctx.n)]
    correct_vals = {int(b[v]) for v in np.flatnonzero(correct & decided_mask)}
    agreed = len(correct_vals) == 1
    input_vals = {int(x) for x in inputs}
    valid = agreed and correct_vals <= input_vals
    return ConsensusResult(
        decisions=decisions,
        correct=correct,
        faulted=ctx.faulted,
        agreed=agreed,
        valid=valid,
        decided_value=next(iter(correct_vals)) if agreed else None,
        rounds=ctx.metrics.rounds,
        messages=ctx.metrics.messages_sent,
        bits=ctx.metrics.bits,
        range_violations=range_violations,
        persistence_ok=check_agreement_persistence(boundaries),
        boundaries=boundaries,
        coin_iterations=coin_iterations,
        active_count=active_count,
        suspected_count=suspected_count,
    )


def consensus_crash(
    inputs: Sequence[int],
    cfg: ConsensusConfig,
    seed: int = 0,
    adversary=None,
    ctx: Optional[SimContext] = None,
) -> ConsensusResult:
    """Consensus under crashes: per iteration, balance the current bits on a
    fresh sampled graph, spread (mean, status) pairs over a long-lived graph,
    then vote by threshold with a fair coin inside the margin band.  Nodes
    that ever starved during spreading ask random processes at the end."""
    n = cfg.n
    b = np.asarray(inputs, dtype=np.float64).copy()
    if ctx is None:
        ctx = SimContext(n, seed, adversary)
    llb_cfg = estimated_llb_config(n, cfg.c2)
    horizon = 1 + cfg.iterations * (1 + llb_cfg.rounds + cfg.dissemination_rounds) + 2
    ctx.begin(horizon)
    q, p = set_graph_probability(n, cfg.c2)
    d_star_min = q * (n - 1) * (1.0 - 1.0 / (20.0 * loglog(n)))
    skip_threshold = d_star_min / 5.0

    star = set_graph(ctx, p, phase="setgraph*")
    s_star = star.sends
    s_star_f = s_star.astype(np.float64)

    ever_skipped = np.zeros(n, dtype=bool)
    boundaries = BoundaryLog()
    boundaries.append(ctx.live & ~ever_skipped, b)
    coin_iterations = 0
    range_violations = 0

    for _ in range(cfg.iterations):
        sg = set_graph(ctx, p)
        run = run_llb(sg.sends, b, llb_cfg, ctx=ctx, record_loads=False, phase="llb")
        range_violations += run.range_report.violations
        mu = run.x_final.copy()
        status = run.active.copy()  # lb_status: finished the balancing active

        if not cfg.resume_after_skip:
            skipped = ever_skipped.copy()
        else:
            skipped = np.zeros(n, dtype=bool)
        cache_senders = None
        counts = first_active = has_active = None
        for _ in range(cfg.dissemination_rounds):
            senders = ctx.live & ~skipped
            ctx.round_idx = ctx.metrics.rounds + 1
            rebuild = cache_senders is None or not np.array_equal(senders, cache_senders)
            if rebuild:
                sends = s_star & senders[:, None]
                sent_count = int(s_star_f[senders].sum())
                cache_senders = senders.copy()
                cache_status = None
            decision = ctx.decide(sends, loads=mu, phase="dissem")
            drops = sorted(decision.drops) if decision.drops else []
            ctx.metrics.rounds += 1
            ctx.metrics.messages_sent += sent_count
            ctx.metrics.messages_dropped += len(drops)
            senders_now = ctx.live & ~skipped  # crashes this round already spoke
            if drops:
                delivered = sends.copy()
                for u, v in drops:
                    delivered[u, v] = False
                counts = delivered.sum(axis=0).astype(np.float64)
                act = delivered & status[:, None]
                has_active = act.any(axis=0)
                first_active = act.argmax(axis=0)
                cache_status = None  # drops are transient: rebuild next round
                cache_senders = None
            else:
                if cache_status is None or not np.array_equal(status, cache_status):
                    counts = s_star_f.T @ cache_senders.astype(np.float64)
                    act = sends & status[:, None]
                    has_active = act.any(axis=0)
                    first_active = act.argmax(axis=0)
                    cache_status = status.copy()
            listeners = ctx.live & ~skipped
            starved = listeners & (counts < skip_threshold)
            adopters = listeners & ~starved & has_active
            mu_prev = mu
            mu = mu.copy()
            mu[adopters] = mu_prev[first_active[adopters]]
            status = status.copy()
            status[adopters] = True
            skipped = skipped | starved
            ever_skipped |= starved
            if ctx.trace is not None:
                ctx.trace.append(
                    TraceRound(
                        ctx.round_idx, sorted(decision.newly_faulted), sent_count,
                        len(drops),
                        state_digest([mu.tobytes(), status.tobytes(), skipped.tobytes()]),
                        "dissem",
                    )
                )

        coin_iterations += 1 if _threshold_decide_vector(
            mu, cfg.threshold_margin, ctx.live, b, ctx
        ) else 0
        boundaries.append(ctx.live & ~ever_skipped, b)

    _inquiry_phase(
        ctx,
        inquirers=ever_skipped,
        responders=~ever_skipped,
        b=b,
        count=cfg.inquiry_count,
    )
    return _finish_consensus(
        inputs, b, ctx, decided_mask=ctx.live, boundaries=boundaries,
        coin_iterations=coin_iterations, range_violations=range_violations,
        active_count=int((ctx.live & ~ever_skipped).sum()),
    )


def consensus_omission(
    inputs: Sequence[int],
    cfg: ConsensusConfig,
    seed: int = 0,
    adversary=None,
    ctx: Optional[SimContext] = None,
) -> ConsensusResult:
    """Consensus under omissions: nodes whose links ever failed withdraw from
    later iterations and recover the decision by inquiring at the end."""
    n = cfg.n
    b = np.asarray(inputs, dtype=np.float64).copy()
    if ctx is None:
        ctx = SimContext(n, seed, adversary)
    llb_cfg = estimated_llb_config(n, cfg.c2)
    horizon = cfg.iterations * (1 + llb_cfg.rounds) + 2
    ctx.begin(horizon)
    _, p = set_graph_probability(n, cfg.c2)

    active_type = np.ones(n, dtype=bool)  # active vs suspected
    boundaries = BoundaryLog()
    boundaries.append(active_type & ctx.live, b)
    coin_iterations = 0
    range_violations = 0

    for _ in range(cfg.iterations):
        participants = active_type & ctx.live
        sg = set_graph(ctx, p, participants=participants)
        run = run_llb(
            sg.sends, b, llb_cfg, ctx=ctx, participants=participants,
            record_loads=False, count_omitted=True, phase="llb",
        )
        range_violations += run.range_report.violations
        newly_suspected = participants & (run.omitted > 0)
        coin_iterations += 1 if _threshold_decide_vector(
            run.x_final, cfg.threshold_margin, participants & ctx.live, b, ctx
        ) else 0
        active_type &= ~newly_suspected
        boundaries.append(active_type & ctx.live, b)

    _inquiry_phase(
        ctx,
        inquirers=~active_type,
        responders=active_type,
        b=b,
        count=cfg.inquiry_count,
    )
    return _finish_consensus(
        inputs, b, ctx, decided_mask=ctx.live, boundaries=boundaries,
        coin_iterations=coin_iterations, range_violations=range_violations,
        active_count=int((active_type & ctx.live).sum()),
        suspected_count=int((~active_type).sum()),
    )
