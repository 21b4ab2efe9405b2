"""Deterministic round-synchronous message passing with fault injection.

The engine advances in fixed phases each round: live nodes produce outgoing
messages from their state and last round's inbox, the adversary observes the
full system state (including the produced messages) and returns a delivery
decision within its budget, deliveries populate the next inboxes, and node
states advance.  Node random substreams for round r+1 are never sampled
before round r completes, so the adversary is full-information but not
prescient.

Payloads are modeled as one 64-bit machine word each for bit accounting.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .graph import Graph

WORD_BITS = 64


class BudgetExceeded(Exception):
    """The adversary returned a decision outside its contract; the run is rejected."""


class TraceError(Exception):
    """A stored trace is malformed or violates causality."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class OutMessage:
    sender: int
    port: int  # local port index at the sender
    payload: object


@dataclass(frozen=True)
class DeliveryDecision:
    """Per-round adversary verdict: nodes newly faulted plus dropped (u, v) sends."""

    newly_faulted: frozenset = frozenset()
    drops: frozenset = frozenset()  # directed (sender, receiver) pairs


EMPTY_DECISION = DeliveryDecision()


class AdversaryView:
    """Read-only snapshot handed to the adversary each round."""

    __slots__ = ("round_idx", "n", "sends", "loads", "live", "faulted", "graph", "phase")

    def __init__(self, round_idx, n, sends, loads, live, faulted, graph, phase):
        self.round_idx = round_idx
        self.n = n
        self.sends = sends  # bool (n, n): sends[u, v] means u sends to v this round
        self.loads = loads  # per-node scalar summary, or None
        self.live = live  # bool (n,): not crashed
        self.faulted = faulted  # frozenset of every node ever faulted
        self.graph = graph  # current topology, when one exists
        self.phase = phase


class Adversary:
    """Behavioral contract: kind, budget, and a per-round decision procedure."""

    kind = "null"

    def __init__(self, budget: int = 0):
        self.budget = int(budget)

    def reset(self, n: int, horizon: int, rng: np.random.Generator) -> None:
        """Called once per run before round 1."""

    def decide(self, view: AdversaryView) -> DeliveryDecision:
        return EMPTY_DECISION


class NullAdversary(Adversary):
    pass


def _row_pairs(sends: np.ndarray, u: int) -> list:
    return [(u, int(v)) for v in np.flatnonzero(sends[u])]


def _col_pairs(sends: np.ndarray, v: int) -> list:
    return [(int(u), v) for u in np.flatnonzero(sends[:, v])]


class RandomCrash(Adversary):
    """Crashes uniformly random live nodes at uniformly random rounds."""

    kind = "crash"

    def reset(self, n, horizon, rng):
        self._rng = rng
        self._fire = np.sort(rng.integers(1, max(horizon, 1) + 1, size=self.budget))
        self._spent = 0

    def decide(self, view):
        count = int(np.sum(self._fire == view.round_idx)) if self.budget else 0
        if count == 0:
            return EMPTY_DECISION
        pool = np.flatnonzero(view.live)
        pool = pool[~np.isin(pool, list(view.faulted))] if view.faulted else pool
        victims = []
        for _ in range(min(count, len(pool))):
            pick = int(pool[self._rng.integers(len(pool))])
            victims.append(pick)
            pool = pool[pool != pick]
        drops = []
        for u in victims:
            # deliver a random subset of the crash-round messages
            for pair in _row_pairs(view.sends, u):
                if self._rng.random() < 0.5:
                    drops.append(pair)
        return DeliveryDecision(frozenset(victims), frozenset(drops))


class TargetedExtremeCrash(Adversary):
    """Each round crashes the live node whose load sits farthest from the mean."""

    kind = "crash"

    def reset(self, n, horizon, rng):
        self._rng = rng
        self._spent = 0

    def decide(self, view):
        if self._spent >= self.budget or view.loads is None:
            return EMPTY_DECISION
        live_idx = np.flatnonzero(view.live)
        if live_idx.size == 0:
            return EMPTY_DECISION
        loads = np.asarray(view.loads)[live_idx]
        victim = int(live_idx[np.argmax(np.abs(loads - loads.mean()))])
        self._spent += 1
        return DeliveryDecision(
            frozenset([victim]), frozenset(_row_pairs(view.sends, victim))
        )


class EclipseCrash(Adversary):
    """Crashes nodes concentrated in one neighborhood, one per round."""

    kind = "crash"

    def reset(self, n, horizon, rng):
        self._rng = rng
        self._queue: Optional[list] = None

    def _build_queue(self, view):
        n = view.n
        focal = int(self._rng.integers(n))
        if view.graph is not None:
            nbrs = [int(u) for u in view.graph.neighbors(focal)]
        else:
            nbrs = [int(u) for u in np.flatnonzero(view.sends[focal])]
        self._rng.shuffle(nbrs)
        queue = nbrs[: self.budget]
        if len(queue) < self.budget:
            rest = [v for v in range(n) if v != focal and v not in queue]
            self._rng.shuffle(rest)
            queue.extend(rest[: self.budget - len(queue)])
        self._queue = queue

    def decide(self, view):
        if self.budget == 0:
            return EMPTY_DECISION
        if self._queue is None:
            if view.graph is None and not view.sends.any():
                return EMPTY_DECISION
            self._build_queue(view)
        while self._queue:
            victim = self._queue.pop(0)
            if view.live[victim] and victim not in view.faulted:
                return DeliveryDecision(
                    frozenset([victim]), frozenset(_row_pairs(view.sends, victim))
                )
        return EMPTY_DECISION


class RandomDropsOmission(Adversary):
    """Marks random victims faulty and drops each of their messages with fixed odds."""

    kind = "omission"

    def __init__(self, budget: int, drop_prob: float = 0.5):
        super().__init__(budget)
        self.drop_prob = drop_prob

    def reset(self, n, horizon, rng):
        self._rng = rng
        k = min(self.budget, n)
        self._victims = np.sort(rng.choice(n, size=k, replace=False)) if k else np.array([], int)
        self._starts = rng.integers(1, max(horizon // 2, 1) + 1, size=k)

    def decide(self, view):
        drops = []
        newly = []
        for victim, start in zip(self._victims, self._starts):
            if view.round_idx < start:
                continue
            victim = int(victim)
            if victim not in view.faulted:
                newly.append(victim)
            incident = _row_pairs(view.sends, victim) + _col_pairs(view.sends, victim)
            for pair in incident:
                if self._rng.random() < self.drop_prob:
                    drops.append(pair)
        if not drops and not newly:
            return EMPTY_DECISION
        return DeliveryDecision(frozenset(newly), frozenset(set(drops)))


class PartitionFlickerOmission(Adversary):
    """Drops everything crossing a victim cut, but only on alternating rounds."""

    kind = "omission"

    def reset(self, n, horizon, rng):
        k = min(self.budget, n)
        self._victims = np.sort(rng.choice(n, size=k, replace=False)) if k else np.array([], int)
        self._mask = np.zeros(n, dtype=bool)
        self._mask[self._victims] = True

    def decide(self, view):
        if self.budget == 0:
            return EMPTY_DECISION
        newly = frozenset(
            int(v) for v in self._victims if int(v) not in view.faulted
        ) if view.round_idx == 1 else frozenset()
        if view.round_idx % 2 == 1:  # deliver on odd rounds: non-monotone pattern
            return DeliveryDecision(newly, frozenset())
        cross = np.argwhere(view.sends & (self._mask[:, None] ^ self._mask[None, :]))
        drops = frozenset((int(u), int(v)) for u, v in cross)
        return DeliveryDecision(newly, drops)


class SilenceInboundOmission(Adversary):
    """Drops all messages into the victims; their outgoing messages still arrive."""

    kind = "omission"

    def reset(self, n, horizon, rng):
        k = min(self.budget, n)
        self._victims = np.sort(rng.choice(n, size=k, replace=False)) if k else np.array([], int)

    def decide(self, view):
        if self.budget == 0:
            return EMPTY_DECISION
        newly = frozenset(
            int(v) for v in self._victims if int(v) not in view.faulted
        ) if view.round_idx == 1 else frozenset()
        drops = []
        for v in self._victims:
            drops.extend(_col_pairs(view.sends, int(v)))
        return DeliveryDecision(newly, frozenset(drops))


class ScriptedCrash(Adversary):
    """Crash plan fixed up front: {round: [victims]}; crash-round sends all drop
    unless deliver_all is set."""

    kind = "crash"

    def __init__(self, plan: dict, deliver_all: bool = False):
        super().__init__(sum(len(v) for v in plan.values()))
        self.plan = {int(r): [int(x) for x in vs] for r, vs in plan.items()}
        self.deliver_all = deliver_all

    def decide(self, view):
        victims = self.plan.get(view.round_idx, [])
        if not victims:
            return EMPTY_DECISION
        drops = []
        if not self.deliver_all:
            for u in victims:
                drops.extend(_row_pairs(view.sends, u))
        return DeliveryDecision(frozenset(victims), frozenset(drops))


class ScriptedOmission(Adversary):
    """Omission plan fixed up front: victims plus {round: [(u, v) drops]}."""

    kind = "omission"

    def __init__(self, victims: Iterable[int], drops_by_round: dict):
        victims = sorted(int(v) for v in victims)
        super().__init__(len(victims))
        self.victims = victims
        self.drops_by_round = {
            int(r): [(int(u), int(v)) for u, v in ps] for r, ps in drops_by_round.items()
        }

    def decide(self, view):
        newly = frozenset(v for v in self.victims if v not in view.faulted) \
            if view.round_idx == 1 else frozenset()
        drops = frozenset(self.drops_by_round.get(view.round_idx, []))
        if not newly and not drops:
            return EMPTY_DECISION
        return DeliveryDecision(newly, drops)


CRASH_STRATEGIES = {
    "random": RandomCrash,
    "targeted_extreme": TargetedExtremeCrash,
    "eclipse": EclipseCrash,
}

OMISSION_STRATEGIES = {
    "random_drops": RandomDropsOmission,
    "partition_flicker": PartitionFlickerOmission,
    "silence_inbound": SilenceInboundOmission,
}


def crash_adversary(strategy: str, budget: int) -> Adversary:
    """Built-in crash strategies: random, targeted_extreme, eclipse."""
    try:
        return CRASH_STRATEGIES[strategy](budget)
    except KeyError:
        raise ValueError(f"unknown crash strategy {strategy!r}") from None


def omission_adversary(strategy: str, budget: int) -> Adversary:
    """Built-in omission strategies: random_drops, partition_flicker, silence_inbound."""
    try:
        return OMISSION_STRATEGIES[strategy](budget)
    except KeyError:
        raise ValueError(f"unknown omission strategy {strategy!r}") from None


@dataclass
class Metrics:
    rounds: int = 0
    messages_sent: int = 0
    messages_dropped: int = 0

    @property
    def bits(self) -> int:
        return WORD_BITS * self.messages_sent


def state_digest(parts: Iterable[bytes]) -> str:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(part)
    return h.hexdigest()


@dataclass
class TraceRound:
    round: int
    faulted: list
    messages_sent: int
    messages_dropped: int
    per_node_digest: str
    phase: str = ""
    senders: Optional[list] = None
    drops: Optional[list] = None
    loads: Optional[list] = None

    def to_record(self) -> dict:
        rec = {
            "round": self.round,
            "faulted": self.faulted,
            "messages_sent": self.messages_sent,
            "messages_dropped": self.messages_dropped,
            "per_node_digest": self.per_node_digest,
        }
        if self.phase:
            rec["phase"] = self.phase
        if self.senders is not None:
            rec["senders"] = self.senders
        if self.drops is not None:
            rec["drops"] = self.drops
        if self.loads is not None:
            rec["loads"] = self.loads
        return rec


@dataclass
class TraceData:
    """Round-by-round record of a run; JSON-lines on disk, header first."""

    header: dict = field(default_factory=dict)
    rounds: list = field(default_factory=list)

    def append(self, row: TraceRound) -> None:
        self.rounds.append(row)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"header": self.header}, sort_keys=True) + "\n")
            for row in self.rounds:
                fh.write(json.dumps(row.to_record(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TraceData":
        trace = cls()
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise TraceError("empty trace file")
        try:
            first = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise TraceError(f"bad JSON: {exc}", line=1) from None
        if "header" not in first:
            raise TraceError("first line must hold the header", line=1)
        trace.header = first["header"]
        budget = trace.header.get("budget")
        faulted: set = set()
        last_round = 0
        for lineno, raw in enumerate(lines[1:], start=2):
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise TraceError(f"bad JSON: {exc}", line=lineno) from None
            for key in ("round", "faulted", "messages_sent", "messages_dropped",
                        "per_node_digest"):
                if key not in rec:
                    raise TraceError(f"missing key {key!r}", line=lineno)
            if rec["round"] != last_round + 1:
                raise TraceError(
                    f"round {rec['round']} does not follow round {last_round}",
                    line=lineno,
                )
            last_round = rec["round"]
            faulted.update(rec["faulted"])
            if budget is not None and len(faulted) > budget:
                raise TraceError(
                    f"{len(faulted)} faulted nodes exceed budget {budget}", line=lineno
                )
            if rec["messages_dropped"] > rec["messages_sent"]:
                raise TraceError("more drops than sends", line=lineno)
            trace.rounds.append(
                TraceRound(
                    rec["round"], rec["faulted"], rec["messages_sent"],
                    rec["messages_dropped"], rec["per_node_digest"],
                    rec.get("phase", ""), rec.get("senders"), rec.get("drops"),
                    rec.get("loads"),
                )
            )
        return trace


def validate_decision(
    kind: str,
    budget: int,
    decision: DeliveryDecision,
    sends: np.ndarray,
    live: np.ndarray,
    faulted_before: frozenset,
) -> None:
    """Reject decisions outside the adversary contract; never silently clamp."""
    if decision is EMPTY_DECISION or (not decision.newly_faulted and not decision.drops):
        return
    if kind == "null":
        raise BudgetExceeded("null adversary may not fault or drop")
    newly = decision.newly_faulted
    for v in newly:
        if not (0 <= v < len(live)):
            raise BudgetExceeded(f"faulted node {v} out of range")
        if not live[v]:
            raise BudgetExceeded(f"node {v} faulted after crashing")
    total = len(faulted_before | newly)
    if total > budget:
        raise BudgetExceeded(f"{total} distinct faulted nodes exceed budget {budget}")
    faulted_now = faulted_before | newly
    for u, v in decision.drops:
        if not sends[u, v]:
            raise BudgetExceeded(f"drop ({u}, {v}) targets a message never sent")
        if kind == "crash":
            if u not in newly:
                raise BudgetExceeded(
                    f"crash drop ({u}, {v}) not from a node crashing this round"
                )
        else:
            if u not in faulted_now and v not in faulted_now:
                raise BudgetExceeded(f"omission drop ({u}, {v}) not incident to a fault")


class SimContext:
    """Shared bookkeeping for one run: streams, fault state, metrics, trace."""

    def __init__(
        self,
        n: int,
        seed: int,
        adversary: Optional[Adversary] = None,
        trace: Optional[TraceData] = None,
    ):
        self.n = n
        self.seed = seed
        seq = np.random.SeedSequence(entropy=seed)
        proto_ss, adv_ss, nodes_ss = seq.spawn(3)
        self.protocol_rng = np.random.default_rng(proto_ss)
        self.adversary_rng = np.random.default_rng(adv_ss)
        self._node_seeds = nodes_ss.spawn(n) if n else []
        self._node_rngs: dict[int, np.random.Generator] = {}
        self.adversary = adversary or NullAdversary()
        self.metrics = Metrics()
        self.trace = trace
        self.live = np.ones(n, dtype=bool)
        self.faulted: frozenset = frozenset()
        self.round_idx = 0
        self._began = False

    def node_rng(self, v: int) -> np.random.Generator:
        rng = self._node_rngs.get(v)
        if rng is None:
            rng = self._node_rngs[v] = np.random.default_rng(self._node_seeds[v])
        return rng

    def begin(self, horizon: int) -> None:
        if not self._began:
            self.adversary.reset(self.n, horizon, self.adversary_rng)
            self._began = True

    def decide(
        self,
        sends: np.ndarray,
        loads: Optional[np.ndarray] = None,
        graph: Optional[Graph] = None,
        phase: str = "",
    ) -> DeliveryDecision:
        """Run one adversary consultation for the current round and validate it."""
        view = AdversaryView(
            self.round_idx, self.n, sends, loads, self.live, self.faulted, graph, phase
        )
        decision = self.adversary.decide(view)
        validate_decision(
            self.adversary.kind, self.adversary.budget, decision, sends,
            self.live, self.faulted,
        )
        if decision.newly_faulted:
            self.faulted = self.faulted | decision.newly_faulted
            if self.adversary.kind == "crash":
                for v in decision.newly_faulted:
                    self.live[v] = False
        return decision


class RoundEngine:
    """Per-message reference engine running a step protocol on a Graph topology.

    Nodes address neighbors by local port index only (ports are positions in
    the sorted neighbor list); the engine owns the port-to-node mapping.
    """

    def __init__(
        self,
        graph: Graph,
        protocol,
        adversary: Optional[Adversary] = None,
        seed: int = 0,
        record_detail: bool = False,
        phase: str = "",
    ):
        self.graph = graph
        self.protocol = protocol
        self.ctx = SimContext(graph.n, seed, adversary, trace=TraceData())
        self.record_detail = record_detail
        self.phase = phase
        # port maps: port k at v leads to the k-th sorted neighbor
        self._port_of = [
            {int(u): k for k, u in enumerate(graph.adj[v])} for v in range(graph.n)
        ]
        self.states: list = []
        self.inboxes: list = [[] for _ in range(graph.n)]
        self.finished = False

    def _digest(self) -> str:
        digest = getattr(self.protocol, "digest", None)
        parts = []
        for v, state in enumerate(self.states):
            raw = digest(state) if digest else repr(state).encode()
            parts.append(v.to_bytes(4, "little"))
            parts.append(raw)
        return state_digest(parts)

    def run(self, rounds: int):
        if self.finished:
            raise RuntimeError("engine already finished")
        g, ctx, proto = self.graph, self.ctx, self.protocol
        n = g.n
        ctx.begin(rounds)
        self.states = [
            proto.init_state(v, len(g.adj[v]), ctx.node_rng(v)) for v in range(n)
        ]
        loads_fn = getattr(proto, "loads", None)
        for r in range(1, rounds + 1):
            ctx.round_idx = r
            sends = np.zeros((n, n), dtype=bool)
            outmsgs: list[OutMessage] = []
            for v in range(n):
                if not ctx.live[v]:
                    continue
                state, outbox = proto.step(v, r, self.states[v], self.inboxes[v], ctx.node_rng(v))
                self.states[v] = state
                for port, payload in outbox:
                    recv = int(g.adj[v][port])
                    outmsgs.append(OutMessage(v, port, payload))
                    sends[v, recv] = True
            loads = loads_fn(self.states) if loads_fn else None
            decision = ctx.decide(sends, loads, g, self.phase)
            next_inboxes: list = [[] for _ in range(n)]
            dropped = 0
            for msg in outmsgs:
                recv = int(g.adj[msg.sender][msg.port])
                if (msg.sender, recv) in decision.drops:
                    dropped += 1
                    continue
                if not ctx.live[recv]:
                    continue  # crashed nodes receive nothing
                next_inboxes[recv].append((self._port_of[recv][msg.sender], msg.payload))
            ctx.metrics.rounds += 1
            ctx.metrics.messages_sent += len(outmsgs)
            ctx.metrics.messages_dropped += dropped
            row = TraceRound(
                r, sorted(decision.newly_faulted), len(outmsgs), dropped,
                self._digest(), self.phase,
            )
            if self.record_detail:
                row.senders = sorted({m.sender for m in outmsgs})
                row.drops = sorted([u, v] for u, v in decision.drops)
            ctx.trace.append(row)
            self.inboxes = next_inboxes
        for v in range(n):
            if ctx.live[v]:
                self.states[v] = proto.finalize(v, self.states[v], self.inboxes[v], ctx.node_rng(v))
        self.finished = True
        return self.states
