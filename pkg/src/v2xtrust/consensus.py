"""Single-shot, semi-synchronous one-step Byzantine consensus on each
participant's sensing report, driven by a deterministic event scheduler
over a simulated lossy network.

A round has three phases: an authentication handshake (peer broadcasts
checked by every participant), a sensing exchange and an aggregate
exchange.  Each sender's slot is then decided independently: a value
carried by strictly more than ``(n + f) / 2`` aggregates is decided
outright, otherwise the slot is contested and resolved by the least
canonical hash among the received candidates.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np

from .auth import AuthAgent, verify_signature

log = logging.getLogger(__name__)

ABSENT = None  # decided "no report this round"


@dataclass(frozen=True)
class ConsensusConfig:
    round_period: float = 1.0
    sensing_timeout: float = 0.1
    aggregate_timeout: float = 0.1


# --------------------------------------------------------------------------
# scheduler and network


class EventScheduler:
    """Min-heap of (time, sequence) ordered callbacks; no wall clock."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self._q: list = []
        self._seq = 0

    def schedule(self, t: float, fn: Callable, *args) -> None:
        heapq.heappush(self._q, (t, self._seq, fn, args))
        self._seq += 1

    def run(self, until: float | None = None) -> None:
        while self._q:
            t, _, fn, args = self._q[0]
            if until is not None and t > until:
                break
            heapq.heappop(self._q)
            self.now = t
            fn(*args)


@dataclass(frozen=True)
class LinkModel:
    drop_probability: float = 0.0
    latency_min: float = 0.002
    latency_max: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        if not 0.0 <= self.latency_min <= self.latency_max:
            raise ValueError("latency bounds must satisfy 0 <= min <= max")


def network_deliver(msg: bytes, link: LinkModel, rng: np.random.Generator) -> float | None:
    """Delivery delay for one message, or None if the link drops it.

    Both random draws always happen so the stream stays aligned whatever
    the drop probability is.
    """
    u, lat = rng.random(), rng.uniform(link.latency_min, link.latency_max)
    if u < link.drop_probability:
        return None
    return float(lat)


class Network:
    def __init__(self, scheduler: EventScheduler, link: LinkModel, rng: np.random.Generator):
        self.scheduler = scheduler
        self.link = link
        self.rng = rng
        self.sent = 0
        self.dropped = 0

    def send(self, msg: bytes, t: float, deliver: Callable[[bytes, float], None]) -> bool:
        self.sent += 1
        delay = network_deliver(msg, self.link, self.rng)
        if delay is None:
            self.dropped += 1
            return False
        self.scheduler.schedule(t + delay, lambda: deliver(msg, t + delay))
        return True


# --------------------------------------------------------------------------
# messages


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sign_body(body: dict, agent: AuthAgent) -> bytes:
    b = canonical(body)
    return b + b"|" + agent.credential.keys.sign(b).hex().encode()


@lru_cache(maxsize=8192)
def split_signed(raw: bytes) -> tuple[bytes, bytes, dict]:
    """Body bytes, signature and parsed body.  Cached: callers must treat the
    returned dict as read-only."""
    b, _, sig = raw.rpartition(b"|")
    body = json.loads(b)
    if not isinstance(body, dict):
        raise ValueError("message body is not an object")
    return b, bytes.fromhex(sig.decode()), body


def message_hash(raw: bytes | None) -> str:
    if raw is None:
        return ""
    return hashlib.sha256(raw).hexdigest()


@dataclass(frozen=True)
class SensingMessage:
    """Decoded view of a signed sensing message."""

    sender: str
    round_num: int
    body: dict
    raw: bytes

    @property
    def observations(self) -> list:
        return self.body["obs"]

    @classmethod
    def parse(cls, raw: bytes) -> "SensingMessage":
        _, _, body = split_signed(raw)
        if body.get("type") != "sensing":
            raise ValueError("not a sensing message")
        return cls(body["sender"], int(body["round"]), body, raw)


@dataclass(frozen=True)
class AggregateMessage:
    sender: str
    round_num: int
    accumulated: dict[str, bytes]
    raw: bytes


@dataclass
class RoundDecision:
    round_num: int
    decided: dict[str, bytes | None]
    contested: dict[str, bool]
    support: dict[str, int] = field(default_factory=dict)
    missing: dict[str, int] = field(default_factory=dict)
    votes: dict[str, dict[str, str]] = field(default_factory=dict)
    decided_at: float = 0.0
    aggregates_used: int = 0

    def decided_hashes(self) -> dict[str, str]:
        return {s: message_hash(m) for s, m in sorted(self.decided.items())}

    def canonical_bytes(self) -> bytes:
        return canonical({s: (m.decode() if m is not None else None) for s, m in sorted(self.decided.items())})


# --------------------------------------------------------------------------
# round context and authentication gate


@dataclass
class RoundContext:
    round_num: int
    start: float
    registered: list[str]
    keys: dict[str, bytes]
    auth_rejects: list[tuple[str, str, str]] = field(default_factory=list)  # verifier, transport source, reason
    excluded: dict[str, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.registered)

    @property
    def f_max(self) -> int:
        return max(0, (self.n - 1) // 3)


class Behaviour:
    """Honest behaviour; Byzantine variants override the hooks."""

    def auth_out(self, node: "ConsensusNode", round_num: int) -> list[bytes]:
        return [node.agent.broadcast()]

    def sensing_out(self, node: "ConsensusNode", dst: str, msg: bytes) -> list[bytes]:
        return [msg]

    def aggregate_out(self, node: "ConsensusNode", dst: str, msg: bytes) -> list[bytes]:
        return [msg]

    def begin_round(self, node: "ConsensusNode", round_num: int, peers: list[str]) -> None:
        pass


class DropOnePacket(Behaviour):
    """Drops exactly one outgoing sensing packet per round."""

    def __init__(self, rng_for_round: Callable[[int], np.random.Generator]):
        self._rng = rng_for_round
        self.victim: str | None = None

    def begin_round(self, node, round_num, peers):
        others = [p for p in peers if p != node.id]
        self.victim = others[int(self._rng(round_num).integers(len(others)))] if others else None

    def sensing_out(self, node, dst, msg):
        return [] if dst == self.victim else [msg]


class RandomDrops(Behaviour):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p, self.rng = p, rng

    def sensing_out(self, node, dst, msg):
        return [] if self.rng.random() < self.p else [msg]

    def aggregate_out(self, node, dst, msg):
        return [] if self.rng.random() < self.p else [msg]


class TwoFaced(Behaviour):
    """Sends a doctored aggregate to every other peer: one slot stripped and
    its own slot replaced by a second, conflicting signed report."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._flip = False

    def aggregate_out(self, node, dst, msg):
        self._flip = not self._flip
        if self._flip:
            return [msg]
        _, _, body = split_signed(msg)
        acc = dict(body["acc"])
        victims = sorted(s for s in acc if s != node.id)
        if victims:
            acc.pop(victims[int(self.rng.integers(len(victims)))])
        alt = dict(node.own_body)
        alt["obs"] = [list(o) for o in alt["obs"]] + [[0.0, 0.0, 1.0, 0.0, 1.0, 0.25, "object"]]
        acc[node.id] = sign_body(alt, node.agent).decode()
        return [sign_body({**body, "acc": acc}, node.agent)]


class Replayer(Behaviour):
    """Re-sends another participant's handshake and sensing message captured
    in the previous round, in addition to its own."""

    def __init__(self, victim: str):
        self.victim = victim

    def auth_out(self, node, round_num):
        out = [node.agent.broadcast()]
        old = node.prev_seen_auth.get(self.victim)
        if old is not None:
            out.append(old)
        return out

    def sensing_out(self, node, dst, msg):
        old = node.prev_seen_sensing.get(self.victim)
        return [msg] + ([old] if old is not None and dst != self.victim else [])


def start_round(nodes: dict[str, "ConsensusNode"], round_num: int, now: float) -> RoundContext:
    """Authentication handshake for the in-area participants.

    Every participant checks every broadcast it receives; a transport source
    whose broadcasts a majority of verifiers reject is excluded from the
    round, as is any source that emitted a rejected broadcast.
    """
    ids = sorted(nodes)
    for pid in ids:
        nodes[pid].prev_seen_auth, nodes[pid].seen_auth = nodes[pid].seen_auth, {}
    outgoing = {pid: nodes[pid].behaviour.auth_out(nodes[pid], round_num) for pid in ids}
    ctx = RoundContext(round_num, now, [], {})
    accepted_keys: dict[str, bytes] = {}
    for src in ids:
        src_ok, src_bad = 0, 0
        key = None
        for raw in outgoing[src]:
            votes_ok, votes = 0, 0
            for ver in ids:
                if ver == src:
                    continue
                votes += 1
                nodes[ver].seen_auth.setdefault(src, raw)
                verdict = nodes[ver].agent.verifier.verify(raw, now)
                if verdict:
                    votes_ok += 1
                else:
                    ctx.auth_rejects.append((ver, src, verdict.reason))
            if votes == 0 or votes_ok * 2 > votes:
                src_ok += 1
                key = key or _public_from_broadcast(raw)
            else:
                src_bad += 1
        if src_bad:
            reasons = sorted({r for v, s, r in ctx.auth_rejects if s == src})
            ctx.excluded[src] = ",".join(reasons)
        elif src_ok and key is not None:
            accepted_keys[src] = key
    ctx.registered = sorted(accepted_keys)
    ctx.keys = accepted_keys
    return ctx


def _public_from_broadcast(raw: bytes) -> bytes:
    from .auth import PeerBroadcast

    return PeerBroadcast.from_bytes(raw).public


# --------------------------------------------------------------------------
# validation shared by nodes and the standalone phase functions


def validate_sensing(raw: bytes, ctx: RoundContext, src: str | None = None) -> SensingMessage | None:
    try:
        body_bytes, sig, body = split_signed(raw)
    except (ValueError, UnicodeDecodeError, json.JSONDecodeError):
        return None
    if body.get("type") != "sensing":
        return None
    sender = body.get("sender")
    if sender not in ctx.keys or (src is not None and sender != src):
        return None
    if int(body.get("round", -1)) != ctx.round_num:
        return None
    if not verify_signature(ctx.keys[sender], body_bytes, sig):
        return None
    return SensingMessage(sender, ctx.round_num, body, raw)


def validate_aggregate(raw: bytes, ctx: RoundContext, src: str | None = None) -> tuple[AggregateMessage | None, int]:
    """Return the aggregate with invalid inner entries stripped, plus the
    number of stripped entries."""
    try:
        body_bytes, sig, body = split_signed(raw)
    except (ValueError, UnicodeDecodeError, json.JSONDecodeError):
        return None, 0
    if body.get("type") != "aggregate":
        return None, 0
    sender = body.get("sender")
    if sender not in ctx.keys or (src is not None and sender != src):
        return None, 0
    if int(body.get("round", -1)) != ctx.round_num:
        return None, 0
    if not verify_signature(ctx.keys[sender], body_bytes, sig):
        return None, 0
    acc, stripped = {}, 0
    for slot, inner in sorted(body.get("acc", {}).items()):
        m = validate_sensing(inner.encode(), ctx)
        if m is None or m.sender != slot:
            stripped += 1
            continue
        acc[slot] = m.raw
    return AggregateMessage(sender, ctx.round_num, acc, raw), stripped


@dataclass
class PhaseResult:
    accepted: dict
    late: int = 0
    rejected: int = 0
    duplicates: int = 0
    finished_at: float = 0.0


def collect_sensing(ctx: RoundContext, incoming: Iterable[tuple[float, str, bytes]], timeout: float, own: SensingMessage | None = None) -> PhaseResult:
    """Accumulate sensing messages until one per registered participant has
    arrived or the timeout expires.  ``incoming`` yields (time, transport
    source, bytes)."""
    res = PhaseResult({} if own is None else {own.sender: own})
    deadline = ctx.start + timeout
    res.finished_at = deadline
    done = False
    for t, src, raw in sorted(incoming, key=lambda e: e[0]):
        if done or t > deadline:
            res.late += 1
            continue
        m = validate_sensing(raw, ctx, src)
        if m is None:
            res.rejected += 1
        elif m.sender in res.accepted:
            res.duplicates += 1
        else:
            res.accepted[m.sender] = m
        if len(res.accepted) == ctx.n:
            done, res.finished_at = True, t
    return res


def exchange_aggregates(
    ctx: RoundContext, own: AggregateMessage | None, incoming: Iterable[tuple[float, str, bytes]], start: float, timeout: float
) -> PhaseResult:
    res = PhaseResult({} if own is None else {own.sender: own})
    deadline = start + timeout
    res.finished_at = deadline
    done = False
    for t, src, raw in sorted(incoming, key=lambda e: e[0]):
        if done or t > deadline:
            res.late += 1
            continue
        agg, _ = validate_aggregate(raw, ctx, src)
        if agg is None:
            res.rejected += 1
        elif agg.sender in res.accepted:
            res.duplicates += 1
        else:
            res.accepted[agg.sender] = agg
        if len(res.accepted) == ctx.n:
            done, res.finished_at = True, t
    return res


def bosco_decide(ctx: RoundContext, aggregates: dict[str, AggregateMessage], own_sensing: dict[str, SensingMessage] | None = None) -> RoundDecision:
    """One-step decision per sender slot.

    Absence from an aggregate counts as a vote for "no report".  A slot's
    owner does not vote on its own slot: a faulty owner could otherwise
    present different votes to different peers.  A value (or absence)
    held by strictly more than (n + f) / 2 aggregates is decided;
    otherwise the slot is contested and the least SHA-256 among received
    candidates wins.
    """
    n, f = ctx.n, ctx.f_max
    dec = RoundDecision(ctx.round_num, {}, {}, aggregates_used=len(aggregates))
    if not aggregates:
        own = own_sensing or {}
        for slot in ctx.registered:
            dec.decided[slot] = own[slot].raw if slot in own else ABSENT
            dec.contested[slot] = True
        return dec
    threshold = (n + f) / 2
    for slot in ctx.registered:
        counts: Counter = Counter()
        for sender, agg in aggregates.items():
            if sender != slot:
                counts[agg.accumulated.get(slot, ABSENT)] += 1
        if not counts:
            own = (own_sensing or {}).get(slot)
            dec.decided[slot] = own.raw if own is not None else ABSENT
            dec.contested[slot] = True
            dec.missing[slot] = dec.support[slot] = 0
            continue
        value, c = max(counts.items(), key=lambda kv: (kv[1], message_hash(kv[0])))
        dec.missing[slot] = counts.get(ABSENT, 0)
        dec.support[slot] = c if value is not ABSENT else 0
        if c > threshold:
            dec.decided[slot] = value
            dec.contested[slot] = False
        else:
            cands = [v for v in counts if v is not ABSENT]
            dec.decided[slot] = min(cands, key=message_hash) if cands else ABSENT
            dec.contested[slot] = True
    return dec


# --------------------------------------------------------------------------
# participant state machine


class ConsensusNode:
    def __init__(self, pid: str, agent: AuthAgent, behaviour: Behaviour | None = None):
        self.id = pid
        self.agent = agent
        self.behaviour = behaviour or Behaviour()
        self.seen_auth: dict[str, bytes] = {}
        self.prev_seen_auth: dict[str, bytes] = {}
        self.seen_sensing: dict[str, bytes] = {}
        self.prev_seen_sensing: dict[str, bytes] = {}
        self.own_body: dict = {}
        self._reset()

    def _reset(self):
        self.phase = "idle"
        self.sensing: dict[str, SensingMessage] = {}
        self.aggregates: dict[str, AggregateMessage] = {}
        self.early_aggregates: list[tuple[bytes, str]] = []
        self.decision: RoundDecision | None = None
        self.late = 0
        self.rejected = 0
        self.stripped = 0

    # round driver hooks -------------------------------------------------
    def begin(self, ctx: RoundContext, body: dict, net: Network, nodes: dict[str, "ConsensusNode"], cfg: ConsensusConfig):
        self._reset()
        self.ctx, self.net, self.nodes, self.cfg = ctx, net, nodes, cfg
        self.prev_seen_sensing, self.seen_sensing = self.seen_sensing, {}
        self.own_body = body
        self.phase = "sensing"
        raw = sign_body(body, self.agent)
        peers = sorted(nodes)
        self.behaviour.begin_round(self, ctx.round_num, peers)
        if self.id in ctx.keys:
            own = validate_sensing(raw, ctx, self.id)
            if own is not None:
                self.sensing[self.id] = own
        t = ctx.start
        for dst in peers:
            if dst == self.id:
                continue
            for out in self.behaviour.sensing_out(self, dst, raw):
                net.send(out, t, self._deliver_to(dst, "sensing"))
        if self.id in ctx.keys:
            net.scheduler.schedule(ctx.start + cfg.sensing_timeout, self._sensing_timeout)

    def _deliver_to(self, dst: str, kind: str):
        src = self.id
        target = self.nodes[dst]
        if kind == "sensing":
            return lambda raw, t: target.on_sensing(raw, src, t)
        return lambda raw, t: target.on_aggregate(raw, src, t)

    def on_sensing(self, raw: bytes, src: str, t: float) -> None:
        if self.id not in self.ctx.keys:
            return
        self.seen_sensing.setdefault(src, raw)
        if self.phase != "sensing":
            self.late += 1
            log.debug("%s: late sensing message from %s", self.id, src)
            return
        m = validate_sensing(raw, self.ctx, src)
        if m is None:
            self.rejected += 1
            return
        if m.sender in self.sensing:
            return
        self.sensing[m.sender] = m
        if len(self.sensing) == self.ctx.n:
            self._finish_sensing(t)

    def _sensing_timeout(self) -> None:
        if self.phase == "sensing":
            self._finish_sensing(self.net.scheduler.now)

    def _finish_sensing(self, t: float) -> None:
        self.phase = "aggregate"
        self.sensing_done = t
        acc = {s: m.raw.decode() for s, m in sorted(self.sensing.items())}
        raw = sign_body({"type": "aggregate", "sender": self.id, "round": self.ctx.round_num, "acc": acc}, self.agent)
        own, _ = validate_aggregate(raw, self.ctx, self.id)
        if own is not None:
            self.aggregates[self.id] = own
        for dst in sorted(self.nodes):
            if dst == self.id or dst not in self.ctx.keys:
                continue
            for out in self.behaviour.aggregate_out(self, dst, raw):
                self.net.send(out, t, self._deliver_to(dst, "aggregate"))
        pending, self.early_aggregates = self.early_aggregates, []
        for r, s in pending:
            self._accept_aggregate(r, s, t)
        # common deadline: every honest aggregate is out by start + sensing_timeout
        deadline = self.ctx.start + self.cfg.sensing_timeout + self.cfg.aggregate_timeout
        self.net.scheduler.schedule(max(t, deadline), self._aggregate_timeout)
        if len(self.aggregates) == self.ctx.n:
            self._decide(t)

    def on_aggregate(self, raw: bytes, src: str, t: float) -> None:
        if self.phase == "sensing":
            self.early_aggregates.append((raw, src))
            return
        if self.phase != "aggregate":
            self.late += 1
            return
        self._accept_aggregate(raw, src, t)

    def _accept_aggregate(self, raw: bytes, src: str, t: float) -> None:
        if self.phase != "aggregate":
            return
        agg, stripped = validate_aggregate(raw, self.ctx, src)
        self.stripped += stripped
        if agg is None:
            self.rejected += 1
            return
        if agg.sender in self.aggregates:
            return
        self.aggregates[agg.sender] = agg
        if len(self.aggregates) == self.ctx.n:
            self._decide(t)

    def _aggregate_timeout(self) -> None:
        if self.phase == "aggregate":
            self._decide(self.net.scheduler.now)

    def _decide(self, t: float) -> None:
        self.phase = "decided"
        self.decision = bosco_decide(self.ctx, self.aggregates, self.sensing)
        self.decision.decided_at = t


@dataclass
class RoundOutcome:
    ctx: RoundContext
    decisions: dict[str, RoundDecision]
    late: int
    rejected: int
    network_dropped: int


def run_consensus_round(
    nodes: dict[str, ConsensusNode],
    bodies: dict[str, dict],
    round_num: int,
    now: float,
    link: LinkModel,
    rng: np.random.Generator,
    cfg: ConsensusConfig = ConsensusConfig(),
) -> RoundOutcome:
    """Run handshake, sensing and aggregate exchange, and decision for one
    round; returns every registered node's decision."""
    ctx = start_round(nodes, round_num, now)
    sched = EventScheduler(now)
    net = Network(sched, link, rng)
    for pid in sorted(nodes):
        nodes[pid].begin(ctx, bodies[pid], net, nodes, cfg)
    sched.run()
    decisions = {}
    for pid in ctx.registered:
        node = nodes[pid]
        if node.decision is None:  # zero registered peers responded at all
            node._decide(sched.now)
        decisions[pid] = node.decision
    votes = {pid: d.decided_hashes() for pid, d in decisions.items()}
    for d in decisions.values():
        d.votes = votes
    late = sum(n.late for n in nodes.values())
    rejected = sum(n.rejected for n in nodes.values())
    return RoundOutcome(ctx, decisions, late, rejected, net.dropped)


class DecisionLog:
    """Newline-delimited JSON, one record per round."""

    SCHEMA = 1

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def append(self, decision: RoundDecision, participant_view: str) -> None:
        rec = {
            "schema": self.SCHEMA,
            "round": decision.round_num,
            "view": participant_view,
            "decided": decision.decided_hashes(),
            "contested": {s: decision.contested[s] for s in sorted(decision.contested)},
            "votes": decision.votes,
        }
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()
