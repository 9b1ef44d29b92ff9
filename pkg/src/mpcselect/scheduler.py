"""Operator-DAG scheduling of batched MPC work.

The trace of a selection run becomes a DAG: per-batch forward chains are
independent, comparison partitions act as phase-level barriers.  Two cost
reductions are modeled.  Coalescing merges latency-bound operations that sit
at the same position of different batches into one exchange (rounds take the
max, bytes add up, so byte totals are invariant).  Overlap runs each node's
local computation on the parties' compute resources while the channel is
busy with other nodes' communication, hiding rounds behind data transfer.

The simulator dispatches ready nodes first-in-first-out per resource, is
fully deterministic, and respects a cap on concurrently live intermediate
bytes.
"""

import heapq
from dataclasses import dataclass, field, replace

from .transport import NetworkModel, simulated_time

LATENCY_BOUND_BYTES_PER_ROUND = 4096


@dataclass(frozen=True)
class ComputeModel:
    """Local share-arithmetic throughput per party, flops/second."""

    flops_per_second: float = 2e9

    def __post_init__(self):
        if self.flops_per_second <= 0:
            raise ValueError("compute rate must be > 0")


@dataclass
class OpNode:
    uid: int
    tag: str
    rounds: int
    bytes: int
    wire_bytes: int
    flops: float
    chain: tuple  # (phase, kind, batch-or-unit): nodes in one chain run in order
    pos: int  # position within the chain; coalescing merges equal (tag, pos)
    deps: set = field(default_factory=set)
    mem_bytes: int = 0

    def classify(self, threshold: float = LATENCY_BOUND_BYTES_PER_ROUND) -> str:
        if self.rounds == 0:
            return "compute"
        if self.bytes / self.rounds < threshold:
            return "latency_bound"
        return "bandwidth_bound"

    @property
    def op_class(self) -> str:
        return self.classify()


@dataclass
class Dag:
    nodes: dict

    def __len__(self):
        return len(self.nodes)

    def total_bytes(self) -> int:
        return sum(n.bytes for n in self.nodes.values())

    def total_rounds(self) -> int:
        return sum(n.rounds for n in self.nodes.values())

    def check_acyclic(self):
        order = topo_order(self)
        if len(order) != len(self.nodes):
            raise ValueError("DAG has a cycle")
        return order


def topo_order(dag: Dag) -> list:
    indeg = {u: len(n.deps) for u, n in dag.nodes.items()}
    ready = sorted(u for u, d in indeg.items() if d == 0)
    heapq.heapify(ready)
    out = []
    succs = {u: [] for u in dag.nodes}
    for u, n in dag.nodes.items():
        for d in n.deps:
            succs[d].append(u)
    while ready:
        u = heapq.heappop(ready)
        out.append(u)
        for v in succs[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    return out


@dataclass(frozen=True)
class OpStep:
    """One operation of a per-batch forward plan."""

    tag: str
    rounds: int
    bytes: int
    wire_bytes: int = 0
    flops: float = 0.0
    mem_bytes: int = 0


def build_dag(plan: list, batches: int) -> Dag:
    """Independent chains: every batch executes the same op sequence."""
    if not plan:
        raise ValueError("empty forward plan")
    nodes = {}
    uid = 0
    for b in range(batches):
        prev = None
        for pos, step in enumerate(plan):
            n = OpNode(
                uid=uid,
                tag=step.tag,
                rounds=step.rounds,
                bytes=step.bytes,
                wire_bytes=step.wire_bytes or step.bytes,
                flops=step.flops,
                chain=(0, "fwd", b),
                pos=pos,
                deps=set() if prev is None else {prev},
                mem_bytes=step.mem_bytes or step.bytes,
            )
            nodes[uid] = n
            prev = uid
            uid += 1
    return Dag(nodes)


def dag_from_trace(events) -> Dag:
    """Build the selection-run DAG from ledger trace events.

    Pass 1 collects nodes: consecutive events of one forward chain and tag
    merge; a comparison event with units > 1 (one batched partition) splits
    into that many parallel unit nodes.  Pass 2 wires dependencies: forward
    chains of a phase run independently, a phase's first comparison
    partition waits on all of its forward chains, partitions chain, and each
    phase waits on its predecessor's last stage.
    """
    fwd_chains: dict = {}  # (phase, batch) -> [node]
    cmp_parts: dict = {}  # phase -> {partition -> [unit nodes]}
    tail_chain: list = []  # untagged events, sequential
    phase_order: list = []
    uid = 0

    def new_node(tag, rounds, nbytes, wire, flops, chain, pos):
        nonlocal uid
        n = OpNode(uid, tag, rounds, nbytes, wire, flops, chain, pos, set(), nbytes)
        uid += 1
        return n

    for ev in events:
        if ev.rounds == 0 and ev.bytes == 0 and ev.flops == 0:
            continue
        group = ev.group if ev.group else (None, "global", 0)
        phase, kind = group[0], group[1]
        if kind in ("fwd", "cmp") and phase not in phase_order:
            phase_order.append(phase)
        if kind == "fwd":
            chain = fwd_chains.setdefault((phase, group[2]), [])
            if chain and chain[-1].tag == ev.tag and ev.units == 1:
                t = chain[-1]
                t.rounds += ev.rounds
                t.bytes += ev.bytes
                t.wire_bytes += ev.wire_bytes
                t.flops += ev.flops
                t.mem_bytes += ev.bytes
            else:
                chain.append(
                    new_node(ev.tag, ev.rounds, ev.bytes, ev.wire_bytes, ev.flops,
                             (phase, "fwd", group[2]), len(chain))
                )
        elif kind == "cmp":
            units = max(1, ev.units)
            part = cmp_parts.setdefault(phase, {}).setdefault(group[2], [])
            for u in range(units):
                part.append(
                    new_node(ev.tag, ev.rounds // units, ev.bytes // units,
                             ev.wire_bytes // units, ev.flops / units,
                             (phase, "cmp", len(part)), group[2])
                )
        else:
            tail_chain.append(
                new_node(ev.tag, ev.rounds, ev.bytes, ev.wire_bytes, ev.flops,
                         (None, "global", 0), len(tail_chain))
            )

    nodes = {}
    prev_stage: set = set()  # uids the next phase must wait for
    for phase in phase_order:
        heads_deps = set(prev_stage)
        fwd_tails = set()
        for (ph, b), chain in sorted(fwd_chains.items()):
            if ph != phase:
                continue
            prev = None
            for n in chain:
                n.deps = set(heads_deps) if prev is None else {prev.uid}
                nodes[n.uid] = n
                prev = n
            if prev is not None:
                fwd_tails.add(prev.uid)
        stage = fwd_tails or prev_stage
        for partition in sorted(cmp_parts.get(phase, {})):
            units = cmp_parts[phase][partition]
            for n in units:
                n.deps = set(stage)
                nodes[n.uid] = n
            stage = {n.uid for n in units}
        prev_stage = stage
    prev = None
    for n in tail_chain:
        n.deps = set(prev_stage) if prev is None else {prev.uid}
        nodes[n.uid] = n
        prev = n
    return Dag(nodes)


def coalesce(dag: Dag, window: int, threshold: float = LATENCY_BOUND_BYTES_PER_ROUND) -> Dag:
    """Merge latency-bound nodes at equal (tag, pos) across up to `window`
    chains: rounds take the max, bytes and flops add, deps union.

    Byte totals are exactly preserved; only round counts shrink.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return Dag(dict(dag.nodes))
    groups = {}
    for uid, n in sorted(dag.nodes.items()):
        if n.classify(threshold) == "latency_bound":
            key = (n.chain[0], n.chain[1], n.pos, n.tag)
            groups.setdefault(key, []).append(uid)
    merged_into = {}
    new_nodes = {uid: replace(n, deps=set(n.deps)) for uid, n in dag.nodes.items()}
    for key, members in groups.items():
        for lo in range(0, len(members), window):
            chunk = members[lo : lo + window]
            if len(chunk) < 2:
                continue
            head = new_nodes[chunk[0]]
            for uid in chunk[1:]:
                n = new_nodes.pop(uid)
                head.rounds = max(head.rounds, n.rounds)
                head.bytes += n.bytes
                head.wire_bytes += n.wire_bytes
                head.flops += n.flops
                head.mem_bytes += n.mem_bytes
                head.deps |= n.deps
                merged_into[uid] = chunk[0]
    # rewire deps and drop self-references introduced by merging
    def resolve(u):
        while u in merged_into:
            u = merged_into[u]
        return u

    for n in new_nodes.values():
        n.deps = {resolve(d) for d in n.deps} - {n.uid}
    return Dag(new_nodes)


@dataclass
class Interval:
    resource: str
    start: float
    end: float
    tag: str


@dataclass
class Timeline:
    makespan: float
    intervals: list
    peak_mem: int = 0

    def utilization(self, resource: str) -> float:
        busy = sum(i.end - i.start for i in self.intervals if i.resource == resource)
        return busy / self.makespan if self.makespan > 0 else 0.0

    def export(self) -> str:
        lines = ["resource\tstart\tend\ttag"]
        for i in sorted(self.intervals, key=lambda i: (i.start, i.resource)):
            lines.append(f"{i.resource}\t{i.start:.6f}\t{i.end:.6f}\t{i.tag}")
        lines.append(f"makespan\t0.000000\t{self.makespan:.6f}\t-")
        return "\n".join(lines)


def simulate(
    dag: Dag,
    network: NetworkModel,
    compute: ComputeModel = ComputeModel(),
    mem_cap: int | None = None,
) -> Timeline:
    """List-schedule the DAG on (compute0, compute1, channel).

    A node computes on both parties in lockstep, then its exchange occupies
    the channel; ready nodes dispatch first-in-first-out (ready time, then
    node id), no preemption.  Later nodes' compute overlaps earlier nodes'
    communication.  A node that would push the concurrently live bytes over
    the memory cap waits for releases before starting.
    """
    dag.check_acyclic()
    if mem_cap is not None:
        worst = max((n.mem_bytes for n in dag.nodes.values()), default=0)
        if worst > mem_cap:
            raise ValueError(f"memory cap {mem_cap} below largest node ({worst} bytes)")
    succs = {u: [] for u in dag.nodes}
    missing = {}
    ready = []
    for uid, n in sorted(dag.nodes.items()):
        missing[uid] = len(n.deps)
        for d in n.deps:
            succs[d].append(uid)
        if not n.deps:
            heapq.heappush(ready, (0.0, uid))
    finish = {}
    intervals = []
    compute_free = 0.0
    channel_free = 0.0
    releases = []  # (finish_time, mem_bytes)
    live_mem = 0
    peak_mem = 0
    while ready:
        ready_t, uid = heapq.heappop(ready)
        n = dag.nodes[uid]
        start_c = max(ready_t, compute_free)
        if mem_cap is not None:
            while releases and releases[0][0] <= start_c:
                live_mem -= heapq.heappop(releases)[1]
            while live_mem + n.mem_bytes > mem_cap:
                if not releases:
                    raise RuntimeError("scheduler deadlocked under the memory cap")
                t_rel, m = heapq.heappop(releases)
                live_mem -= m
                start_c = max(start_c, t_rel)
        ct = n.flops / compute.flops_per_second
        end_c = start_c + ct
        if ct > 0:
            intervals.append(Interval("compute0", start_c, end_c, n.tag))
            intervals.append(Interval("compute1", start_c, end_c, n.tag))
            compute_free = end_c
        if n.rounds > 0 or n.wire_bytes > 0:
            start_m = max(end_c, channel_free)
            end_m = start_m + simulated_time(n.rounds, n.wire_bytes, network)
            channel_free = end_m
            intervals.append(Interval("channel", start_m, end_m, n.tag))
        else:
            end_m = end_c
        finish[uid] = end_m
        if mem_cap is not None:
            live_mem += n.mem_bytes
            peak_mem = max(peak_mem, live_mem)
            heapq.heappush(releases, (end_m, n.mem_bytes))
        for v in succs[uid]:
            missing[v] -= 1
            if missing[v] == 0:
                heapq.heappush(ready, (max(finish[d] for d in dag.nodes[v].deps), v))
    makespan = max(finish.values(), default=0.0)
    return Timeline(makespan, intervals, peak_mem)


def sequential_baseline(
    dag: Dag, network: NetworkModel, compute: ComputeModel = ComputeModel()
) -> Timeline:
    """Topological execution with zero overlap: the unscheduled reference."""
    order = dag.check_acyclic()
    t = 0.0
    intervals = []
    for uid in order:
        n = dag.nodes[uid]
        ct = n.flops / compute.flops_per_second
        if ct > 0:
            intervals.append(Interval("compute0", t, t + ct, n.tag))
            intervals.append(Interval("compute1", t, t + ct, n.tag))
        t += ct
        mt = simulated_time(n.rounds, n.wire_bytes, network) if (n.rounds or n.wire_bytes) else 0.0
        if mt > 0:
            intervals.append(Interval("channel", t, t + mt, n.tag))
        t += mt
    return Timeline(t, intervals)
