"""Discrete-event simulation of the module-server pipeline runtime.

Every pipeline rank runs a server over an input queue. Executing a module
means spending its own compute time, then walking its children in execution
order: locally-owned children run inline in the same worker, remote children
become requests that park the worker until the response returns. Rank 0
drives the schedule by injecting top-level step requests (one forward and
one backward per microbatch) according to the simple or interleaved policy.

Static mode records step traces and replays the best one without metadata
rounds; fast mode additionally rewires child->parent->child tensor round
trips into direct producer->consumer relays.
"""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass, field

from .comm import ClusterShape, D2DBuffers, TensorDesc, route, transfer_time
from .model_graph import CostedTree
from .partition import Assignment
from .topology import Topology

FWD = "forward"
BWD = "backward"

PENDING = "PENDING"
IDLE = "IDLE"
EXECUTING = "EXECUTING"


class PipelineError(RuntimeError):
    pass


class PipelineDeadlock(PipelineError):
    def __init__(self, msg: str, snapshot: dict):
        super().__init__(msg + "\n" + _format_snapshot(snapshot))
        self.snapshot = snapshot


class StaticModeViolation(PipelineError):
    pass


def _format_snapshot(snapshot: dict) -> str:
    lines = []
    for rank in sorted(snapshot):
        entry = snapshot[rank]
        lines.append(f"  rank {rank}: queued={entry['queued']} "
                     f"parked={entry['parked']}")
    return "\n".join(lines)


@dataclass(frozen=True)
class PipelineMessage:
    """Wire record for one request or response between pipeline ranks."""
    kind: str                              # "request" | "response"
    request_id: int
    module_id: str
    seq_range: tuple[int, int] | None
    direction: str
    payload: tuple[TensorDesc, ...]
    microbatch: int
    requester: int                         # pp_rank making the request
    location: tuple[str, ...]              # path from the root module
    autocast: bool = False
    grad_enabled: bool = True
    checkpoint_enabled: bool = False


@dataclass(frozen=True)
class TimelineEvent:
    pp_rank: int
    microbatch: int
    module: str
    direction: str
    kind: str                              # "compute" | "comm"
    t_start: float
    t_end: float


@dataclass
class Timeline:
    events: list[TimelineEvent]
    makespan: float

    def compute_events(self, pp_rank: int | None = None) -> list[TimelineEvent]:
        return [e for e in self.events if e.kind == "compute"
                and (pp_rank is None or e.pp_rank == pp_rank)]


@dataclass(frozen=True)
class SchedulePolicy:
    kind: str = "interleaved"              # "simple" | "interleaved"
    microbatches: int = 1
    forward_only: bool = False

    def __post_init__(self):
        if self.kind not in ("simple", "interleaved"):
            raise ValueError(f"unknown pipeline policy {self.kind!r}")
        if self.microbatches < 1:
            raise ValueError("microbatch count must be >= 1")


@dataclass(frozen=True)
class Modes:
    static: bool = False
    fast: bool = False

    def __post_init__(self):
        if self.fast and not self.static:
            raise ValueError("fast mode requires static mode")


@dataclass(frozen=True)
class CostParams:
    bwd_factor: float = 2.0
    # extra backward seconds per module (activation recompute billing)
    recompute_seconds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bwd_factor < 0:
            raise ValueError("bwd_factor must be >= 0")


@dataclass
class SchedulerState:
    microbatches: int
    issued_fwd: int = 0
    completed_fwd: set[int] = field(default_factory=set)
    issued_bwd: set[int] = field(default_factory=set)
    completed_bwd: int = 0


def ready_backwards(state: SchedulerState) -> list[int]:
    return sorted(m for m in state.completed_fwd if m not in state.issued_bwd)


def next_action(policy: SchedulePolicy,
                state: SchedulerState) -> tuple[int, str] | None:
    """Next (microbatch, direction) to issue at rank 0, or None to wait.

    Simple: forwards 0..M-1 in order, then backwards in order (each gated on
    its own forward completion). Interleaved: a backward-ready microbatch
    always wins over the next forward.
    """
    M = policy.microbatches
    ready = ready_backwards(state)
    if policy.kind == "interleaved":
        if not policy.forward_only and ready:
            return (ready[0], BWD)
        if state.issued_fwd < M:
            return (state.issued_fwd, FWD)
        return None
    if state.issued_fwd < M:
        return (state.issued_fwd, FWD)
    if policy.forward_only:
        return None
    nb = len(state.issued_bwd)
    if nb < M and nb in state.completed_fwd:
        return (nb, BWD)
    return None


@dataclass
class MessageCounts:
    requests: int = 0
    responses: int = 0
    metadata_rounds: int = 0
    tensor_hops: int = 0
    tensor_hops_fwd: int = 0
    tensor_hops_bwd: int = 0

    def to_dict(self) -> dict:
        return {
            "requests": self.requests,
            "responses": self.responses,
            "metadata_rounds": self.metadata_rounds,
            "tensor_hops": self.tensor_hops,
            "by_direction": {"forward": self.tensor_hops_fwd,
                             "backward": self.tensor_hops_bwd},
        }


@dataclass(frozen=True)
class FlowRecord:
    """Producer-consumer record: one container's child executions."""
    parent_module: str
    parent_rank: int
    microbatch: int
    direction: str
    children: tuple[tuple[str, int], ...]   # (module id, owner pp_rank)


@dataclass
class StepTrace:
    timeline: Timeline
    makespan: float
    counts: MessageCounts
    decision_log: list[dict]
    server_orders: dict[int, list[tuple]]
    flows: list[FlowRecord]
    busy_fraction: list[float]
    is_replay: bool
    compute_multiset: Counter

    def request_multiset(self) -> Counter:
        out: Counter = Counter()
        for rank, order in sorted(self.server_orders.items()):
            for key in order:
                out[(rank,) + key] += 1
        return out


@dataclass(frozen=True)
class ReplayOrder:
    source_step: int
    makespan: float
    server_orders: dict[int, list[tuple]]


def record_and_replay(history: list[StepTrace]) -> ReplayOrder:
    """Select the replay task order from recorded step traces.

    All traces must carry the identical request multiset (a difference means
    the step had conditional execution, which static mode forbids); the trace
    with the smallest makespan wins, earliest on ties.
    """
    if not history:
        raise ValueError("need at least one recorded step")
    ref = history[0].request_multiset()
    for i, trace in enumerate(history[1:], start=1):
        cur = trace.request_multiset()
        if cur != ref:
            diff = (cur - ref) + (ref - cur)
            culprit = sorted(diff)[0]
            raise StaticModeViolation(
                f"static-mode violation: step {i} diverges from step 0 on "
                f"request {culprit!r} (conditional execution detected)")
    best = min(range(len(history)), key=lambda i: (history[i].makespan, i))
    return ReplayOrder(source_step=best,
                       makespan=history[best].makespan,
                       server_orders=history[best].server_orders)


@dataclass(frozen=True)
class FastReroute:
    parent_module: str
    microbatch: int
    direction: str
    tensor_index: int
    src_rank: int
    dst_rank: int
    baseline_hops: int
    fast_hops: int


@dataclass
class FastModePlan:
    reroutes: list[FastReroute]
    baseline_hops: dict[str, int]
    fast_hops: dict[str, int]

    def total_baseline(self) -> int:
        return sum(self.baseline_hops.values())

    def total_fast(self) -> int:
        return sum(self.fast_hops.values())


def apply_fast_mode(trace: StepTrace) -> FastModePlan:
    """Rewire child->parent->child round trips into direct transfers.

    Works over the producer-consumer flows of a recorded step: the tensor
    between two consecutive children travels through the parent rank in the
    baseline (up to 2 hops) and directly between producer and consumer ranks
    afterwards (1 hop, or 0 when they share a rank).
    """
    reroutes: list[FastReroute] = []
    baseline = {FWD: 0, BWD: 0}
    fast = {FWD: 0, BWD: 0}
    for flow in trace.flows:
        owners = [r for _, r in flow.children]
        n = len(owners)
        parent = flow.parent_rank
        for i in range(n + 1):
            src = parent if i == 0 else owners[i - 1]
            dst = parent if i == n else owners[i]
            if i == 0 or i == n:
                base = 1 if src != dst else 0
            else:
                base = (1 if src != parent else 0) + (1 if parent != dst else 0)
            direct = 1 if src != dst else 0
            baseline[flow.direction] += base
            fast[flow.direction] += direct
            if base != direct:
                reroutes.append(FastReroute(
                    parent_module=flow.parent_module,
                    microbatch=flow.microbatch,
                    direction=flow.direction,
                    tensor_index=i,
                    src_rank=src,
                    dst_rank=dst,
                    baseline_hops=base,
                    fast_hops=direct,
                ))
    return FastModePlan(reroutes=reroutes, baseline_hops=baseline,
                        fast_hops=fast)


# ---------------------------------------------------------------------------
# engine internals


@dataclass
class _Worker:
    wid: int
    gen: object
    state: str
    key: tuple                              # (span, microbatch, direction)
    toplevel: bool = False
    relay: tuple | None = None              # (relay_id, stage_index)
    requester: tuple | None = None          # (pp_rank, request_id)


class _QItem:
    __slots__ = ("arrival", "mb", "module", "order", "seq", "msg", "extra",
                 "relay_tag")

    def __init__(self, arrival, mb, module, order, seq, msg, extra=None,
                 relay_tag=None):
        self.arrival = arrival
        self.mb = mb
        self.module = module
        self.order = order
        self.seq = seq
        self.msg = msg
        self.extra = extra
        self.relay_tag = relay_tag

    def sort_key(self):
        return (self.arrival, self.mb, self.module, self.order, self.seq)


class _Server:
    def __init__(self, rank: int):
        self.rank = rank
        self.queue: list[_QItem] = []
        self.busy = False
        self.workers: dict[int, _Worker] = {}
        self.order: list[tuple] = []
        self.expected: list[tuple] | None = None
        self.expected_pos = 0


class _Engine:
    def __init__(self, assignment: Assignment, tree: CostedTree,
                 topo: Topology, cluster: ClusterShape,
                 policy: SchedulePolicy, modes: Modes,
                 cost_params: CostParams,
                 replay_order: ReplayOrder | None):
        if assignment.degree != topo.pp_degree:
            raise PipelineError(
                f"assignment degree {assignment.degree} does not match "
                f"topology pp_degree {topo.pp_degree}")
        self.spec = tree.spec
        self.tree = tree
        self.policy = policy
        self.modes = modes
        self.cost = cost_params
        self.cluster = cluster
        self.is_replay = replay_order is not None
        if self.is_replay and not modes.static:
            raise PipelineError("replay requires static mode")

        self.owner: dict[str, int] = {}
        for nid, node in tree.tree.nodes.items():
            if nid not in assignment.partition:
                raise PipelineError(f"unassigned module node {nid!r}")
            for mid in node.module_ids:
                self.owner[mid] = assignment.partition[nid]
        for m in self.spec.modules:
            if m.id not in self.owner:
                raise PipelineError(f"unassigned module {m.id!r} encountered")

        members = topo.pp_group(0)
        self.global_of = sorted(members, key=lambda r: topo.pp_rank[r])
        self.P = topo.pp_degree
        self.buffers = D2DBuffers(topo.world_size, cluster.d2d_buffer_bytes)

        # linear-flow input sizes: previous sibling's output, else parent's
        self.input_bytes: dict[str, float] = {}
        root = self.spec.root_id
        self.input_bytes[root] = 0.0
        self.location: dict[str, tuple[str, ...]] = {root: (root,)}
        stack = [root]
        while stack:
            cur = stack.pop()
            kids = self.spec.children(cur)
            prev_out = self.input_bytes[cur]
            for k in kids:
                self.input_bytes[k] = prev_out
                prev_out = self.spec.module(k).activation_bytes
                self.location[k] = self.location[cur] + (k,)
                stack.append(k)

        self.now = 0.0
        self.heap: list = []
        self.seq = 0
        self.req_seq = 0
        self.servers = [_Server(r) for r in range(self.P)]
        if self.is_replay and not modes.fast:
            for r, server in enumerate(self.servers):
                server.expected = replay_order.server_orders.get(r, [])
        self.pending: dict[int, tuple[_Server, _Worker]] = {}
        self.relays: dict[int, dict] = {}
        self.relay_seq = 0
        self.events: list[TimelineEvent] = []
        self.counts = MessageCounts()
        self.flows: list[FlowRecord] = []
        self.state = SchedulerState(microbatches=policy.microbatches)
        self.decision_log: list[dict] = []
        self.outstanding_requests = 0
        self.toplevel_ids: set[int] = set()

    # -- event plumbing ----------------------------------------------------

    def _push(self, t: float, fn):
        heapq.heappush(self.heap, (t, self.seq, fn))
        self.seq += 1

    def run(self) -> StepTrace:
        self._turn(self.servers[0])
        while self.heap:
            t, _, fn = heapq.heappop(self.heap)
            self.now = t
            fn()
        if not self._done():
            raise PipelineDeadlock(
                "pipeline deadlock: no runnable event with outstanding work",
                self._snapshot())
        if self.outstanding_requests != 0:
            raise PipelineError("request/response conservation violated")
        makespan = max((e.t_end for e in self.events), default=0.0)
        compute_by_rank = [0.0] * self.P
        multiset: Counter = Counter()
        for e in self.events:
            if e.kind == "compute":
                compute_by_rank[e.pp_rank] += e.t_end - e.t_start
                multiset[(e.pp_rank, e.module, e.microbatch, e.direction)] += 1
        busy = [c / makespan if makespan > 0 else 1.0 for c in compute_by_rank]
        return StepTrace(
            timeline=Timeline(events=self.events, makespan=makespan),
            makespan=makespan,
            counts=self.counts,
            decision_log=self.decision_log,
            server_orders={s.rank: list(s.order) for s in self.servers},
            flows=self.flows,
            busy_fraction=busy,
            is_replay=self.is_replay,
            compute_multiset=multiset,
        )

    def _done(self) -> bool:
        M = self.policy.microbatches
        if len(self.state.completed_fwd) != M:
            return False
        return self.policy.forward_only or self.state.completed_bwd == M

    def _snapshot(self) -> dict:
        snap = {}
        for s in self.servers:
            snap[s.rank] = {
                "queued": [(i.msg.module_id, i.mb, i.msg.direction, i.msg.kind)
                           for i in s.queue],
                "parked": [w.key for w in s.workers.values()
                           if w.state == PENDING],
            }
        return snap

    # -- server loop ---------------------------------------------------------

    def _turn(self, server: _Server):
        while not server.busy:
            item = self._pick(server)
            if item is None and server.rank == 0 and not self._done():
                action = self._consult_scheduler()
                if action is not None:
                    self._inject_toplevel(action)
                    continue
            if item is None:
                return
            server.queue.remove(item)
            self._process(server, item)

    def _pick(self, server: _Server) -> _QItem | None:
        if not server.queue:
            return None
        runnable = []
        for item in server.queue:
            if item.msg.kind == "response":
                runnable.append(item)
            elif server.expected is None:
                runnable.append(item)
            else:
                if (server.expected_pos < len(server.expected)
                        and item.extra == server.expected[server.expected_pos]):
                    runnable.append(item)
        if not runnable:
            return None
        return min(runnable, key=_QItem.sort_key)

    def _consult_scheduler(self) -> tuple[int, str] | None:
        action = next_action(self.policy, self.state)
        if action is None:
            return None
        self.decision_log.append({
            "t": self.now,
            "ready_backwards": ready_backwards(self.state),
            "action": action,
        })
        mb, direction = action
        if direction == FWD:
            self.state.issued_fwd += 1
        else:
            self.state.issued_bwd.add(mb)
        return action

    def _inject_toplevel(self, action: tuple[int, str]):
        mb, direction = action
        root = self.spec.root_id
        req_id = self._next_req()
        self.toplevel_ids.add(req_id)
        msg = PipelineMessage(
            kind="request", request_id=req_id, module_id=root,
            seq_range=None, direction=direction, payload=(),
            microbatch=mb, requester=0, location=(root,),
            grad_enabled=True)
        item = _QItem(self.now, mb, root, 1, self.seq, msg,
                      extra=((root,), mb, direction))
        self.seq += 1
        self.servers[0].queue.append(item)

    def _next_req(self) -> int:
        self.req_seq += 1
        return self.req_seq

    def _process(self, server: _Server, item: _QItem):
        msg = item.msg
        if msg.kind == "request":
            span = item.extra[0]
            key = item.extra
            server.order.append(key)
            if server.expected is not None:
                server.expected_pos += 1
            worker = _Worker(
                wid=msg.request_id,
                gen=self._exec_span(server.rank, span, msg.microbatch,
                                    msg.direction),
                state=EXECUTING,
                key=key,
                toplevel=msg.request_id in self.toplevel_ids,
                relay=item.relay_tag,
                requester=(msg.requester, msg.request_id),
            )
            server.workers[msg.request_id] = worker
            self._run(server, worker, None)
        else:
            entry = self.pending.pop(msg.request_id)
            src_server, worker = entry
            assert worker.state == PENDING
            self._run(src_server, worker, msg.payload)

    def _run(self, server: _Server, worker: _Worker, send_value):
        assert all(w.state != EXECUTING for w in server.workers.values()
                   if w.wid != worker.wid), "compute exclusivity violated"
        worker.state = EXECUTING
        while True:
            try:
                cmd = worker.gen.send(send_value)
            except StopIteration as stop:
                worker.state = IDLE
                server.workers.pop(worker.wid, None)
                server.busy = False
                self._finish(server, worker, stop.value)
                self._turn(server)
                return
            kind = cmd[0]
            if kind == "compute":
                _, dur, mid, mb, direction = cmd
                self.events.append(TimelineEvent(
                    pp_rank=server.rank, microbatch=mb, module=mid,
                    direction=direction, kind="compute",
                    t_start=self.now, t_end=self.now + dur))
                server.busy = True
                self._push(self.now + dur,
                           lambda s=server, w=worker: self._compute_done(s, w))
                return
            if kind == "call":
                _, dest, span, parent_mid, mb, direction, req_bytes = cmd
                req_id = self._next_req()
                self.pending[req_id] = (server, worker)
                self.outstanding_requests += 1
                worker.state = PENDING
                self._send_request(server.rank, dest, req_id, span, parent_mid,
                                   mb, direction, req_bytes)
                server.busy = False
                self._turn(server)
                return
            if kind == "relay":
                _, parent_mid, run, mb, direction, in_bytes = cmd
                req_id = self._next_req()
                self.pending[req_id] = (server, worker)
                worker.state = PENDING
                self._start_relay(server.rank, req_id, parent_mid, run, mb,
                                  direction, in_bytes)
                server.busy = False
                self._turn(server)
                return
            if kind == "flow":
                _, record = cmd
                self.flows.append(record)
                send_value = None
                continue
            raise AssertionError(f"unknown worker command {kind!r}")

    def _compute_done(self, server: _Server, worker: _Worker):
        server.busy = False
        self._run(server, worker, None)

    def _finish(self, server: _Server, worker: _Worker, result):
        if worker.relay is not None:
            self._relay_stage_done(worker.relay[0], result)
            return
        if worker.toplevel:
            mb = worker.key[1]
            direction = worker.key[2]
            if direction == FWD:
                self.state.completed_fwd.add(mb)
            else:
                self.state.completed_bwd += 1
            return
        dest, req_id = worker.requester
        self._send_response(server.rank, dest, req_id, worker.key, result)

    # -- messaging -----------------------------------------------------------

    _toplevel_ids: set = None  # assigned in run_step wrapper

    def _transfer(self, src: int, dst: int, nbytes: float, mid: str,
                  mb: int, direction: str) -> float:
        """Route and time one tensor hop; returns arrival delay."""
        src_g, dst_g = self.global_of[src], self.global_of[dst]
        desc = TensorDesc(shape=(), nbytes=nbytes, device="gpu")
        transport = route(desc, src_g, dst_g, self.cluster, self.buffers)
        path = self.cluster.link_class(src_g, dst_g, transport)
        dt = transfer_time(nbytes, path, self.cluster,
                           static_mode=self.is_replay)
        self.counts.tensor_hops += 1
        if direction == FWD:
            self.counts.tensor_hops_fwd += 1
        else:
            self.counts.tensor_hops_bwd += 1
        if not self.is_replay:
            self.counts.metadata_rounds += 1
        self.events.append(TimelineEvent(
            pp_rank=src, microbatch=mb, module=mid, direction=direction,
            kind="comm", t_start=self.now, t_end=self.now + dt))
        if transport == "D2D":
            self._push(self.now + dt,
                       lambda s=src_g, d=dst_g, n=nbytes:
                       self.buffers.release_pair(s, d, n))
        return dt

    def _send_request(self, src: int, dst: int, req_id: int,
                      span: tuple[str, ...], parent_mid: str, mb: int,
                      direction: str, nbytes: float):
        parent = self.spec.module(parent_mid)
        seq_range = None
        if parent.is_sequential and len(span) > 1:
            kids = self.spec.children(parent_mid)
            idx = sorted(kids.index(s) for s in span)
            seq_range = (idx[0], idx[-1])
        msg = PipelineMessage(
            kind="request", request_id=req_id, module_id=span[0],
            seq_range=seq_range, direction=direction,
            payload=(TensorDesc(shape=(), nbytes=nbytes),),
            microbatch=mb, requester=src,
            location=self.location[span[0]])
        if not self.is_replay:
            self.counts.requests += 1
        dt = self._transfer(src, dst, nbytes, span[0], mb, direction)
        key = (span, mb, direction)
        self._push(self.now + dt,
                   lambda: self._deliver(dst, msg, key))

    def _send_response(self, src: int, dst: int, req_id: int,
                       key: tuple, nbytes: float):
        span, mb, direction = key
        msg = PipelineMessage(
            kind="response", request_id=req_id, module_id=span[0],
            seq_range=None, direction=direction,
            payload=(TensorDesc(shape=(), nbytes=nbytes),),
            microbatch=mb, requester=src, location=self.location[span[0]])
        if not self.is_replay:
            self.counts.responses += 1
        self.outstanding_requests -= 1
        dt = self._transfer(src, dst, nbytes, span[0], mb, direction)
        self._push(self.now + dt, lambda: self._deliver(dst, msg, None))

    def _deliver(self, dst: int, msg: PipelineMessage, key, relay_tag=None):
        server = self.servers[dst]
        item = _QItem(self.now, msg.microbatch, msg.module_id,
                      0 if msg.kind == "response" else 1, self.seq, msg,
                      extra=key)
        if relay_tag is not None:
            item.relay_tag = relay_tag
        self.seq += 1
        server.queue.append(item)
        self._turn(server)

    # -- relays (fast mode) ---------------------------------------------------

    def _start_relay(self, parent_rank: int, req_id: int, parent_mid: str,
                     run: list[tuple[int, tuple[str, ...]]], mb: int,
                     direction: str, in_bytes: float):
        relay_id = self.relay_seq
        self.relay_seq += 1
        self.relays[relay_id] = {
            "run": run, "idx": 0, "req_id": req_id, "mb": mb,
            "direction": direction, "parent_rank": parent_rank,
            "parent_mid": parent_mid,
        }
        first_rank, first_span = run[0]
        dt = self._transfer(parent_rank, first_rank, in_bytes,
                            first_span[0], mb, direction)
        self._push(self.now + dt,
                   lambda: self._relay_stage_start(relay_id))

    def _relay_stage_start(self, relay_id: int):
        relay = self.relays[relay_id]
        rank, span = relay["run"][relay["idx"]]
        stage_req = self._next_req()
        msg = PipelineMessage(
            kind="request", request_id=stage_req, module_id=span[0],
            seq_range=self._range_of(relay["parent_mid"], span),
            direction=relay["direction"], payload=(),
            microbatch=relay["mb"], requester=relay["parent_rank"],
            location=self.location[span[0]])
        key = (span, relay["mb"], relay["direction"])
        self._deliver(rank, msg, key, relay_tag=(relay_id, relay["idx"]))

    def _range_of(self, parent_mid: str, span: tuple[str, ...]):
        parent = self.spec.module(parent_mid)
        if not parent.is_sequential or len(span) < 2:
            return None
        kids = self.spec.children(parent_mid)
        idx = sorted(kids.index(s) for s in span)
        return (idx[0], idx[-1])

    def _relay_stage_done(self, relay_id: int, out_bytes: float):
        relay = self.relays[relay_id]
        cur_rank, cur_span = relay["run"][relay["idx"]]
        relay["idx"] += 1
        mb, direction = relay["mb"], relay["direction"]
        if relay["idx"] < len(relay["run"]):
            nxt_rank, nxt_span = relay["run"][relay["idx"]]
            dt = self._transfer(cur_rank, nxt_rank, out_bytes,
                                nxt_span[0], mb, direction)
            self._push(self.now + dt,
                       lambda: self._relay_stage_start(relay_id))
            return
        parent_rank = relay["parent_rank"]
        req_id = relay["req_id"]
        del self.relays[relay_id]
        dt = self._transfer(cur_rank, parent_rank, out_bytes,
                            cur_span[-1], mb, direction)
        msg = PipelineMessage(
            kind="response", request_id=req_id, module_id=cur_span[-1],
            seq_range=None, direction=direction,
            payload=(TensorDesc(shape=(), nbytes=out_bytes),),
            microbatch=mb, requester=cur_rank,
            location=self.location[cur_span[-1]])
        self._push(self.now + dt,
                   lambda: self._deliver(parent_rank, msg, None))

    # -- module execution ------------------------------------------------------

    def _exec_span(self, rank: int, span: tuple[str, ...], mb: int,
                   direction: str):
        out = 0.0
        for mid in span:
            out = yield from self._exec_module(rank, mid, mb, direction)
        return out

    def _exec_module(self, rank: int, mid: str, mb: int, direction: str):
        m = self.spec.module(mid)
        kids = self.spec.children(mid)
        if direction == FWD:
            yield ("compute", m.fwd_time, mid, mb, FWD)
            if kids:
                yield from self._exec_children(rank, mid, kids, mb, FWD)
            return m.activation_bytes
        if kids:
            yield from self._exec_children(rank, mid, list(reversed(kids)),
                                           mb, BWD)
        dur = (self.cost.bwd_factor * m.fwd_time
               + self.cost.recompute_seconds.get(mid, 0.0))
        yield ("compute", dur, mid, mb, BWD)
        return self.input_bytes[mid]

    def _exec_children(self, rank: int, parent_mid: str, kids: list[str],
                       mb: int, direction: str):
        yield ("flow", FlowRecord(
            parent_module=parent_mid, parent_rank=rank, microbatch=mb,
            direction=direction,
            children=tuple((k, self.owner[k]) for k in kids)))
        groups: list[tuple[int, list[str]]] = []
        for k in kids:
            own = self.owner[k]
            if groups and groups[-1][0] == own:
                groups[-1][1].append(k)
            else:
                groups.append((own, [k]))
        use_relay = self.is_replay and self.modes.fast
        i = 0
        while i < len(groups):
            own, members = groups[i]
            if own == rank:
                for k in members:
                    yield from self._exec_module(rank, k, mb, direction)
                i += 1
                continue
            if use_relay:
                run: list[tuple[int, tuple[str, ...]]] = []
                while i < len(groups) and groups[i][0] != rank:
                    run.append((groups[i][0], tuple(groups[i][1])))
                    i += 1
                in_bytes = self._req_bytes(run[0][1][0], direction)
                yield ("relay", parent_mid, run, mb, direction, in_bytes)
            else:
                for k in members:
                    req_bytes = self._req_bytes(k, direction)
                    yield ("call", own, (k,), parent_mid, mb, direction,
                           req_bytes)
                i += 1

    def _req_bytes(self, mid: str, direction: str) -> float:
        # forward request carries the child's input; backward carries the
        # gradient of its output (same size as the activation)
        if direction == FWD:
            return self.input_bytes[mid]
        return self.spec.module(mid).activation_bytes


def run_step(assignment: Assignment, tree: CostedTree, topo: Topology,
             cluster: ClusterShape, policy: SchedulePolicy,
             modes: Modes = Modes(), cost_params: CostParams = CostParams(),
             replay_order: ReplayOrder | None = None) -> StepTrace:
    """Simulate one training step and return its trace.

    Deterministic given its inputs: FIFO queues with (arrival, microbatch,
    module) tie-breaks and a fixed event order. When replay_order is given
    the step runs in static-replay form (no metadata rounds, recorded task
    order; with fast mode, rewired producer->consumer relays).
    """
    engine = _Engine(assignment, tree, topo, cluster, policy, modes,
                     cost_params, replay_order)
    engine._toplevel_ids = set()
    original_inject = engine._inject_toplevel

    def tracked_inject(action):
        original_inject(action)
        item = engine.servers[0].queue[-1]
        engine._toplevel_ids.add(item.msg.request_id)

    engine._inject_toplevel = tracked_inject
    return engine.run()


def simulate_static_run(assignment, tree, topo, cluster, policy,
                        cost_params: CostParams = CostParams(),
                        fast: bool = False, record_steps: int = 5):
    """Record T steps, select the fastest, and replay it metadata-free.

    Returns (history, replay_order, replay_trace).
    """
    modes = Modes(static=True, fast=fast)
    history = [run_step(assignment, tree, topo, cluster, policy,
                        Modes(static=True), cost_params)
               for _ in range(record_steps)]
    order = record_and_replay(history)
    replay = run_step(assignment, tree, topo, cluster, policy, modes,
                      cost_params, replay_order=order)
    return history, order, replay
