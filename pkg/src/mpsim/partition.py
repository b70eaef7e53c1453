"""Load-balanced pipeline partitioning of the module-node tree.

Breadth-first device-set splitting: each node's virtual device set is split
among its children by (1) segmenting the child sequence into balanced
consecutive blocks via dynamic programming, (2) apportioning devices to
blocks with the D'Hondt highest-quotient method, and (3) recursing on blocks
that received several devices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .model_graph import CostedTree


@dataclass(frozen=True)
class Segmentation:
    """Split of a cost sequence into consecutive non-empty segments.

    bounds has length (segments + 1): segment i covers [bounds[i], bounds[i+1]).
    omega is the max segment cost sum, globally minimal for the requested
    segment count.
    """
    bounds: tuple[int, ...]
    omega: float

    @property
    def segments(self) -> list[tuple[int, int]]:
        return list(zip(self.bounds[:-1], self.bounds[1:]))


def segment_children(costs: list[float], l: int) -> Segmentation:
    """Optimal consecutive segmentation of costs into min(l, n) segments.

    Minimizes the maximum segment sum; DP ties break toward the earliest
    feasible split index.
    """
    if not costs:
        raise ValueError("cannot segment an empty cost list")
    if any(c <= 0 for c in costs):
        raise ValueError("all costs must be positive")
    if l < 1:
        raise ValueError("segment count must be >= 1")
    n = len(costs)
    k_max = min(l, n)
    prefix = [0.0]
    for c in costs:
        prefix.append(prefix[-1] + c)

    # best[k][i]: minimal omega for the first i elements in k segments
    INF = float("inf")
    best = [[INF] * (n + 1) for _ in range(k_max + 1)]
    choice = [[0] * (n + 1) for _ in range(k_max + 1)]
    for i in range(1, n + 1):
        best[1][i] = prefix[i]
    for k in range(2, k_max + 1):
        for i in range(k, n + 1):
            cur_best, cur_j = INF, -1
            for j in range(k - 1, i):
                cand = max(best[k - 1][j], prefix[i] - prefix[j])
                if cand < cur_best:
                    cur_best, cur_j = cand, j
            best[k][i] = cur_best
            choice[k][i] = cur_j

    bounds = [n]
    i = n
    for k in range(k_max, 1, -1):
        i = choice[k][i]
        bounds.append(i)
    bounds.append(0)
    bounds.reverse()
    return Segmentation(bounds=tuple(bounds), omega=best[k_max][n])


def dhondt_allocate(devices: tuple[int, ...] | list[int],
                    seg_costs: list[float]) -> list[tuple[int, ...]]:
    """Apportion devices to segments proportionally to their costs.

    Highest-quotient rule with a single global divisor counter: the winning
    segment's quotient is divided by (s + 1) where s counts all devices
    handed out so far. Devices are dealt in ascending index order; argmax
    ties break toward the lowest segment index.
    """
    if not devices:
        raise ValueError("device set must be non-empty")
    if not seg_costs or any(c <= 0 for c in seg_costs):
        raise ValueError("segment costs must be positive")
    q = list(seg_costs)
    alloc: list[list[int]] = [[] for _ in seg_costs]
    s = 1
    for p in sorted(devices):
        k = max(range(len(q)), key=lambda i: (q[i], -i))
        alloc[k].append(p)
        q[k] = q[k] / (s + 1)
        s += 1
    return [tuple(a) for a in alloc]


def partition_children(devices: tuple[int, ...] | list[int],
                       children: list[tuple[str, float]],
                       ) -> dict[str, tuple[int, ...]]:
    """Split a device set among ordered (node id, cost) children.

    Segments get devices via D'Hondt; a zero-device segment inherits the
    parent's smallest device, a one-device or one-node segment takes its
    allocation directly, and multi-device multi-node segments recurse.
    """
    devices = tuple(sorted(devices))
    if len(devices) < 2:
        raise ValueError("partition_children requires more than one device")
    out: dict[str, tuple[int, ...]] = {}
    _partition(devices, children, out)
    return out


def _partition(devices: tuple[int, ...],
               children: list[tuple[str, float]],
               out: dict[str, tuple[int, ...]]):
    seg = segment_children([c for _, c in children], len(devices))
    blocks = [children[a:b] for a, b in seg.segments]
    seg_costs = [sum(c for _, c in blk) for blk in blocks]
    allocs = dhondt_allocate(devices, seg_costs)
    for blk, dev in zip(blocks, allocs):
        if len(dev) == 0:
            for nid, _ in blk:
                out[nid] = (devices[0],)
        elif len(blk) == 1 or len(dev) == 1:
            for nid, _ in blk:
                out[nid] = dev
        else:
            _partition(dev, blk, out)


@dataclass
class Assignment:
    """Per-node partition index d(n) and virtual device sets P(n)."""
    partition: dict[str, int]
    device_sets: dict[str, tuple[int, ...]]
    degree: int

    def to_json(self, loads: list[float] | None = None) -> str:
        payload: dict = {"partitions": dict(sorted(self.partition.items()))}
        if loads is not None:
            payload["loads"] = loads
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def partition_tree(tree: CostedTree, degree: int) -> Assignment:
    """Assign every module node a partition index via breadth-first splitting.

    The root owns all D virtual devices; every node lands on the smallest
    index of its device set, and single-device sets are inherited by whole
    subtrees.
    """
    if degree < 1:
        raise ValueError("pipeline degree must be >= 1")
    node_tree = tree.tree
    device_sets: dict[str, tuple[int, ...]] = {
        node_tree.root_id: tuple(range(degree))
    }
    partition: dict[str, int] = {}
    for nid in node_tree.bfs_order():
        devs = device_sets[nid]
        partition[nid] = devs[0]
        kids = node_tree.nodes[nid].children
        if not kids:
            continue
        if len(devs) > 1:
            child_costs = [(k, tree.c[k]) for k in kids]
            device_sets.update(partition_children(devs, child_costs))
        else:
            for k in kids:
                device_sets[k] = (devs[0],)
    return Assignment(partition=partition, device_sets=device_sets,
                      degree=degree)


def partition_report(assignment: Assignment, tree: CostedTree) -> list[float]:
    """Per-partition total local cost; sums to 1 up to rounding."""
    loads = [0.0] * assignment.degree
    for nid in tree.tree.nodes:
        loads[assignment.partition[nid]] += tree.local_cost(nid)
    return loads
