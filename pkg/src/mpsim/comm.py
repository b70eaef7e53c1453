"""Communication model: tensor stubs, MPI/D2D routing, link timing, buffers.

Control messages strip tensors out into stubs; each tensor transfer is routed
to the direct device-to-device path when the hardware allows it and persistent
buffer space is available, falling back to host-mediated MPI otherwise. Timing
is latency + bytes/bandwidth per link class, plus one small-message metadata
round unless the run is in static mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

MPI = "MPI"
D2D = "D2D"

LINK_CLASSES = ("nvlink", "rdma", "pcie_mpi_intra", "mpi_inter")

DEFAULT_LINKS = {
    "nvlink": (5e-6, 200e9),
    "rdma": (1e-5, 40e9),
    "pcie_mpi_intra": (2e-5, 10e9),
    "mpi_inter": (5e-5, 10e9),
}


class CommModelError(ValueError):
    pass


@dataclass(frozen=True)
class TensorDesc:
    """Shape/byte descriptor standing in for a real tensor."""
    shape: tuple[int, ...]
    nbytes: float
    device: str = "gpu"


@dataclass(frozen=True)
class TensorStub:
    stub_id: int
    shape: tuple[int, ...]
    nbytes: float
    device: str


def extract_stubs(payload):
    """Replace every TensorDesc in a nested structure with a TensorStub.

    Returns (skeleton, stubs); restore_stubs inverts the transformation
    exactly. Containers handled: dict, list, tuple.
    """
    stubs: list[TensorStub] = []

    def walk(obj):
        if isinstance(obj, TensorDesc):
            stub = TensorStub(stub_id=len(stubs), shape=obj.shape,
                              nbytes=obj.nbytes, device=obj.device)
            stubs.append(stub)
            return stub
        if isinstance(obj, dict):
            return {k: walk(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [walk(v) for v in obj]
        if isinstance(obj, tuple):
            return tuple(walk(v) for v in obj)
        return obj

    return walk(payload), stubs


def restore_stubs(skeleton, stubs: list[TensorStub]):
    """Rebuild the original payload from a skeleton and its stub list."""
    by_id = {s.stub_id: s for s in stubs}

    def walk(obj):
        if isinstance(obj, TensorStub):
            s = by_id[obj.stub_id]
            return TensorDesc(shape=s.shape, nbytes=s.nbytes, device=s.device)
        if isinstance(obj, dict):
            return {k: walk(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [walk(v) for v in obj]
        if isinstance(obj, tuple):
            return tuple(walk(v) for v in obj)
        return obj

    return walk(skeleton)


@dataclass(frozen=True)
class LinkParams:
    latency_s: float
    bandwidth_Bps: float

    def __post_init__(self):
        if self.latency_s < 0:
            raise CommModelError("link latency must be >= 0")
        if not self.bandwidth_Bps > 0:
            raise CommModelError("link bandwidth must be > 0")


@dataclass(frozen=True)
class ClusterShape:
    """Physical substrate: node sizes, link availability, link parameters."""
    ranks_per_node: int = 8
    nvlink: bool = True
    rdma: bool = True
    links: dict[str, LinkParams] = field(default_factory=dict)
    d2d_buffer_bytes: float = 1e9
    metadata_latency_s: float | None = None

    def __post_init__(self):
        merged = {k: LinkParams(*v) for k, v in DEFAULT_LINKS.items()}
        merged.update(self.links)
        object.__setattr__(self, "links", merged)
        if self.metadata_latency_s is None:
            object.__setattr__(self, "metadata_latency_s",
                               merged["pcie_mpi_intra"].latency_s)

    def node_of(self, rank: int) -> int:
        return rank // self.ranks_per_node

    def same_node(self, a: int, b: int) -> bool:
        return self.node_of(a) == self.node_of(b)

    def link_class(self, src: int, dst: int, transport: str) -> str:
        if transport == D2D:
            return "nvlink" if self.same_node(src, dst) else "rdma"
        return "pcie_mpi_intra" if self.same_node(src, dst) else "mpi_inter"

    @classmethod
    def zero_comm(cls, ranks_per_node: int = 1024) -> "ClusterShape":
        """All latencies zero, effectively infinite bandwidth: for analytics."""
        links = {k: LinkParams(0.0, 1e30) for k in LINK_CLASSES}
        return cls(ranks_per_node=ranks_per_node, nvlink=True, rdma=True,
                   links=links, d2d_buffer_bytes=1e30, metadata_latency_s=0.0)

    @classmethod
    def from_json(cls, text: str) -> "ClusterShape":
        raw = json.loads(text)
        links = {k: LinkParams(v["latency_s"], v["bandwidth_Bps"])
                 for k, v in raw.get("links", {}).items()}
        kwargs = dict(
            ranks_per_node=int(raw.get("ranks_per_node", 8)),
            nvlink=bool(raw.get("nvlink", True)),
            rdma=bool(raw.get("rdma", True)),
            links=links,
            d2d_buffer_bytes=float(raw.get("d2d_buffer_bytes", 1e9)),
        )
        if "metadata_latency_s" in raw:
            kwargs["metadata_latency_s"] = float(raw["metadata_latency_s"])
        return cls(**kwargs)


class D2DBuffers:
    """Persistent per-rank send/receive buffer accounting."""

    def __init__(self, world_size: int, capacity_bytes: float):
        self.capacity = capacity_bytes
        self.send_used = [0.0] * world_size
        self.recv_used = [0.0] * world_size

    def free_send(self, rank: int) -> float:
        return self.capacity - self.send_used[rank]

    def free_recv(self, rank: int) -> float:
        return self.capacity - self.recv_used[rank]

    def reserve(self, rank: int, nbytes: float, kind: str) -> bool:
        if nbytes < 0:
            raise CommModelError("cannot reserve negative bytes")
        used = self.send_used if kind == "send" else self.recv_used
        if used[rank] + nbytes > self.capacity:
            return False
        used[rank] += nbytes
        return True

    def release(self, rank: int, nbytes: float, kind: str):
        used = self.send_used if kind == "send" else self.recv_used
        if nbytes < 0 or used[rank] - nbytes < -1e-9:
            raise CommModelError(
                f"release of {nbytes} bytes exceeds reservations on rank {rank}")
        used[rank] = max(used[rank] - nbytes, 0.0)

    def try_reserve_pair(self, src: int, dst: int, nbytes: float) -> bool:
        """Reserve send space at src and receive space at dst, atomically.

        Both endpoints agree on the outcome: either both reservations are
        made or neither is.
        """
        if not self.reserve(src, nbytes, "send"):
            return False
        if not self.reserve(dst, nbytes, "recv"):
            self.release(src, nbytes, "send")
            return False
        return True

    def release_pair(self, src: int, dst: int, nbytes: float):
        self.release(src, nbytes, "send")
        self.release(dst, nbytes, "recv")


def route(stub: TensorStub | TensorDesc, src: int, dst: int,
          cluster: ClusterShape, buffers: D2DBuffers) -> str:
    """Decide MPI vs D2D for one tensor transfer, reserving D2D space.

    MPI whenever: the tensor lives on CPU; same node without NVLink; cross
    node without RDMA; or the persistent D2D buffers lack space. Otherwise
    the direct path wins and the needed bytes are reserved at both endpoints.
    """
    if src == dst:
        raise CommModelError("route requires distinct src and dst ranks")
    if stub.device == "cpu":
        return MPI
    if cluster.same_node(src, dst):
        if not cluster.nvlink:
            return MPI
    else:
        if not cluster.rdma:
            return MPI
    if not buffers.try_reserve_pair(src, dst, stub.nbytes):
        return MPI
    return D2D


def transfer_time(nbytes: float, path: str, cluster: ClusterShape,
                  static_mode: bool = False) -> float:
    """Seconds for one tensor transfer over a link class.

    metadata round (skipped in static mode) + link latency + bytes/bandwidth.
    """
    if nbytes < 0:
        raise CommModelError("transfer bytes must be >= 0")
    if path not in cluster.links:
        raise CommModelError(f"unknown link class {path!r}")
    link = cluster.links[path]
    meta = 0.0 if static_mode else cluster.metadata_latency_s
    return meta + link.latency_s + nbytes / link.bandwidth_Bps
