"""Model description ingest: module hierarchy, shared-parameter node tree, costs.

A model is described as a tree of modules (one root, the step function), a
list of parameters with byte sizes, and an execution order. Modules that
share any parameter must live on the same device, so they are collapsed into
a single node; partitioning then operates on the node tree with per-node
normalized costs in [0, 1].

fwd_time and activation_bytes are per-microbatch quantities: the simulator
consumes them directly, and the memory model scales stored activations by
the microbatch count.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

EPS_COST = 1e-9


class ModelSpecError(ValueError):
    """Raised when a model description fails validation."""


@dataclass(frozen=True)
class ModuleDecl:
    id: str
    parent: str | None
    param_ids: tuple[str, ...]
    fwd_time: float = 0.0
    activation_bytes: float = 0.0
    is_sequential: bool = False
    kind: str | None = None  # optional hook for tensor-parallel replacement


@dataclass(frozen=True)
class ParamDecl:
    id: str
    bytes: int


@dataclass
class ModelSpec:
    modules: list[ModuleDecl]
    params: list[ParamDecl]
    trace_order: list[str]

    def __post_init__(self):
        self._by_id = {m.id: m for m in self.modules}
        self._param_bytes = {p.id: p.bytes for p in self.params}
        self._trace_index = {mid: i for i, mid in enumerate(self.trace_order)}
        kids: dict[str, list[str]] = {m.id: [] for m in self.modules}
        for m in self.modules:
            if m.parent is not None:
                kids[m.parent].append(m.id)
        for mid in kids:
            kids[mid].sort(key=self._trace_index.__getitem__)
        self._children = kids

    @property
    def root_id(self) -> str:
        return next(m.id for m in self.modules if m.parent is None)

    def module(self, mid: str) -> ModuleDecl:
        return self._by_id[mid]

    def children(self, mid: str) -> list[str]:
        """Child module ids in trace (execution) order."""
        return self._children[mid]

    def param_bytes(self, pid: str) -> int:
        return self._param_bytes[pid]

    def trace_index(self, mid: str) -> int:
        return self._trace_index[mid]

    def subtree(self, mid: str) -> list[str]:
        """All module ids under mid (inclusive), preorder."""
        out, stack = [], [mid]
        while stack:
            cur = stack.pop()
            out.append(cur)
            stack.extend(reversed(self._children[cur]))
        return out

    def subtree_param_bytes(self, mid: str) -> int:
        """Bytes of distinct parameters contained in mid's subtree."""
        seen: set[str] = set()
        for sub in self.subtree(mid):
            seen.update(self._by_id[sub].param_ids)
        return sum(self._param_bytes[p] for p in seen)


def _require(cond: bool, msg: str):
    if not cond:
        raise ModelSpecError(msg)


def load_model_spec(text: str) -> ModelSpec:
    """Parse and validate a model description JSON document.

    Raises ModelSpecError naming the offending id on any structural problem:
    duplicate module ids, dangling parents, unknown trace entries, cycles,
    multiple or missing roots, nonpositive parameter sizes.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelSpecError(f"model JSON parse failure: {e}") from None
    _require(isinstance(raw, dict), "top level must be an object")
    _require(isinstance(raw.get("modules"), list) and raw["modules"],
             "modules must be a non-empty list")
    _require(isinstance(raw.get("params"), list), "params must be a list")

    modules: list[ModuleDecl] = []
    seen_ids: set[str] = set()
    for entry in raw["modules"]:
        _require(isinstance(entry, dict) and "id" in entry,
                 "each module needs an id")
        mid = entry["id"]
        _require(isinstance(mid, str) and mid, "module id must be a string")
        _require(mid not in seen_ids, f"duplicate module id {mid!r}")
        seen_ids.add(mid)
        fwd = float(entry.get("fwd_time", 0.0))
        act = float(entry.get("activation_bytes", 0.0))
        _require(fwd >= 0.0, f"module {mid!r}: fwd_time must be >= 0")
        _require(act >= 0.0, f"module {mid!r}: activation_bytes must be >= 0")
        modules.append(ModuleDecl(
            id=mid,
            parent=entry.get("parent"),
            param_ids=tuple(entry.get("param_ids", [])),
            fwd_time=fwd,
            activation_bytes=act,
            is_sequential=bool(entry.get("is_sequential", False)),
            kind=entry.get("kind"),
        ))

    params: list[ParamDecl] = []
    seen_pids: set[str] = set()
    for entry in raw["params"]:
        pid = entry["id"]
        _require(pid not in seen_pids, f"duplicate param id {pid!r}")
        seen_pids.add(pid)
        nbytes = int(entry["bytes"])
        _require(nbytes > 0, f"param {pid!r}: bytes must be > 0")
        params.append(ParamDecl(id=pid, bytes=nbytes))

    roots = [m.id for m in modules if m.parent is None]
    _require(len(roots) == 1,
             f"exactly one root module required, found {len(roots)}")
    for m in modules:
        if m.parent is not None:
            _require(m.parent in seen_ids,
                     f"module {m.id!r} references unknown parent {m.parent!r}")
        for pid in m.param_ids:
            _require(pid in seen_pids,
                     f"module {m.id!r} references unknown param {pid!r}")

    trace = list(raw.get("trace_order") or [])
    if not trace:
        trace = [m.id for m in modules]
    seen_trace: set[str] = set()
    for mid in trace:
        _require(mid in seen_ids, f"trace_order mentions unknown id {mid!r}")
        _require(mid not in seen_trace, f"trace_order repeats id {mid!r}")
        seen_trace.add(mid)
    _require(seen_trace == seen_ids,
             "trace_order must cover every module exactly once")
    tidx = {mid: i for i, mid in enumerate(trace)}
    by_id = {m.id: m for m in modules}
    for m in modules:
        if m.parent is not None:
            _require(tidx[m.id] > tidx[m.parent],
                     f"trace_order lists {m.id!r} before its parent {m.parent!r}")

    # reject cycles / unreachable modules (parent pointers may be consistent
    # yet disconnected from the root)
    reachable: set[str] = set()
    stack = [roots[0]]
    kid_map: dict[str, list[str]] = {m.id: [] for m in modules}
    for m in modules:
        if m.parent is not None:
            kid_map[m.parent].append(m.id)
    while stack:
        cur = stack.pop()
        reachable.add(cur)
        stack.extend(kid_map[cur])
    _require(len(reachable) == len(modules),
             "module hierarchy contains a cycle or unreachable modules: "
             + ", ".join(sorted(seen_ids - reachable)))
    del by_id
    return ModelSpec(modules=modules, params=params, trace_order=trace)


@dataclass
class ModuleNode:
    id: str                      # lexicographically smallest member module id
    module_ids: list[str]        # members, in trace order
    children: list[str] = field(default_factory=list)
    parent: str | None = None


@dataclass
class NodeTree:
    nodes: dict[str, ModuleNode]
    root_id: str

    def bfs_order(self) -> list[str]:
        order, q = [], deque([self.root_id])
        while q:
            cur = q.popleft()
            order.append(cur)
            q.extend(self.nodes[cur].children)
        return order


def build_node_tree(spec: ModelSpec) -> NodeTree:
    """Collapse shared-parameter connected components into ModuleNodes.

    The bipartite module-parameter graph's connected components become nodes;
    hierarchy edges between distinct components are contracted, and when a
    component is reachable from several placed components, the edge with the
    lexicographically smallest parent module id wins.
    """
    parent_uf: dict[str, str] = {m.id: m.id for m in spec.modules}

    def find(x: str) -> str:
        while parent_uf[x] != x:
            parent_uf[x] = parent_uf[parent_uf[x]]
            x = parent_uf[x]
        return x

    def union(a: str, b: str):
        ra, rb = find(a), find(b)
        if ra != rb:
            # keep the lexicographically smaller id as representative
            lo, hi = (ra, rb) if ra < rb else (rb, ra)
            parent_uf[hi] = lo

    param_owner: dict[str, str] = {}
    for m in spec.modules:
        for pid in m.param_ids:
            if pid in param_owner:
                union(param_owner[pid], m.id)
            else:
                param_owner[pid] = m.id

    comp_members: dict[str, list[str]] = {}
    for m in spec.modules:
        comp_members.setdefault(find(m.id), []).append(m.id)
    for members in comp_members.values():
        members.sort(key=spec.trace_index)

    comp_of = {mid: find(mid) for mid in (m.id for m in spec.modules)}
    nodes = {
        rep: ModuleNode(id=rep, module_ids=list(members))
        for rep, members in comp_members.items()
    }

    # hierarchy edges crossing components: child component -> candidate
    # (parent module id, parent component)
    candidates: dict[str, list[tuple[str, str]]] = {rep: [] for rep in nodes}
    for m in spec.modules:
        if m.parent is None:
            continue
        cu, cv = comp_of[m.parent], comp_of[m.id]
        if cu != cv:
            candidates[cv].append((m.parent, cu))

    root_comp = comp_of[spec.root_id]
    placed = {root_comp}
    while len(placed) < len(nodes):
        progress = []
        for rep in sorted(nodes):
            if rep in placed:
                continue
            usable = [(pm, pc) for pm, pc in candidates[rep] if pc in placed]
            if usable:
                pm, pc = min(usable)
                progress.append((rep, pc))
        if not progress:
            # cannot happen for a validated spec (hierarchy is connected)
            raise ModelSpecError("node tree construction stalled")
        for rep, pc in progress:
            nodes[rep].parent = pc
            nodes[pc].children.append(rep)
            placed.add(rep)

    # children in execution order: earliest trace appearance of any member
    def first_trace(rep: str) -> int:
        return min(spec.trace_index(mid) for mid in nodes[rep].module_ids)

    for node in nodes.values():
        node.children.sort(key=first_trace)
    return NodeTree(nodes=nodes, root_id=root_comp)


@dataclass
class CostedTree:
    tree: NodeTree
    spec: ModelSpec
    alpha: float
    w: dict[str, float]          # per-node summed normalized memory cost
    psi: dict[str, float]        # per-node summed normalized compute cost
    C: dict[str, float]          # unnormalized recursive cost
    c: dict[str, float]          # normalized cost, c(root) = 1

    def local_cost(self, node_id: str) -> float:
        """c(n) minus the children's share: the node's own load."""
        node = self.tree.nodes[node_id]
        return self.c[node_id] - sum(self.c[k] for k in node.children)

    def to_canonical_json(self) -> str:
        payload = {
            "alpha": self.alpha,
            "root": self.tree.root_id,
            "nodes": {
                nid: {
                    "modules": node.module_ids,
                    "children": node.children,
                    "w": self.w[nid],
                    "psi": self.psi[nid],
                    "C": self.C[nid],
                    "c": self.c[nid],
                }
                for nid, node in sorted(self.tree.nodes.items())
            },
        }
        return json.dumps(payload, sort_keys=True)


def _min_max_normalize(values: dict[str, float]) -> dict[str, float]:
    lo, hi = min(values.values()), max(values.values())
    if hi > lo:
        return {k: (v - lo) / (hi - lo) for k, v in values.items()}
    # degenerate range: keep the component alive when it carries any mass
    fill = 1.0 if hi > 0 else 0.0
    return {k: fill for k in values}


def compute_costs(tree: NodeTree, spec: ModelSpec, alpha: float) -> CostedTree:
    """Attach normalized per-node costs: blend of memory and compute.

    Per module, memory cost is subtree parameter bytes plus activation bytes;
    compute cost is the supplied fwd_time, falling back to descendant count
    when no module reports a time. Each is min-max normalized over modules
    before blending with weight alpha, then summed up the node tree and
    divided by the root cost.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if not spec.modules:
        raise ModelSpecError("empty model")

    w_raw = {m.id: spec.subtree_param_bytes(m.id) + m.activation_bytes
             for m in spec.modules}
    if any(m.fwd_time > 0 for m in spec.modules):
        psi_raw = {m.id: m.fwd_time for m in spec.modules}
    else:
        psi_raw = {m.id: float(len(spec.subtree(m.id)) - 1)
                   for m in spec.modules}
    w_norm = _min_max_normalize(w_raw)
    psi_norm = _min_max_normalize(psi_raw)
    cbar = {
        mid: max(alpha * w_norm[mid] + (1.0 - alpha) * psi_norm[mid], EPS_COST)
        for mid in w_norm
    }

    w_node: dict[str, float] = {}
    psi_node: dict[str, float] = {}
    C: dict[str, float] = {}
    for nid in reversed(tree.bfs_order()):
        node = tree.nodes[nid]
        w_node[nid] = sum(w_norm[m] for m in node.module_ids)
        psi_node[nid] = sum(psi_norm[m] for m in node.module_ids)
        C[nid] = (sum(cbar[m] for m in node.module_ids)
                  + sum(C[k] for k in node.children))
    c_root = C[tree.root_id]
    if c_root <= 0:
        raise ModelSpecError("root cost is zero: empty model")
    c = {nid: C[nid] / c_root for nid in C}
    return CostedTree(tree=tree, spec=spec, alpha=alpha,
                      w=w_node, psi=psi_node, C=C, c=c)
