"""Rank grid: PP/TP/DP/RDP groups from world size, degrees, and placement.

The placement string is a permutation of "DPT"; the rightmost letter's
parallelism runs over immediate-neighbor global ranks (varies fastest in a
mixed-radix decomposition of the rank). D indexes the reduced-data-parallel
coordinate, P the pipeline coordinate, T the tensor coordinate, and
dp_rank = rdp_rank * tp_degree + tp_rank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

_ALIASES = {"spread": "TPD", "cluster": "DPT"}


class TopologyError(ValueError):
    """Raised for invalid world/degree/placement combinations."""


@dataclass(frozen=True)
class Topology:
    world_size: int
    pp_degree: int
    tp_degree: int
    dp_degree: int
    rdp_degree: int
    placement: str                       # canonical 3-letter form
    prescaled_batch: bool
    pp_rank: tuple[int, ...] = field(repr=False)
    tp_rank: tuple[int, ...] = field(repr=False)
    rdp_rank: tuple[int, ...] = field(repr=False)

    def dp_rank(self, rank: int) -> int:
        return self.rdp_rank[rank] * self.tp_degree + self.tp_rank[rank]

    @property
    def effective_dp_degree(self) -> int:
        """Degree over which distinct batches are spread."""
        return self.rdp_degree if self.prescaled_batch else self.dp_degree

    def _group(self, rank: int, same: tuple[str, ...]) -> list[int]:
        keys = {"pp": self.pp_rank, "tp": self.tp_rank, "rdp": self.rdp_rank}
        ref = tuple(keys[k][rank] for k in same)
        return [r for r in range(self.world_size)
                if tuple(keys[k][r] for k in same) == ref]

    def pp_group(self, rank: int) -> list[int]:
        return self._group(rank, ("tp", "rdp"))

    def tp_group(self, rank: int) -> list[int]:
        return self._group(rank, ("pp", "rdp"))

    def rdp_group(self, rank: int) -> list[int]:
        return self._group(rank, ("pp", "tp"))

    def dp_group(self, rank: int) -> list[int]:
        return self._group(rank, ("pp",))

    def groups(self, kind: str) -> list[list[int]]:
        """All distinct groups of one kind, each sorted, ordered by leader."""
        fn = {"pp": self.pp_group, "tp": self.tp_group,
              "rdp": self.rdp_group, "dp": self.dp_group}[kind]
        seen, out = set(), []
        for r in range(self.world_size):
            g = tuple(fn(r))
            if g not in seen:
                seen.add(g)
                out.append(list(g))
        return out

    def to_json(self) -> str:
        payload = {
            "world_size": self.world_size,
            "pp_degree": self.pp_degree,
            "tp_degree": self.tp_degree,
            "dp_degree": self.dp_degree,
            "rdp_degree": self.rdp_degree,
            "placement": self.placement,
            "prescaled_batch": self.prescaled_batch,
            "ranks": [
                {
                    "rank": r,
                    "pp_rank": self.pp_rank[r],
                    "tp_rank": self.tp_rank[r],
                    "rdp_rank": self.rdp_rank[r],
                    "dp_rank": self.dp_rank(r),
                }
                for r in range(self.world_size)
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def build_topology(world_size: int, pp_degree: int, tp_degree: int,
                   placement: str = "cluster",
                   prescaled_batch: bool = False) -> Topology:
    """Decompose global ranks into (rdp, pp, tp) coordinates per placement."""
    if pp_degree < 1 or tp_degree < 1 or world_size < 1:
        raise TopologyError("degrees and world size must be >= 1")
    if world_size % (pp_degree * tp_degree) != 0:
        raise TopologyError(
            f"world size {world_size} not divisible by "
            f"pp_degree*tp_degree = {pp_degree * tp_degree}")
    rdp_degree = world_size // (pp_degree * tp_degree)
    dp_degree = world_size // pp_degree

    canon = _ALIASES.get(placement, placement)
    if sorted(canon) != ["D", "P", "T"]:
        raise TopologyError(
            f"placement must be 'spread', 'cluster', or a permutation of "
            f"'DPT', got {placement!r}")

    radix = {"D": rdp_degree, "P": pp_degree, "T": tp_degree}
    coords: dict[str, list[int]] = {"D": [], "P": [], "T": []}
    for rank in range(world_size):
        rem = rank
        vals: dict[str, int] = {}
        for letter in reversed(canon):      # rightmost letter varies fastest
            vals[letter] = rem % radix[letter]
            rem //= radix[letter]
        for letter in "DPT":
            coords[letter].append(vals[letter])

    return Topology(
        world_size=world_size,
        pp_degree=pp_degree,
        tp_degree=tp_degree,
        dp_degree=dp_degree,
        rdp_degree=rdp_degree,
        placement=canon,
        prescaled_batch=prescaled_batch,
        pp_rank=tuple(coords["P"]),
        tp_rank=tuple(coords["T"]),
        rdp_rank=tuple(coords["D"]),
    )
