"""k-best string extraction and mass computations over SFAs.

``top_k`` runs a dynamic program over the topological order: each node
keeps the k best partial paths from the start, and a node's list is built
by extending the lists of its predecessors through their arcs. Truncating
each per-node list at k is exact because a path's probability factors:
if a prefix reaching node v is strictly beaten by k other prefixes at v,
then each of those k prefixes extends along the same suffix to a distinct
complete string (unique-path property) with strictly higher probability,
so the beaten prefix can never appear in the global top k. When
probabilities tie exactly, the per-node ordering (probability, then
emitted string, then node sequence) decides, which keeps the output
deterministic; the same ordering is used by the exhaustive oracle.

``total_mass`` is one forward sum-product pass and works unchanged on
approximated graphs whose nodes have discarded outgoing mass.

``kl_of_retention`` is the closed form of the KL divergence between the
conditional distribution over retained strings and the original model:
conditioning on a retained set with mass Z is the KL-optimal choice of
probabilities, and its divergence is exactly -ln(Z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import StaccatoError
from .sfa import Sfa

__all__ = ["RankedEntry", "RankedStrings", "top_k", "total_mass",
           "kl_of_retention"]


@dataclass(frozen=True)
class RankedEntry:
    """One retained string with its probability and witness path."""

    string: str
    log_prob: float
    path: tuple[int, ...]

    @property
    def prob(self) -> float:
        return math.exp(self.log_prob)


@dataclass(frozen=True)
class RankedStrings:
    """At most ``k`` strings in non-increasing probability order.

    Ties are ordered by emitted string, then by witness node sequence, so
    equal inputs always produce identical rankings.
    """

    entries: tuple[RankedEntry, ...]
    k: int

    def __post_init__(self):
        if len(self.entries) > self.k:
            raise ValueError(f"{len(self.entries)} entries exceed k={self.k}")

    def strings(self) -> list[str]:
        return [e.string for e in self.entries]

    def total_prob(self) -> float:
        return sum(e.prob for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _entry_key(entry: tuple[float, str, tuple[int, ...]]):
    logp, string, path = entry
    return (-logp, string, path)


def top_k(sfa: Sfa, k: int) -> RankedStrings:
    """Exactly the k highest-probability strings of ``sfa`` (fewer if the
    automaton emits fewer), with witness paths."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    # per node: list of (log_prob, string, node path) sorted best-first
    best: dict[int, list[tuple[float, str, tuple[int, ...]]]] = {
        sfa.start: [(0.0, "", (sfa.start,))]}
    for u in sfa.topo():
        mine = best.get(u)
        if not mine:
            continue
        for v in sfa.out_edges(u):
            ext = best.setdefault(v, [])
            for label, prob in sorted(sfa.labels(u, v).items()):
                lp = math.log(prob)
                for logp, string, path in mine:
                    ext.append((logp + lp, string + label, path + (v,)))
        for v in sfa.out_edges(u):
            lst = best[v]
            lst.sort(key=_entry_key)
            del lst[k:]
    final = best.get(sfa.final, [])
    entries = tuple(RankedEntry(string=s, log_prob=lp, path=p)
                    for lp, s, p in final[:k])
    return RankedStrings(entries=entries, k=k)


def total_mass(sfa: Sfa) -> float:
    """Total emitted probability mass, by one forward pass in topo order.

    Equals 1 (within float error) for a full SFA; less when strings have
    been discarded by an approximation.
    """
    mass = {n: 0.0 for n in sfa.nodes}
    mass[sfa.start] = 1.0
    for u in sfa.topo():
        m = mass[u]
        if m == 0.0:
            continue
        for v in sfa.out_edges(u):
            for prob in sfa.labels(u, v).values():
                mass[v] += m * prob
    return mass[sfa.final]


def kl_of_retention(retained_mass: float) -> float:
    """KL divergence (nats) of conditioning on a retained set of mass Z.

    KL(conditional || original) = -ln(Z); see module docstring.
    """
    if not (0.0 < retained_mass <= 1.0 + 1e-9):
        raise StaccatoError(
            f"retained mass must be in (0, 1], got {retained_mass!r}")
    return -math.log(min(retained_mass, 1.0))
