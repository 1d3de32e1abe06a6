"""Chunked top-k approximation of an SFA.

The representation built here replaces regions of an SFA with single
edges that each carry a ranked list of at most k region strings, priced
at their original path products. Keeping k strings in each of m chunks
retains on the order of k^m distinct strings for roughly the storage of
one k-best list, and because every chunk is itself a valid sub-SFA
(unique entry and exit node, no edge poking into its interior), every
string the chunked graph emits is a string of the original automaton
with its original probability. Merging an arbitrary node set does not
have that property, so candidate regions are first repaired:

``find_min_sfa``
    grows a seed node set until it has a unique entry, a unique exit,
    and no external edge incident to an interior node. Growth follows
    three rules: join multiple entry candidates through their least
    common ancestor, join multiple exit candidates through their
    greatest common descendant, and absorb the far endpoint of any edge
    protruding into the interior. The degenerate fixed point is the
    whole graph, which is legal.

``collapse``
    replaces a valid region with one edge carrying the region's top-k
    strings.

``greedy_approximate``
    starts from the finest chunking (every edge a chunk, truncated to
    its k best labels) and repeatedly commits the adjacent-edge-triple
    merge that leaves the largest total retained mass, until at most m
    edges remain. Candidate regions and their ranked strings are cached
    between iterations and invalidated only when a committed merge
    touches their nodes. Scoring uses the fact that a region with entry
    s and exit f contributes multiplicatively between the forward mass
    F(s) and backward mass B(f), so each candidate is scored in O(1)
    from one F/B pass per iteration:

        mass_after = mass_now + F(s) * (kept - full) * B(f)

``best_assignment_bruteforce``
    exhaustively searches the per-block string choices for an arbitrary
    edge partition. Used by tests and experiments to probe the regime
    where blocks are not valid sub-SFAs and picking each block's k
    highest-probability segments stops being optimal.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

from .errors import CapExceededError, RegionError
from .inference import RankedEntry, RankedStrings, top_k, total_mass
from .sfa import Sfa, enumerate_paths

__all__ = ["ChunkInfo", "ChunkedSfa", "ChunkPartition", "AssignmentChoice",
           "find_min_sfa", "collapse", "greedy_approximate",
           "truncate_per_edge", "best_assignment_bruteforce"]

Edge = "tuple[int, int]"


@dataclass(frozen=True)
class ChunkInfo:
    """Ranked retained strings of one chunk edge plus the original node
    ids the chunk covers."""

    entries: RankedStrings
    nodes: frozenset[int]


@dataclass(frozen=True, eq=False)
class ChunkedSfa:
    """A chunk graph: generalized SFA plus per-edge chunk metadata."""

    graph: Sfa
    chunks: "dict[tuple[int, int], ChunkInfo]"
    m: int
    k: int

    def edge_order(self) -> "list[tuple[int, int]]":
        """Chunk edges sorted by (source topo position, dest topo position)."""
        ti = self.graph.topo_index()
        return sorted(self.graph.edges, key=lambda e: (ti[e[0]], ti[e[1]]))

    def edge_ids(self) -> "dict[tuple[int, int], int]":
        return {e: i for i, e in enumerate(self.edge_order())}

    def retained_mass(self) -> float:
        return total_mass(self.graph)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChunkedSfa):
            return NotImplemented
        return (self.graph == other.graph and self.chunks == other.chunks
                and self.m == other.m and self.k == other.k)


# -- region discovery ---------------------------------------------------------

def _region_shape(sfa: Sfa, region: "frozenset[int] | set[int]"):
    """Return (entry, exit) if ``region`` is a valid sub-SFA, else None."""
    if len(region) < 2:
        return None
    starts = []
    ends = []
    for n in region:
        if not any(p in region for p in sfa.in_edges(n)):
            starts.append(n)
        if not any(s in region for s in sfa.out_edges(n)):
            ends.append(n)
    if len(starts) != 1 or len(ends) != 1:
        return None
    s, f = starts[0], ends[0]
    interior = region - {s, f}
    for n in interior:
        for p in sfa.in_edges(n):
            if p not in region:
                return None
        for q in sfa.out_edges(n):
            if q not in region:
                return None
    return s, f


def _common_ancestor(sfa: Sfa, xs) -> int:
    """Latest-in-topo-order node from which every node in ``xs`` is reachable."""
    candidates = None
    for x in xs:
        anc = {y for y in sfa.nodes if x in sfa.descendants(y)}
        candidates = anc if candidates is None else candidates & anc
    ti = sfa.topo_index()
    return max(candidates, key=lambda n: ti[n])


def _common_descendant(sfa: Sfa, xs) -> int:
    """Earliest-in-topo-order node reachable from every node in ``xs``."""
    candidates = None
    for x in xs:
        desc = sfa.descendants(x)
        candidates = set(desc) if candidates is None else candidates & desc
    ti = sfa.topo_index()
    return min(candidates, key=lambda n: ti[n])


def find_min_sfa(sfa: Sfa, seed) -> frozenset[int]:
    """Grow ``seed`` to the minimal enclosing valid sub-SFA region.

    Deterministic given the fixed topological order. Returning the whole
    node set is legal (degenerate but valid).
    """
    seed = set(seed)
    if not seed:
        raise ValueError("seed must be nonempty")
    if not seed <= sfa.nodes:
        raise ValueError(f"seed nodes {sorted(seed - sfa.nodes)} not in the SFA")
    X = set(seed)
    ti = sfa.topo_index()
    while True:
        if len(X) == 1:
            (x,) = X
            succ = sfa.out_edges(x)
            if succ:
                X.add(min(succ, key=lambda n: ti[n]))
            else:
                X.add(max(sfa.in_edges(x), key=lambda n: ti[n]))
            continue
        shape = _region_shape(sfa, X)
        if shape is not None:
            return frozenset(X)
        starts = [n for n in X if not any(p in X for p in sfa.in_edges(n))]
        if len(starts) != 1:
            l = _common_ancestor(sfa, X)
            X.update(y for y in sfa.descendants(l)
                     if any(x in sfa.descendants(y) for x in X))
        ends = [n for n in X if not any(s in X for s in sfa.out_edges(n))]
        if len(ends) != 1:
            g = _common_descendant(sfa, X)
            X.update(y for y in sfa.nodes
                     if g in sfa.descendants(y)
                     and any(y in sfa.descendants(x) for x in X))
        starts = [n for n in X if not any(p in X for p in sfa.in_edges(n))]
        ends = [n for n in X if not any(s in X for s in sfa.out_edges(n))]
        boundary = set(starts) | set(ends)
        for n in list(X - boundary):
            for p in sfa.in_edges(n):
                X.add(p)
            for q in sfa.out_edges(n):
                X.add(q)


def _induced_sub_sfa(sfa: Sfa, region, entry: int, exit_: int) -> Sfa:
    arcs = [(u, v, label, prob) for u, v, label, prob in sfa.arcs()
            if u in region and v in region]
    return Sfa(entry, exit_, arcs)


def collapse(sfa: Sfa, region, k: int) -> Sfa:
    """Replace a valid ``region`` with one edge carrying its top-k strings.

    Probabilities on the new edge are the region path products; arcs
    outside the region are untouched. Raises :class:`RegionError` when
    the region is not a valid sub-SFA.
    """
    region = frozenset(region)
    shape = _region_shape(sfa, region)
    if shape is None:
        raise RegionError(f"node set {sorted(region)} is not a valid sub-SFA")
    entry, exit_ = shape
    ranked = top_k(_induced_sub_sfa(sfa, region, entry, exit_), k)
    arcs = [(u, v, label, prob) for u, v, label, prob in sfa.arcs()
            if u not in region or v not in region]
    arcs.extend((entry, exit_, e.string, e.prob) for e in ranked)
    return Sfa(sfa.start, sfa.final, arcs)


# -- greedy construction ------------------------------------------------------

def truncate_per_edge(sfa: Sfa, k: int) -> Sfa:
    """The finest chunking: keep only the k most probable labels per edge."""
    arcs = []
    for u, v in sfa.edges:
        ranked = sorted(sfa.labels(u, v).items(), key=lambda kv: (-kv[1], kv[0]))
        arcs.extend((u, v, label, prob) for label, prob in ranked[:k])
    return Sfa(sfa.start, sfa.final, arcs)


@dataclass
class _Candidate:
    region: frozenset[int]
    entry: int
    exit: int
    entries: RankedStrings
    kept_mass: float
    full_mass: float


def _make_candidate(graph: Sfa, seed, k: int) -> _Candidate:
    region = find_min_sfa(graph, seed)
    entry, exit_ = _region_shape(graph, region)
    sub = _induced_sub_sfa(graph, region, entry, exit_)
    ranked = top_k(sub, k)
    return _Candidate(region=region, entry=entry, exit=exit_, entries=ranked,
                      kept_mass=ranked.total_prob(), full_mass=total_mass(sub))


def _forward_mass(graph: Sfa) -> "dict[int, float]":
    mass = {n: 0.0 for n in graph.nodes}
    mass[graph.start] = 1.0
    for u in graph.topo():
        m = mass[u]
        if m == 0.0:
            continue
        for v in graph.out_edges(u):
            for prob in graph.labels(u, v).values():
                mass[v] += m * prob
    return mass


def _backward_mass(graph: Sfa) -> "dict[int, float]":
    mass = {n: 0.0 for n in graph.nodes}
    mass[graph.final] = 1.0
    for v in reversed(graph.topo()):
        m = mass[v]
        if m == 0.0:
            continue
        for u in graph.in_edges(v):
            total = sum(graph.labels(u, v).values())
            mass[u] += total * m
    return mass


def _apply_candidate(graph: Sfa, cand: _Candidate) -> Sfa:
    region = cand.region
    arcs = [(u, v, label, prob) for u, v, label, prob in graph.arcs()
            if u not in region or v not in region]
    arcs.extend((cand.entry, cand.exit, e.string, e.prob)
                for e in cand.entries)
    return Sfa(graph.start, graph.final, arcs)


def greedy_approximate(sfa: Sfa, m: int, k: int) -> ChunkedSfa:
    """Build the chunked representation with at most ``m`` edges and ``k``
    strings per edge.

    Starts from the per-edge chunking and repeatedly merges the
    adjacent-edge triple whose collapse leaves the largest whole-graph
    retained mass (ties broken by the lexicographically smallest triple of
    topo positions). With m >= |E| the per-edge chunking is returned as
    is; with m = 1 the result carries exactly the k-best strings of the
    whole automaton.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    graph = truncate_per_edge(sfa, k)
    chunks: dict[tuple[int, int], ChunkInfo] = {}
    for u, v in graph.edges:
        ranked = sorted(graph.labels(u, v).items(), key=lambda kv: (-kv[1], kv[0]))
        entries = tuple(RankedEntry(string=label, log_prob=math.log(prob),
                                    path=(u, v))
                        for label, prob in ranked)
        chunks[(u, v)] = ChunkInfo(entries=RankedStrings(entries=entries, k=k),
                                   nodes=frozenset((u, v)))

    cache: dict[tuple[int, int, int], _Candidate] = {}
    while len(graph.edges) > m:
        ti = graph.topo_index()
        triples = [(x, y, z)
                   for y in graph.topo()
                   for x in graph.in_edges(y)
                   for z in graph.out_edges(y)]
        if not triples:
            break
        forward = _forward_mass(graph)
        backward = _backward_mass(graph)
        current = forward[graph.final]
        best_key = None
        best_score = None
        best_cand = None
        for x, y, z in triples:
            cand = cache.get((x, y, z))
            if cand is None:
                cand = _make_candidate(graph, (x, y, z), k)
                cache[(x, y, z)] = cand
            score = current + (forward[cand.entry]
                               * (cand.kept_mass - cand.full_mass)
                               * backward[cand.exit])
            key = (ti[x], ti[y], ti[z])
            if best_score is None or score > best_score or (
                    score == best_score and key < best_key):
                best_score, best_key, best_cand = score, key, cand
        committed = best_cand
        internal = [e for e in graph.edges
                    if e[0] in committed.region and e[1] in committed.region]
        covered = frozenset().union(*(chunks[e].nodes for e in internal))
        for e in internal:
            del chunks[e]
        chunks[(committed.entry, committed.exit)] = ChunkInfo(
            entries=committed.entries, nodes=covered)
        graph = _apply_candidate(graph, committed)
        cache = {key: cand for key, cand in cache.items()
                 if not (cand.region & committed.region)}
    return ChunkedSfa(graph=graph, chunks=chunks, m=m, k=k)


# -- exhaustive assignment search ---------------------------------------------

@dataclass(frozen=True)
class ChunkPartition:
    """A partition of the edge set into blocks, each a connected subgraph."""

    blocks: "tuple[frozenset[tuple[int, int]], ...]"

    @staticmethod
    def per_edge(sfa: Sfa) -> "ChunkPartition":
        return ChunkPartition(tuple(frozenset({e}) for e in sfa.edges))

    @staticmethod
    def single_block(sfa: Sfa) -> "ChunkPartition":
        return ChunkPartition((frozenset(sfa.edges),))

    def check(self, sfa: Sfa) -> None:
        seen: set = set()
        for block in self.blocks:
            if not block:
                raise ValueError("empty block")
            if seen & block:
                raise ValueError("blocks overlap")
            seen |= block
            if not _weakly_connected(block):
                raise ValueError(f"block {sorted(block)} is not connected")
        if seen != set(sfa.edges):
            raise ValueError("blocks do not cover the edge set")


def _weakly_connected(edges: "frozenset[tuple[int, int]]") -> bool:
    adj: dict[int, set[int]] = {}
    for u, v in edges:
        adj.setdefault(u, set()).add(v)
        adj.setdefault(v, set()).add(u)
    nodes = list(adj)
    seen = {nodes[0]}
    frontier = [nodes[0]]
    while frontier:
        n = frontier.pop()
        for nb in adj[n]:
            if nb not in seen:
                seen.add(nb)
                frontier.append(nb)
    return len(seen) == len(nodes)


@dataclass(frozen=True)
class AssignmentChoice:
    """Per block: the chosen labeled segments (arc sequences)."""

    choices: "tuple[frozenset[tuple[tuple[tuple[int, int], str], ...]], ...]"


def best_assignment_bruteforce(sfa: Sfa, partition: ChunkPartition, k: int,
                               cap: int = 200_000):
    """Exhaustively find the mass-maximizing per-block segment choice.

    A full path is emitted iff, in every block, each maximal run of its
    arcs through that block is among the block's chosen segments. Only
    subsets of size min(k, #segments) are enumerated per block since mass
    is monotone in added segments. Raises :class:`CapExceededError` when
    the product of per-block subset counts exceeds ``cap``. Test and
    experiment machinery; not part of the query path.
    """
    partition.check(sfa)
    block_of: dict[tuple[int, int], int] = {}
    for i, block in enumerate(partition.blocks):
        for e in block:
            block_of[e] = i

    paths = enumerate_paths(sfa, cap=max(cap, 100_000))
    # split each path's arc sequence into maximal single-block runs
    seg_ids: list[dict[tuple, int]] = [dict() for _ in partition.blocks]
    path_reqs: list[tuple[int, float]] = []  # (bitmask over global seg ids, prob)
    n_segs = 0
    global_of: dict[tuple[int, int], int] = {}  # (block, local seg id) -> global
    for path in paths:
        req = 0
        run: list = []
        run_block = None
        arcs = list(path.arcs) + [None]
        for arc in arcs:
            b = block_of[arc[0]] if arc is not None else None
            if b != run_block and run:
                seg = tuple(run)
                local = seg_ids[run_block].setdefault(seg, len(seg_ids[run_block]))
                g = global_of.setdefault((run_block, local), n_segs)
                if g == n_segs:
                    n_segs += 1
                req |= 1 << g
                run = []
            run_block = b
            if arc is not None:
                run.append(arc)
        path_reqs.append((req, path.prob))

    block_segments: list[list[tuple]] = []
    for i, ids in enumerate(seg_ids):
        ordered = sorted(ids, key=lambda seg: ("".join(l for _, l in seg), seg))
        block_segments.append(ordered)

    total = 1
    for segs in block_segments:
        total *= math.comb(len(segs), min(k, len(segs)))
        if total > cap:
            raise CapExceededError(
                f"assignment search space exceeds cap={cap}")

    def subsets(block_idx: int):
        segs = block_segments[block_idx]
        ids = seg_ids[block_idx]
        for combo in itertools.combinations(segs, min(k, len(segs))):
            mask = 0
            for seg in combo:
                mask |= 1 << global_of[(block_idx, ids[seg])]
            yield frozenset(combo), mask

    best_mass = -1.0
    best_choice = None
    for picked in itertools.product(*(subsets(i)
                                      for i in range(len(partition.blocks)))):
        mask = 0
        for _, m_ in picked:
            mask |= m_
        mass = sum(prob for req, prob in path_reqs if req & ~mask == 0)
        if mass > best_mass:
            best_mass = mass
            best_choice = AssignmentChoice(tuple(ch for ch, _ in picked))
    return best_choice, best_mass
