"""Dictionary-based inverted index over chunk graphs.

Indexing every term a chunk graph can emit is hopeless (the emitted set
grows exponentially with the chunk count), so the index is restricted to
a user-supplied dictionary. The dictionary is compiled to a trie-shaped
DFA; index construction then walks each line's chunk graph once, in
topological order of its edges, scanning every retained string of every
chunk. A fresh match may start at any character offset, and a partial
match that is still alive at the end of a string is carried into the
successor edges as an *augmented state*: the pair (trie state, posting
set), where the postings remember where the match started. An edge's
incoming augmented states are the union over its parent edges, so term
occurrences straddling any number of chunk boundaries are found, and the
posting always records the start location (line, edge, path index,
character offset).

Term scanning folds case to lowercase; downstream query evaluation stays
case-sensitive, so the index over-selects candidates but never changes a
probability.

``project`` extracts the bounded-depth sub-graph around a posting
(breadth-first over edges, then closed into a valid sub-SFA) together
with the forward mass entering it and the backward mass leaving it.
``indexed_query`` unions the projections of a line's anchor postings,
evaluates the query DFA once over the union seeded with the forward
mass, and scales by the backward mass; in-projection matches therefore
get exactly their filescan probability.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

from .approx import ChunkedSfa, _induced_sub_sfa, _region_shape, find_min_sfa
from .errors import StaccatoError
from .query import LineMatch, QueryDfa, compile_pattern, eval_sfa, rank_lines
from .sfa import Sfa

__all__ = ["TrieDfa", "Posting", "PostingIndex", "Projection", "build_trie",
           "index_line", "build_index", "merge_indexes", "project",
           "indexed_query", "save_index", "load_index", "load_dictionary",
           "DEFAULT_STAR_SLACK"]

DEFAULT_STAR_SLACK = 16  # extra projection edges for unbounded patterns


# -- dictionary trie ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrieDfa:
    """Trie-shaped DFA over lowercase terms; state 0 is the root and also
    the miss sentinel (real children always get ids >= 1)."""

    trans: tuple[dict[str, int], ...]
    term_of: dict[int, str]
    terms: frozenset[str]

    def step(self, state: int, c: str) -> int:
        return self.trans[state].get(c, 0)

    def lookup(self, term: str) -> int:
        state = 0
        for c in term.lower():
            state = self.step(state, c)
            if not state:
                return 0
        return state if state in self.term_of else 0

    def __contains__(self, term: str) -> bool:
        return term.lower() in self.terms


def build_trie(terms) -> TrieDfa:
    """Build the dictionary trie; duplicates are dropped silently."""
    trans: list[dict[str, int]] = [{}]
    term_of: dict[int, str] = {}
    seen: set[str] = set()
    for raw in terms:
        term = raw.lower()
        if not term:
            raise StaccatoError("empty dictionary term")
        if not term.isascii():
            raise StaccatoError(f"non-ASCII dictionary term {raw!r}")
        if term in seen:
            continue
        seen.add(term)
        state = 0
        for c in term:
            nxt = trans[state].get(c)
            if nxt is None:
                nxt = len(trans)
                trans.append({})
                trans[state][c] = nxt
            state = nxt
        term_of[state] = term
    if not seen:
        raise StaccatoError("dictionary is empty")
    return TrieDfa(trans=tuple(trans), term_of=term_of, terms=frozenset(seen))


def load_dictionary(path) -> list[str]:
    """One lowercase term per line; blank lines and '#' comments ignored."""
    terms = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            term = raw.strip()
            if term and not term.startswith("#"):
                terms.append(term.lower())
    return terms


# -- postings -----------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Posting:
    """Start location of a term occurrence: which line, which chunk edge,
    which ranked string on that edge, and the 0-based character offset."""

    line: int
    edge: int
    path: int
    offset: int


@dataclass(frozen=True, eq=False)
class PostingIndex:
    """term -> postings, plus the full dictionary term set (terms with no
    postings stay distinguishable from terms outside the dictionary)."""

    terms: frozenset[str]
    postings: "dict[str, frozenset[Posting]]"

    def get(self, term: str) -> frozenset[Posting]:
        return self.postings.get(term.lower(), frozenset())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PostingIndex):
            return NotImplemented
        return self.terms == other.terms and self.postings == other.postings


def _run_dfa(trie: TrieDfa, edge_id: int, line_id: int,
             entries, aug_in: "dict[int, set[Posting]]",
             sink: "dict[str, set[Posting]]") -> "dict[int, set[Posting]]":
    """Scan one chunk edge's ranked strings; returns the augmented states
    that survive past the end of the edge."""
    aug_out: dict[int, set[Posting]] = {}
    for path_idx, entry in enumerate(entries):
        text = entry.string.lower()
        # fresh matches: seed the root at every offset
        live: list[tuple[int, int]] = [(0, 0)]
        for j, c in enumerate(text):
            nxt_live: list[tuple[int, int]] = []
            for state, offset in live:
                nxt = trie.step(state, c)
                if nxt:
                    nxt_live.append((nxt, offset))
                    term = trie.term_of.get(nxt)
                    if term is not None:
                        sink.setdefault(term, set()).add(
                            Posting(line_id, edge_id, path_idx, offset))
            nxt_live.append((0, j + 1))
            live = nxt_live
        for state, offset in live:
            if state:
                aug_out.setdefault(state, set()).add(
                    Posting(line_id, edge_id, path_idx, offset))
        # matches continuing from parent edges
        for state, carried in aug_in.items():
            cur = state
            alive = True
            for c in text:
                cur = trie.step(cur, c)
                if not cur:
                    alive = False
                    break
                term = trie.term_of.get(cur)
                if term is not None:
                    sink.setdefault(term, set()).update(carried)
            if alive:
                aug_out.setdefault(cur, set()).update(carried)
    return aug_out


def index_line(chunked: ChunkedSfa, trie: TrieDfa, line_id: int
               ) -> "dict[str, set[Posting]]":
    """All dictionary-term postings of one line's chunk graph."""
    graph = chunked.graph
    ids = chunked.edge_ids()
    sink: dict[str, set[Posting]] = {}
    # augmented states surviving each edge, keyed by edge
    survived: dict[tuple[int, int], dict[int, set[Posting]]] = {}
    for e in chunked.edge_order():
        u, v = e
        aug_in: dict[int, set[Posting]] = {}
        for w in graph.in_edges(u):
            for state, carried in survived.get((w, u), {}).items():
                aug_in.setdefault(state, set()).update(carried)
        survived[e] = _run_dfa(trie, ids[e], line_id,
                               chunked.chunks[e].entries, aug_in, sink)
    return sink


def build_index(chunked_by_line: "dict[int, ChunkedSfa]",
                trie: TrieDfa) -> PostingIndex:
    """Index every line independently, then unify the posting shards."""
    merged: dict[str, set[Posting]] = {}
    for line_id in sorted(chunked_by_line):
        for term, postings in index_line(chunked_by_line[line_id], trie,
                                         line_id).items():
            merged.setdefault(term, set()).update(postings)
    return PostingIndex(
        terms=trie.terms,
        postings={t: frozenset(p) for t, p in merged.items()})


def merge_indexes(indexes) -> PostingIndex:
    terms: set[str] = set()
    merged: dict[str, set[Posting]] = {}
    for index in indexes:
        terms |= index.terms
        for term, postings in index.postings.items():
            merged.setdefault(term, set()).update(postings)
    return PostingIndex(terms=frozenset(terms),
                        postings={t: frozenset(p) for t, p in merged.items()})


# -- projection ---------------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    """A valid sub chunk graph around a posting, with the retained mass
    flowing into its entry (prefix) and out of its exit (suffix)."""

    graph: Sfa
    nodes: frozenset[int]
    entry: int
    exit: int
    prefix_mass: float
    suffix_mass: float


def _ball(graph: Sfa, origin: int, depth: int) -> set[int]:
    seen = {origin}
    frontier = [origin]
    for _ in range(max(depth, 1)):
        nxt = []
        for n in frontier:
            for v in graph.out_edges(n):
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if not nxt:
            break
        frontier = nxt
    return seen


def _boundary_masses(graph: Sfa):
    forward = {n: 0.0 for n in graph.nodes}
    forward[graph.start] = 1.0
    for u in graph.topo():
        if forward[u] == 0.0:
            continue
        for v in graph.out_edges(u):
            forward[v] += forward[u] * sum(graph.labels(u, v).values())
    backward = {n: 0.0 for n in graph.nodes}
    backward[graph.final] = 1.0
    for v in reversed(graph.topo()):
        if backward[v] == 0.0:
            continue
        for u in graph.in_edges(v):
            backward[u] += backward[v] * sum(graph.labels(u, v).values())
    return forward, backward


def project(chunked: ChunkedSfa, posting: Posting, depth: int) -> Projection:
    """Sub chunk graph spanned by a breadth-first ball of ``depth`` edges
    from the posting's edge source, closed into a valid sub-SFA."""
    order = chunked.edge_order()
    if not (0 <= posting.edge < len(order)):
        raise StaccatoError(f"posting references unknown edge {posting.edge}")
    graph = chunked.graph
    origin = order[posting.edge][0]
    region = find_min_sfa(graph, _ball(graph, origin, depth))
    entry, exit_ = _region_shape(graph, region)
    forward, backward = _boundary_masses(graph)
    return Projection(graph=_induced_sub_sfa(graph, region, entry, exit_),
                      nodes=region, entry=entry, exit=exit_,
                      prefix_mass=forward[entry], suffix_mass=backward[exit_])


# -- the indexed query path -----------------------------------------------------

def indexed_query(pattern: str, index: PostingIndex, corpus, num_ans: int,
                  m: int | None = None, k: int | None = None,
                  case_fold: bool = False,
                  star_slack: int = DEFAULT_STAR_SLACK) -> list[LineMatch]:
    """Answer an anchored pattern through the posting index.

    Candidate lines are those with at least one posting for the pattern's
    anchor term; each is scored by evaluating the wrapped DFA over the
    union of its postings' projections, scaled by the boundary masses.
    Falls back to a filescan (with a warning) when the pattern has no
    anchor in the dictionary.
    """
    dfa = compile_pattern(pattern, case_fold=case_fold)
    anchor = dfa.anchor
    if anchor is None or anchor not in index.terms:
        warnings.warn(
            f"pattern {pattern!r} has no dictionary anchor; falling back to "
            "filescan", stacklevel=2)
        return rank_lines(corpus, dfa, "staccato", num_ans, k=k, m=m)
    postings = index.get(anchor)
    if not postings:
        return []
    depth = dfa.max_match_len
    if depth is None:
        depth = len(anchor) + star_slack
    by_line: dict[int, list[Posting]] = {}
    for posting in postings:
        by_line.setdefault(posting.line, []).append(posting)
    scored: list[tuple[float, int]] = []
    for line_id in sorted(by_line):
        chunked = corpus.load_line(line_id, "staccato", m=m, k=k)
        graph = chunked.graph
        order = chunked.edge_order()
        seeds: set[int] = set()
        for posting in by_line[line_id]:
            seeds |= _ball(graph, order[posting.edge][0], depth)
        region = find_min_sfa(graph, seeds)
        entry, exit_ = _region_shape(graph, region)
        forward, backward = _boundary_masses(graph)
        sub = _induced_sub_sfa(graph, region, entry, exit_)
        prob = forward[entry] * eval_sfa(dfa, sub) * backward[exit_]
        if prob > 0.0:
            scored.append((-prob, line_id))
    scored.sort()
    return [LineMatch(line_id=line, prob=-negp, rank=i + 1)
            for i, (negp, line) in enumerate(scored[:num_ans])]


# -- index persistence ----------------------------------------------------------

def save_index(index: PostingIndex, path) -> None:
    """Write the ``idx v1`` text format: ``term<TAB>postings`` sorted by
    term, each posting ``line:edge:path:offset``. Terms without postings
    keep an empty postings field so dictionary membership survives."""
    lines = ["idx v1"]
    for term in sorted(index.terms):
        ps = sorted(index.postings.get(term, ()))
        lines.append(term + "\t" + ",".join(
            f"{p.line}:{p.edge}:{p.path}:{p.offset}" for p in ps))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_index(path) -> PostingIndex:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "idx v1":
        raise StaccatoError(f"{path}: missing 'idx v1' header")
    terms: set[str] = set()
    postings: dict[str, frozenset[Posting]] = {}
    for raw in lines[1:]:
        if not raw:
            continue
        term, _, rest = raw.partition("\t")
        terms.add(term)
        if rest:
            ps = set()
            for item in rest.split(","):
                line, edge, pathi, offset = (int(x) for x in item.split(":"))
                ps.add(Posting(line, edge, pathi, offset))
            postings[term] = frozenset(ps)
    return PostingIndex(terms=frozenset(terms), postings=postings)
