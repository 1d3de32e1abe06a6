"""Regex-to-DFA compilation and match-probability evaluation.

Supported pattern dialect (the closure of the query shapes this system
is built for): literal characters, ``\\d`` for any digit, ``\\x`` for any
printable ASCII character or space, ``\\<c>`` for a literal ``<c>``,
``(a|b)`` alternation inside parentheses, ``(...)`` grouping, and
postfix ``*``. A bare ``.`` is a literal dot. Alternation is only valid
inside parentheses.

Compilation goes syntax tree -> Thompson NFA -> subset construction,
over character equivalence classes rather than raw characters so the
transition tables stay small. The default wrapped form accepts exactly
``any* L(pattern) any*`` (substring semantics, like SQL ``LIKE
'%p%'``) and its accepting state is absorbing, so a match can never be
retracted by later characters; whole-string matching is available with
``whole_string=True``.

``eval_sfa`` computes Pr[query] = the summed probability of accepted
emitted strings without enumerating them: it propagates, in topological
order, a per-node vector of probability mass per DFA state, advancing
the DFA one character at a time through each arc label. It works
unchanged on chunk graphs, whose labels are whole retained strings.

Matching is case-sensitive unless compiled with ``case_fold=True``. The
left anchor reported for index lookups is the maximal leading run of
literal non-space characters, lowercased; runs shorter than 3 characters
do not anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import PatternSyntaxError
from .inference import RankedStrings
from .sfa import Sfa

__all__ = ["QueryDfa", "LineMatch", "compile_pattern", "eval_sfa",
           "eval_strings", "rank_lines"]

_PRINTABLE = frozenset(chr(c) for c in range(32, 127))
_DIGITS = frozenset("0123456789")
_META = set("()|*\\")


# -- syntax tree ----------------------------------------------------------

@dataclass(frozen=True)
class _Leaf:
    chars: frozenset[str]
    literal: str | None = None  # set when the leaf is a single literal char


@dataclass(frozen=True)
class _Concat:
    items: tuple


@dataclass(frozen=True)
class _Alt:
    options: tuple


@dataclass(frozen=True)
class _Star:
    inner: object


class _Parser:
    def __init__(self, pattern: str):
        self.pattern = pattern
        self.pos = 0

    def error(self, message: str):
        raise PatternSyntaxError(message, self.pos)

    def peek(self) -> str | None:
        return self.pattern[self.pos] if self.pos < len(self.pattern) else None

    def parse(self):
        if not self.pattern:
            raise PatternSyntaxError("empty pattern", 0)
        node = self.concat(top_level=True)
        if self.pos < len(self.pattern):
            self.error(f"unexpected {self.pattern[self.pos]!r}")
        return node

    def concat(self, top_level: bool):
        items: list = []
        while True:
            c = self.peek()
            if c is None or c == ")" or c == "|":
                break
            items.append(self.atom())
            while self.peek() == "*":
                self.pos += 1
                if isinstance(items[-1], _Star):
                    self.error("nothing to repeat")
                items[-1] = _Star(items[-1])
        if not items:
            self.error("empty subpattern")
        if top_level and self.peek() == "|":
            self.error("alternation must be parenthesized")
        return items[0] if len(items) == 1 else _Concat(tuple(items))

    def atom(self):
        c = self.pattern[self.pos]
        if c == "(":
            self.pos += 1
            options = [self.concat(top_level=False)]
            while self.peek() == "|":
                self.pos += 1
                options.append(self.concat(top_level=False))
            if self.peek() != ")":
                self.error("unclosed group")
            self.pos += 1
            return options[0] if len(options) == 1 else _Alt(tuple(options))
        if c == ")":
            self.error("unmatched ')'")
        if c == "*":
            self.error("nothing to repeat")
        if c == "\\":
            if self.pos + 1 >= len(self.pattern):
                self.error("dangling escape")
            esc = self.pattern[self.pos + 1]
            self.pos += 2
            if esc == "d":
                return _Leaf(_DIGITS)
            if esc == "x":
                return _Leaf(_PRINTABLE)
            return _Leaf(frozenset(esc), literal=esc)
        self.pos += 1
        return _Leaf(frozenset(c), literal=c)


def _fold_case(node):
    if isinstance(node, _Leaf):
        chars = set(node.chars)
        for c in node.chars:
            chars.add(c.lower())
            chars.add(c.upper())
        return _Leaf(frozenset(chars), literal=node.literal)
    if isinstance(node, _Concat):
        return _Concat(tuple(_fold_case(i) for i in node.items))
    if isinstance(node, _Alt):
        return _Alt(tuple(_fold_case(o) for o in node.options))
    return _Star(_fold_case(node.inner))


def _leading_anchor(node) -> str | None:
    items = node.items if isinstance(node, _Concat) else (node,)
    run = []
    for item in items:
        if isinstance(item, _Leaf) and item.literal and item.literal != " ":
            run.append(item.literal)
        else:
            break
    anchor = "".join(run).lower()
    return anchor if len(anchor) >= 3 else None


def _max_match_len(node) -> int | None:
    if isinstance(node, _Leaf):
        return 1
    if isinstance(node, _Star):
        return None
    if isinstance(node, _Concat):
        total = 0
        for item in node.items:
            n = _max_match_len(item)
            if n is None:
                return None
            total += n
        return total
    lens = [_max_match_len(o) for o in node.options]
    return None if any(n is None for n in lens) else max(lens)


# -- NFA construction -------------------------------------------------------

class _Nfa:
    def __init__(self):
        self.n = 0
        self.eps: list[list[int]] = []
        self.moves: list[list[tuple[frozenset[int], int]]] = []

    def state(self) -> int:
        self.eps.append([])
        self.moves.append([])
        self.n += 1
        return self.n - 1

    def add_eps(self, a: int, b: int):
        self.eps[a].append(b)

    def add_move(self, a: int, classes: frozenset[int], b: int):
        self.moves[a].append((classes, b))


def _build_fragment(nfa: _Nfa, node, leaf_classes):
    if isinstance(node, _Leaf):
        a, b = nfa.state(), nfa.state()
        nfa.add_move(a, leaf_classes[node.chars], b)
        return a, b
    if isinstance(node, _Concat):
        first = prev = None
        for item in node.items:
            a, b = _build_fragment(nfa, item, leaf_classes)
            if first is None:
                first = a
            else:
                nfa.add_eps(prev, a)
            prev = b
        return first, prev
    if isinstance(node, _Alt):
        a, b = nfa.state(), nfa.state()
        for option in node.options:
            oa, ob = _build_fragment(nfa, option, leaf_classes)
            nfa.add_eps(a, oa)
            nfa.add_eps(ob, b)
        return a, b
    # star
    a, b = nfa.state(), nfa.state()
    ia, ib = _build_fragment(nfa, node.inner, leaf_classes)
    nfa.add_eps(a, ia)
    nfa.add_eps(a, b)
    nfa.add_eps(ib, ia)
    nfa.add_eps(ib, b)
    return a, b


# -- the compiled automaton ---------------------------------------------------

@dataclass(frozen=True)
class QueryDfa:
    """Deterministic, total automaton compiled from a pattern.

    ``trans[state][cls]`` gives the successor on any character of class
    ``cls``; ``class_of`` maps code points 0..127 (anything else behaves
    like the background class). In wrapped form ``absorbing`` is the one
    accepting state and is a fixed point of every transition.
    """

    pattern: str
    n_states: int
    start: int
    accepting: frozenset[int]
    class_of: tuple[int, ...]
    background: int
    trans: tuple[tuple[int, ...], ...]
    wrapped: bool
    case_fold: bool
    absorbing: int | None
    anchor: str | None
    max_match_len: int | None

    def cls(self, c: str) -> int:
        o = ord(c)
        return self.class_of[o] if o < 128 else self.background

    def walk(self, state: int, text: str) -> int:
        absorbing = self.absorbing
        trans = self.trans
        class_of = self.class_of
        for c in text:
            if state == absorbing:
                return state
            o = ord(c)
            state = trans[state][class_of[o] if o < 128 else self.background]
        return state

    def accepts(self, text: str) -> bool:
        return self.walk(self.start, text) in self.accepting


def compile_pattern(pattern: str, case_fold: bool = False,
                    whole_string: bool = False) -> QueryDfa:
    """Compile a dialect pattern; substring (wrapped) semantics by default."""
    ast = _Parser(pattern).parse()
    anchor = _leading_anchor(ast)
    max_len = _max_match_len(ast)
    if case_fold:
        ast = _fold_case(ast)

    # character equivalence classes: two characters are interchangeable iff
    # they belong to exactly the same leaf character sets
    leaf_sets: list[frozenset[str]] = []

    def collect(node):
        if isinstance(node, _Leaf):
            if node.chars not in leaf_sets:
                leaf_sets.append(node.chars)
        elif isinstance(node, _Concat):
            for i in node.items:
                collect(i)
        elif isinstance(node, _Alt):
            for o in node.options:
                collect(o)
        else:
            collect(node.inner)

    collect(ast)
    signatures: dict[tuple[bool, ...], int] = {}
    class_of = []
    for code in range(128):
        c = chr(code)
        sig = tuple(c in s for s in leaf_sets)
        if sig not in signatures:
            signatures[sig] = len(signatures)
        class_of.append(signatures[sig])
    background_sig = tuple(False for _ in leaf_sets)
    if background_sig not in signatures:
        signatures[background_sig] = len(signatures)
    background = signatures[background_sig]
    n_classes = len(signatures)
    # a class lies inside a leaf set iff that set's bit is on in its signature
    leaf_classes = {}
    for idx, s in enumerate(leaf_sets):
        leaf_classes[s] = frozenset(cls for sig, cls in signatures.items()
                                    if sig[idx])

    nfa = _Nfa()
    frag_start, frag_accept = _build_fragment(nfa, ast, leaf_classes)
    all_classes = frozenset(range(n_classes))
    if whole_string:
        nfa_start, nfa_accept = frag_start, frag_accept
    else:
        nfa_start = nfa.state()
        nfa.add_eps(nfa_start, frag_start)
        nfa.add_move(nfa_start, all_classes, nfa_start)
        nfa_accept = frag_accept

    def closure(states: frozenset[int]) -> frozenset[int]:
        seen = set(states)
        frontier = list(states)
        while frontier:
            s = frontier.pop()
            for t in nfa.eps[s]:
                if t not in seen:
                    seen.add(t)
                    frontier.append(t)
        return frozenset(seen)

    start_set = closure(frozenset({nfa_start}))
    dead = frozenset()
    absorb_marker = frozenset({-1})
    subsets: dict[frozenset[int], int] = {}
    trans_rows: list[list[int]] = []
    accepting: set[int] = set()
    absorbing: int | None = None
    worklist: list[frozenset[int]] = []

    def _intern_raw(subset: frozenset[int]) -> int:
        if subset in subsets:
            return subsets[subset]
        idx = len(subsets)
        subsets[subset] = idx
        trans_rows.append([0] * n_classes)
        worklist.append(subset)
        return idx

    def intern(subset: frozenset[int]) -> int:
        nonlocal absorbing
        if not whole_string and nfa_accept in subset:
            # substring semantics: a completed match can never be undone
            if absorbing is None:
                absorbing = _intern_raw(absorb_marker)
                accepting.add(absorbing)
            return absorbing
        return _intern_raw(subset)

    start_id = intern(start_set)
    while worklist:
        subset = worklist.pop()
        idx = subsets[subset]
        if subset == absorb_marker:
            for cls in range(n_classes):
                trans_rows[idx][cls] = idx
            continue
        if whole_string and nfa_accept in subset:
            accepting.add(idx)
        for cls in range(n_classes):
            targets = set()
            for s in subset:
                for classes, t in nfa.moves[s]:
                    if cls in classes:
                        targets.add(t)
            nxt = closure(frozenset(targets)) if targets else dead
            trans_rows[idx][cls] = intern(nxt)

    return QueryDfa(
        pattern=pattern,
        n_states=len(subsets),
        start=start_id,
        accepting=frozenset(accepting),
        class_of=tuple(class_of),
        background=background,
        trans=tuple(tuple(row) for row in trans_rows),
        wrapped=not whole_string,
        case_fold=case_fold,
        absorbing=absorbing,
        anchor=anchor,
        max_match_len=max_len,
    )


# -- evaluation ---------------------------------------------------------------

def eval_sfa(dfa: QueryDfa, sfa) -> float:
    """Pr[query] over an :class:`Sfa` or a chunk graph.

    One pass in topological order, carrying per node the probability mass
    sitting in each DFA state.
    """
    graph: Sfa = sfa.graph if hasattr(sfa, "graph") else sfa
    mass: dict[int, dict[int, float]] = {n: {} for n in graph.nodes}
    mass[graph.start][dfa.start] = 1.0
    walk = dfa.walk
    for u in graph.topo():
        here = mass[u]
        if not here:
            continue
        for v in graph.out_edges(u):
            acc = mass[v]
            for label, prob in graph.labels(u, v).items():
                for state, m in here.items():
                    s2 = walk(state, label)
                    acc[s2] = acc.get(s2, 0.0) + m * prob
    return sum(m for state, m in mass[graph.final].items()
               if state in dfa.accepting)


def eval_strings(dfa: QueryDfa, ranked: RankedStrings) -> float:
    """Sum of probabilities of accepted ranked strings (disjoint events)."""
    return sum(e.prob for e in ranked.entries if dfa.accepts(e.string))


@dataclass(frozen=True)
class LineMatch:
    """One corpus line with its match probability and 1-based rank."""

    line_id: int
    prob: float
    rank: int


def rank_lines(corpus, dfa: QueryDfa, mode: str, num_ans: int,
               k: int | None = None, m: int | None = None) -> list[LineMatch]:
    """Per-line Pr[query] under ``mode``, ranked best first.

    Returns at most ``num_ans`` lines with probability > 0, sorted by
    descending probability with ties broken by ascending line id.
    ``corpus`` is a :class:`staccato.store.Corpus`; ``mode`` is one of
    map, kmap, fullsfa, staccato.
    """
    if num_ans < 1:
        raise ValueError(f"num_ans must be >= 1, got {num_ans}")
    scored: list[tuple[float, int]] = []
    for line_id in corpus.line_ids():
        value = corpus.load_line(line_id, mode, k=k, m=m)
        if mode in ("map", "kmap"):
            prob = eval_strings(dfa, value)
        else:
            prob = eval_sfa(dfa, value)
        if prob > 0.0:
            scored.append((-prob, line_id))
    scored.sort()
    return [LineMatch(line_id=line, prob=-negp, rank=i + 1)
            for i, (negp, line) in enumerate(scored[:num_ans])]
