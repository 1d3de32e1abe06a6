"""Stochastic finite automaton (SFA) data model.

An SFA is a DAG with one start node and one final node whose arcs emit
strings with conditional probabilities. Every start-to-final labeled path
emits the concatenation of its arc labels with probability equal to the
product of its arc probabilities, so the automaton defines a discrete
distribution over strings. OCR engines produce the character-per-arc
special case; the collapse machinery in :mod:`staccato.approx` produces
the generalized multi-character-label form, which this module treats
uniformly.

Model invariants (checked by :func:`validate`):

* the graph is acyclic, the start node has in-degree 0, the final node
  has out-degree 0, and every node lies on some start-to-final path;
* at every non-final node the outgoing arc probabilities sum to 1
  (full SFAs only -- approximated graphs may have discarded mass);
* all stored probabilities are strictly positive;
* at every node, no outgoing arc label equals or is a prefix of another
  outgoing arc label. This per-node check is the cheap surrogate for the
  unique-path property: when it holds, two distinct labeled paths always
  emit distinct strings (they first diverge at some node, where their
  labels must differ at a position before either label ends).

Path probabilities are accumulated as sums of natural logs and
exponentiated at the API boundary; long OCR lines would underflow a
linear-space product. Forward mass sums stay in linear space, which is
safe at the path lengths this package targets.

Text format (sfa-v1, UTF-8, '#' comments, order irrelevant)::

    sfa v1
    start 0
    final 5
    arc 0 1 "F" 0.8

Labels are double-quoted with escapes \\" \\\\ \\n \\t and \\s (space);
probabilities are decimals in (0, 1]. Exactly one start and one final
record are required.

All values in this module are immutable once constructed and safe to
share across threads; operations are pure functions of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import CapExceededError, SfaSyntaxError, SfaValidationError

__all__ = [
    "Sfa",
    "LabeledPath",
    "Diagnostic",
    "parse_sfa",
    "serialize_sfa",
    "validate",
    "topo_order",
    "leq",
    "enumerate_paths",
    "enumerate_all",
]


@dataclass(frozen=True)
class Diagnostic:
    """One violated invariant with its witness node or edge."""

    code: str
    detail: str
    node: int | None = None
    edge: tuple[int, int] | None = None

    def __str__(self) -> str:
        where = ""
        if self.node is not None:
            where = f" at node {self.node}"
        elif self.edge is not None:
            where = f" at edge {self.edge}"
        return f"{self.code}{where}: {self.detail}"


@dataclass(frozen=True)
class LabeledPath:
    """A start-to-final walk: its arcs, emitted string, and log probability."""

    arcs: tuple[tuple[tuple[int, int], str], ...]
    string: str
    log_prob: float

    @property
    def prob(self) -> float:
        return math.exp(self.log_prob)

    @property
    def nodes(self) -> tuple[int, ...]:
        if not self.arcs:
            return ()
        return (self.arcs[0][0][0],) + tuple(e[1] for e, _ in self.arcs)


class Sfa:
    """Immutable SFA over non-negative integer node ids.

    ``arcs`` is an iterable of ``(src, dst, label, prob)``. Construction
    performs cheap structural checks only (ids, duplicate arcs, probability
    range); run :func:`validate` for the full invariant suite.
    """

    __slots__ = ("start", "final", "nodes", "edges", "_out", "_in",
                 "_topo", "_desc")

    def __init__(self, start: int, final: int,
                 arcs: "list[tuple[int, int, str, float]]"):
        out: dict[int, dict[int, dict[str, float]]] = {}
        inn: dict[int, dict[int, dict[str, float]]] = {}
        nodes = {start, final}
        for src, dst, label, prob in arcs:
            if src < 0 or dst < 0:
                raise SfaValidationError(
                    [Diagnostic("bad-node-id", f"negative id on arc ({src},{dst})")])
            if not label:
                raise SfaValidationError(
                    [Diagnostic("empty-label", f"arc ({src},{dst}) emits nothing",
                                edge=(src, dst))])
            if not (0.0 < prob <= 1.0):
                raise SfaValidationError(
                    [Diagnostic("bad-prob",
                                f"arc ({src},{dst},{label!r}) has probability {prob!r}",
                                edge=(src, dst))])
            labels = out.setdefault(src, {}).setdefault(dst, {})
            if label in labels:
                raise SfaValidationError(
                    [Diagnostic("duplicate-arc",
                                f"arc ({src},{dst},{label!r}) appears twice",
                                edge=(src, dst))])
            labels[label] = prob
            inn.setdefault(dst, {}).setdefault(src, {})[label] = prob
            nodes.add(src)
            nodes.add(dst)
        self.start = start
        self.final = final
        self.nodes = frozenset(nodes)
        self.edges = tuple(sorted((u, v) for u in out for v in out[u]))
        self._out = out
        self._in = inn
        self._topo: tuple[int, ...] | None = None
        self._desc: dict[int, frozenset[int]] | None = None

    # -- adjacency ---------------------------------------------------------

    def out_edges(self, u: int) -> "list[int]":
        return sorted(self._out.get(u, ()))

    def in_edges(self, v: int) -> "list[int]":
        return sorted(self._in.get(v, ()))

    def labels(self, u: int, v: int) -> "dict[str, float]":
        return dict(self._out.get(u, {}).get(v, {}))

    def arcs(self):
        """All arcs as ``(src, dst, label, prob)``, deterministically sorted."""
        for u, v in self.edges:
            for label in sorted(self._out[u][v]):
                yield u, v, label, self._out[u][v][label]

    @property
    def n_arcs(self) -> int:
        return sum(len(m) for d in self._out.values() for m in d.values())

    def max_labels_per_edge(self) -> int:
        counts = [len(m) for d in self._out.values() for m in d.values()]
        return max(counts, default=0)

    # -- cached traversal structure -----------------------------------------

    def topo(self) -> tuple[int, ...]:
        """Deterministic topological order (Kahn's algorithm, ties by id)."""
        if self._topo is None:
            import heapq
            indeg = {n: 0 for n in self.nodes}
            for _, v in self.edges:
                indeg[v] += 1
            ready = [n for n in self.nodes if indeg[n] == 0]
            heapq.heapify(ready)
            order = []
            while ready:
                u = heapq.heappop(ready)
                order.append(u)
                for v in self.out_edges(u):
                    indeg[v] -= 1
                    if indeg[v] == 0:
                        heapq.heappush(ready, v)
            if len(order) != len(self.nodes):
                raise SfaValidationError(
                    [Diagnostic("cycle", "graph contains a cycle")])
            self._topo = tuple(order)
        return self._topo

    def topo_index(self) -> "dict[int, int]":
        return {n: i for i, n in enumerate(self.topo())}

    def descendants(self, u: int) -> frozenset[int]:
        """Nodes reachable from ``u``, including ``u`` itself."""
        if self._desc is None:
            desc: dict[int, frozenset[int]] = {}
            for n in reversed(self.topo()):
                acc = {n}
                for v in self.out_edges(n):
                    acc.update(desc[v])
                desc[n] = frozenset(acc)
            self._desc = desc
        return self._desc[u]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sfa):
            return NotImplemented
        return (self.start == other.start and self.final == other.final
                and self._out == other._out)

    def __hash__(self):
        return hash((self.start, self.final, tuple(self.arcs())))

    def __repr__(self) -> str:
        return (f"Sfa(start={self.start}, final={self.final}, "
                f"nodes={len(self.nodes)}, edges={len(self.edges)}, "
                f"arcs={self.n_arcs})")


# -- text format -------------------------------------------------------------

_ESCAPES = {'"': '\\"', "\\": "\\\\", "\n": "\\n", "\t": "\\t", " ": "\\s"}
_UNESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "s": " "}


def _escape_label(label: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in label)


def escape_text(text: str) -> str:
    """Escape a string for single-field storage (same escapes as labels)."""
    return _escape_label(text)


def unescape_text(text: str) -> str:
    """Inverse of :func:`escape_text`."""
    out = []
    i = 0
    while i < len(text):
        c = text[i]
        if c == "\\":
            if i + 1 >= len(text) or text[i + 1] not in _UNESCAPES:
                raise SfaSyntaxError(f"bad escape in field {text!r}", 1, i + 1)
            out.append(_UNESCAPES[text[i + 1]])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _scan_label(text: str, pos: int, lineno: int) -> tuple[str, int]:
    """Read a double-quoted label starting at ``text[pos]``; returns (label, end)."""
    if pos >= len(text) or text[pos] != '"':
        raise SfaSyntaxError("expected opening quote for label", lineno, pos + 1)
    out = []
    i = pos + 1
    while i < len(text):
        c = text[i]
        if c == '"':
            return "".join(out), i + 1
        if c == "\\":
            if i + 1 >= len(text):
                raise SfaSyntaxError("dangling escape in label", lineno, i + 1)
            esc = text[i + 1]
            if esc not in _UNESCAPES:
                raise SfaSyntaxError(f"unknown escape '\\{esc}'", lineno, i + 1)
            out.append(_UNESCAPES[esc])
            i += 2
            continue
        if c == "\t":
            raise SfaSyntaxError("raw tab in label; use \\t", lineno, i + 1)
        out.append(c)
        i += 1
    raise SfaSyntaxError("unterminated label", lineno, pos + 1)


def _parse_int(tok: str, what: str, lineno: int) -> int:
    try:
        value = int(tok)
    except ValueError:
        raise SfaSyntaxError(f"{what} must be an integer, got {tok!r}", lineno) from None
    if value < 0:
        raise SfaSyntaxError(f"{what} must be non-negative, got {tok}", lineno)
    return value


def parse_sfa(text: str) -> Sfa:
    """Parse an sfa-v1 document and return a fully validated :class:`Sfa`.

    Raises :class:`SfaSyntaxError` on malformed records and
    :class:`SfaValidationError` when the parsed graph violates a model
    invariant (normalization, acyclicity, unique start/final, ...).
    """
    lines = text.splitlines()
    if not lines:
        raise SfaSyntaxError("empty document", 1)
    start: int | None = None
    final: int | None = None
    arcs: list[tuple[int, int, str, float]] = []
    saw_header = False
    for lineno, raw in enumerate(lines, start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        # '#' inside a quoted label must survive comment stripping; records
        # without quotes can simply be cut at the first '#'
        line = stripped if '"' in stripped else stripped.split("#", 1)[0].strip()
        if not line:
            continue
        if not saw_header:
            if line != "sfa v1":
                raise SfaSyntaxError("expected header 'sfa v1'", lineno, 1)
            saw_header = True
            continue
        fields = line.split(None, 1)
        kind = fields[0]
        if kind == "start" or kind == "final":
            if len(fields) != 2:
                raise SfaSyntaxError(f"'{kind}' needs a node id", lineno)
            node = _parse_int(fields[1].split("#", 1)[0].strip(), kind, lineno)
            if kind == "start":
                if start is not None:
                    raise SfaSyntaxError("multiple start records", lineno)
                start = node
            else:
                if final is not None:
                    raise SfaSyntaxError("multiple final records", lineno)
                final = node
        elif kind == "arc":
            rest = fields[1] if len(fields) == 2 else ""
            toks = rest.split(None, 2)
            if len(toks) != 3:
                raise SfaSyntaxError("arc needs: src dst \"label\" prob", lineno)
            src = _parse_int(toks[0], "arc src", lineno)
            dst = _parse_int(toks[1], "arc dst", lineno)
            offset = line.find('"')
            if offset < 0:
                raise SfaSyntaxError("arc label must be double-quoted", lineno)
            label, end = _scan_label(line, offset, lineno)
            prob_tok = line[end:].split("#", 1)[0].strip()
            if not prob_tok:
                raise SfaSyntaxError("arc is missing its probability", lineno, end + 1)
            try:
                prob = float(prob_tok)
            except ValueError:
                raise SfaSyntaxError(f"bad probability {prob_tok!r}", lineno,
                                     end + 1) from None
            if not (0.0 < prob <= 1.0):
                raise SfaSyntaxError(
                    f"probability {prob_tok} outside (0, 1]", lineno, end + 1)
            arcs.append((src, dst, label, prob))
        else:
            raise SfaSyntaxError(f"unknown record kind {kind!r}", lineno, 1)
    if not saw_header:
        raise SfaSyntaxError("missing 'sfa v1' header", 1)
    if start is None:
        raise SfaSyntaxError("missing start record", len(lines))
    if final is None:
        raise SfaSyntaxError("missing final record", len(lines))
    sfa = Sfa(start, final, arcs)
    problems = validate(sfa)
    if problems:
        raise SfaValidationError(problems)
    return sfa


def serialize_sfa(sfa: Sfa) -> str:
    """Render an :class:`Sfa` as canonical sfa-v1 text.

    Arc order and float formatting are deterministic, and probabilities use
    ``repr`` (shortest round-tripping decimal), so parse(serialize(x))
    reproduces x exactly.
    """
    out = ["sfa v1", f"start {sfa.start}", f"final {sfa.final}"]
    for u, v, label, prob in sfa.arcs():
        out.append(f'arc {u} {v} "{_escape_label(label)}" {prob!r}')
    return "\n".join(out) + "\n"


# -- validation ---------------------------------------------------------------

_NORM_TOL = 1e-9


def validate(sfa: Sfa, check_normalization: bool = True) -> "list[Diagnostic]":
    """Check every model invariant; returns an empty list iff all hold.

    ``check_normalization=False`` skips the unit outgoing-mass check, which
    by design does not hold for approximated graphs that discarded strings.
    """
    diags: list[Diagnostic] = []
    indeg = {n: 0 for n in sfa.nodes}
    outdeg = {n: 0 for n in sfa.nodes}
    for u, v in sfa.edges:
        outdeg[u] += 1
        indeg[v] += 1

    for n in sorted(sfa.nodes):
        if indeg[n] == 0 and n != sfa.start:
            diags.append(Diagnostic("no-unique-start",
                                    f"node {n} has in-degree 0 but is not the start",
                                    node=n))
        if outdeg[n] == 0 and n != sfa.final:
            diags.append(Diagnostic("no-unique-final",
                                    f"node {n} has out-degree 0 but is not the final",
                                    node=n))
    if indeg[sfa.start] > 0:
        diags.append(Diagnostic("start-has-in-edges",
                                f"start node {sfa.start} has in-degree {indeg[sfa.start]}",
                                node=sfa.start))
    if outdeg[sfa.final] > 0:
        diags.append(Diagnostic("final-has-out-edges",
                                f"final node {sfa.final} has out-degree {outdeg[sfa.final]}",
                                node=sfa.final))

    try:
        order = sfa.topo()
    except SfaValidationError as err:
        diags.extend(err.diagnostics)
        return diags

    # every node on some start->final path: reachable from start and
    # co-reachable from final
    reach = {sfa.start}
    for n in order:
        if n in reach:
            reach.update(sfa.out_edges(n))
    coreach = {sfa.final}
    for n in reversed(order):
        if n in coreach:
            coreach.update(sfa.in_edges(n))
    for n in sorted(sfa.nodes):
        if n not in reach or n not in coreach:
            diags.append(Diagnostic("not-on-path",
                                    f"node {n} lies on no start-to-final path",
                                    node=n))

    for n in sorted(sfa.nodes):
        if n == sfa.final:
            continue
        arcs = [(label, v) for v in sfa.out_edges(n)
                for label in sorted(sfa._out[n][v])]
        if check_normalization:
            mass = sum(sfa._out[n][v][label] for label, v in arcs)
            if abs(mass - 1.0) > _NORM_TOL:
                diags.append(Diagnostic(
                    "normalization",
                    f"outgoing mass at node {n} is {mass:.12g} (deficit {1.0 - mass:.3g})",
                    node=n))
        # unique-path surrogate: no outgoing label may equal or prefix another
        arcs.sort()
        for (a, va), (b, vb) in zip(arcs, arcs[1:]):
            if b.startswith(a):
                diags.append(Diagnostic(
                    "unique-path-surrogate",
                    f"labels {a!r} (to {va}) and {b!r} (to {vb}) at node {n} "
                    "share a prefix",
                    node=n))
    return diags


# -- order utilities ----------------------------------------------------------

def topo_order(sfa: Sfa) -> tuple[int, ...]:
    """Fixed linear extension of the node partial order (ties by node id)."""
    return sfa.topo()


def leq(sfa: Sfa, u: int, v: int) -> bool:
    """Reflexive reachability: True iff ``v`` is reachable from ``u``."""
    return v in sfa.descendants(u)


# -- exhaustive enumeration (the oracle everything else is tested against) ----

def enumerate_paths(sfa: Sfa, cap: int = 100_000) -> "list[LabeledPath]":
    """All start-to-final labeled paths, highest probability first.

    Ties are broken by emitted string, then by node sequence, matching the
    ranking used everywhere else in the package. Raises
    :class:`CapExceededError` once more than ``cap`` paths exist.
    """
    results: list[LabeledPath] = []
    stack: list[tuple[int, tuple, str, float]] = [(sfa.start, (), "", 0.0)]
    while stack:
        node, arcs, string, logp = stack.pop()
        if node == sfa.final:
            results.append(LabeledPath(arcs, string, logp))
            if len(results) > cap:
                raise CapExceededError(f"more than {cap} labeled paths")
            continue
        for v in sfa.out_edges(node):
            for label, prob in sfa._out[node][v].items():
                stack.append((v, arcs + (((node, v), label),),
                              string + label, logp + math.log(prob)))
    results.sort(key=lambda p: (-p.log_prob, p.string, p.nodes))
    return results


def enumerate_all(sfa: Sfa, cap: int = 100_000) -> "list[tuple[str, float]]":
    """Exhaustive ``(string, prob)`` list in descending probability order."""
    return [(p.string, p.prob) for p in enumerate_paths(sfa, cap)]
