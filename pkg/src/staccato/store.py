"""File-backed corpus store.

A corpus is a directory of versioned text tables, one per representation,
with a manifest as the single commit point:

    <corpus>/
        manifest.tsv                 # catalog: lines, modes, checksums
        fullsfa/<line>.sfa           # verbatim sfa-v1 documents
        kmap_k<k>.tsv                # (line, rank, string, logprob)
        staccato_m<m>_k<k>/
            graph.tsv                # chunk-graph topology per line
            data.tsv                 # (line, edge, rank, string, logprob)
        truth.tsv                    # query_id -> line_id labels
        index_*.idx                  # posting indexes

Every artifact file carries a ``# <table> v1`` header and a 64-bit
content hash recorded in the manifest; loads verify the hash. Writers
take an advisory lock file and publish files with write-temp-then-rename,
manifest last, so a crash mid-materialize never leaves a manifest
pointing at missing or truncated artifacts. Readers never lock.

Log probabilities are stored as decimals with 12 significant digits;
that precision round-trips: re-serializing a loaded table reproduces it
byte for byte.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .approx import ChunkedSfa, ChunkInfo, greedy_approximate
from .errors import StoreError
from .inference import RankedEntry, RankedStrings, top_k
from .sfa import Sfa, escape_text, parse_sfa, unescape_text

__all__ = ["LineRecord", "CorpusManifest", "SizeReport", "Corpus", "ingest",
           "materialize", "measure_size", "load_line"]

_META_BYTES = 16  # per-string metadata constant of the size model


def _fmt_log(value: float) -> str:
    return f"{value:.12g}"


def _checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class _Lock:
    """Advisory single-writer lock (O_CREAT|O_EXCL on ``.lock``)."""

    def __init__(self, root: Path):
        self.path = root / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreError(
                f"corpus {self.path.parent} is locked by another writer "
                f"(remove {self.path} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


@dataclass(frozen=True)
class LineRecord:
    """Per-line catalog entry: provenance, artifact checksum, and the size
    statistics the cost model needs."""

    line_id: int
    doc: str
    lineno: int
    path: str
    checksum: str
    map_len: int      # length of the line's most probable string
    n_edges: int
    max_labels: int


@dataclass
class CorpusManifest:
    corpus_id: str
    lines: "list[LineRecord]" = field(default_factory=list)
    kmaps: "dict[int, tuple[str, str]]" = field(default_factory=dict)
    staccatos: "dict[tuple[int, int], tuple[str, str, str, str]]" = \
        field(default_factory=dict)

    def to_text(self) -> str:
        rows = ["# manifest v1", f"corpus\t{self.corpus_id}"]
        for r in self.lines:
            rows.append("line\t" + "\t".join(str(x) for x in (
                r.line_id, r.doc, r.lineno, r.path, r.checksum,
                r.map_len, r.n_edges, r.max_labels)))
        for k in sorted(self.kmaps):
            path, digest = self.kmaps[k]
            rows.append(f"kmap\t{k}\t{path}\t{digest}")
        for (m, k) in sorted(self.staccatos):
            gp, gh, dp, dh = self.staccatos[(m, k)]
            rows.append(f"staccato\t{m}\t{k}\t{gp}\t{gh}\t{dp}\t{dh}")
        return "\n".join(rows) + "\n"

    @staticmethod
    def from_text(text: str) -> "CorpusManifest":
        lines = text.splitlines()
        if not lines or lines[0] != "# manifest v1":
            raise StoreError("manifest.tsv: missing '# manifest v1' header")
        manifest = CorpusManifest(corpus_id="")
        for raw in lines[1:]:
            if not raw:
                continue
            kind, *rest = raw.split("\t")
            if kind == "corpus":
                manifest.corpus_id = rest[0]
            elif kind == "line":
                lid, doc, lineno, path, digest, mlen, nedg, mlab = rest
                manifest.lines.append(LineRecord(
                    int(lid), doc, int(lineno), path, digest,
                    int(mlen), int(nedg), int(mlab)))
            elif kind == "kmap":
                manifest.kmaps[int(rest[0])] = (rest[1], rest[2])
            elif kind == "staccato":
                manifest.staccatos[(int(rest[0]), int(rest[1]))] = \
                    (rest[2], rest[3], rest[4], rest[5])
            else:
                raise StoreError(f"manifest.tsv: unknown record {kind!r}")
        return manifest

    @property
    def modes(self) -> "list[str]":
        modes = ["fullsfa"] if self.lines else []
        modes += [f"kmap_k{k}" for k in sorted(self.kmaps)]
        modes += [f"staccato_m{m}_k{k}" for m, k in sorted(self.staccatos)]
        return modes


@dataclass(frozen=True)
class SizeReport:
    """Measured artifact bytes per mode next to the cost-model prediction
    (string length x retained strings plus 16 bytes of metadata each)."""

    measured: "dict[str, int]"
    predicted: "dict[str, int]"


class Corpus:
    """Handle on a corpus directory. Construction does not touch disk;
    use :meth:`open` for an existing corpus or :func:`ingest` to create."""

    def __init__(self, root, manifest: CorpusManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._cache: dict = {}

    @staticmethod
    def open(root) -> "Corpus":
        root = Path(root)
        mpath = root / "manifest.tsv"
        if not mpath.exists():
            raise StoreError(f"{root}: no manifest.tsv (not a corpus)")
        return Corpus(root, CorpusManifest.from_text(
            mpath.read_text(encoding="utf-8")))

    # -- basics ------------------------------------------------------------

    def line_ids(self) -> "list[int]":
        return [r.line_id for r in self.manifest.lines]

    def _record(self, line_id: int) -> LineRecord:
        for r in self.manifest.lines:
            if r.line_id == line_id:
                return r
        raise StoreError(f"no line {line_id} in corpus")

    def _read_checked(self, relpath: str, digest: str) -> str:
        path = self.root / relpath
        if not path.exists():
            raise StoreError(f"missing artifact {relpath}")
        data = path.read_bytes()
        if _checksum(data) != digest:
            raise StoreError(f"checksum mismatch on {relpath} (corrupt?)")
        return data.decode("utf-8")

    def _save_manifest(self) -> None:
        _write_atomic(self.root / "manifest.tsv", self.manifest.to_text())

    # -- materialization -----------------------------------------------------

    def materialize(self, mode: str, k: int, m: int | None = None,
                    workers: int = 1) -> CorpusManifest:
        """Build and persist per-line kmap or staccato artifacts."""
        if mode == "kmap":
            if k < 1:
                raise StoreError(f"kmap needs k >= 1, got {k}")
            with _Lock(self.root):
                self._materialize_kmap(k)
                self._save_manifest()
        elif mode == "staccato":
            if k < 1 or m is None or m < 1:
                raise StoreError(f"staccato needs m >= 1 and k >= 1")
            with _Lock(self.root):
                self._materialize_staccato(m, k, workers)
                self._save_manifest()
        else:
            raise StoreError(f"cannot materialize mode {mode!r}")
        return self.manifest

    def _materialize_kmap(self, k: int) -> None:
        rows = ["# kmap v1"]
        for record in self.manifest.lines:
            sfa = self.load_line(record.line_id, "fullsfa")
            for rank, entry in enumerate(top_k(sfa, k)):
                rows.append(f"{record.line_id}\t{rank}\t"
                            f"{escape_text(entry.string)}\t"
                            f"{_fmt_log(entry.log_prob)}")
        text = "\n".join(rows) + "\n"
        rel = f"kmap_k{k}.tsv"
        _write_atomic(self.root / rel, text)
        self.manifest.kmaps[k] = (rel, _checksum(text.encode("utf-8")))

    def _staccato_rows(self, line_id: int, chunked: ChunkedSfa):
        graph_rows = [f"meta\t{line_id}\t{chunked.graph.start}\t"
                      f"{chunked.graph.final}\t{chunked.m}\t{chunked.k}"]
        data_rows = []
        ids = chunked.edge_ids()
        for edge in chunked.edge_order():
            info = chunked.chunks[edge]
            nodes = ",".join(str(n) for n in sorted(info.nodes))
            graph_rows.append(f"edge\t{line_id}\t{ids[edge]}\t{edge[0]}\t"
                              f"{edge[1]}\t{nodes}")
            for rank, entry in enumerate(info.entries):
                data_rows.append(f"{line_id}\t{ids[edge]}\t{rank}\t"
                                 f"{escape_text(entry.string)}\t"
                                 f"{_fmt_log(entry.log_prob)}")
        return graph_rows, data_rows

    def _materialize_staccato(self, m: int, k: int, workers: int = 1) -> None:
        graph_rows = ["# staccato-graph v1"]
        data_rows = ["# staccato-data v1"]
        jobs = [(r.line_id, self.load_line(r.line_id, "fullsfa"), m, k)
                for r in self.manifest.lines]
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_approximate_job, jobs, chunksize=4))
        else:
            results = [_approximate_job(job) for job in jobs]
        for line_id, chunked in results:
            grows, drows = self._staccato_rows(line_id, chunked)
            graph_rows.extend(grows)
            data_rows.extend(drows)
        reldir = f"staccato_m{m}_k{k}"
        (self.root / reldir).mkdir(exist_ok=True)
        gtext = "\n".join(graph_rows) + "\n"
        dtext = "\n".join(data_rows) + "\n"
        _write_atomic(self.root / reldir / "graph.tsv", gtext)
        _write_atomic(self.root / reldir / "data.tsv", dtext)
        self.manifest.staccatos[(m, k)] = (
            f"{reldir}/graph.tsv", _checksum(gtext.encode("utf-8")),
            f"{reldir}/data.tsv", _checksum(dtext.encode("utf-8")))

    # -- loading ---------------------------------------------------------------

    def resolve_kmap(self, k: int | None) -> int:
        if k is not None:
            if k not in self.manifest.kmaps:
                raise StoreError(f"kmap k={k} not materialized "
                                 f"(have {sorted(self.manifest.kmaps)})")
            return k
        if not self.manifest.kmaps:
            raise StoreError("no kmap materialization in corpus")
        return min(self.manifest.kmaps)

    def resolve_staccato(self, m: int | None, k: int | None) -> tuple[int, int]:
        have = sorted(self.manifest.staccatos)
        matches = [mk for mk in have
                   if (m is None or mk[0] == m) and (k is None or mk[1] == k)]
        if not matches:
            raise StoreError(f"staccato (m={m}, k={k}) not materialized "
                             f"(have {have})")
        if len(matches) > 1:
            raise StoreError(f"ambiguous staccato selection {matches}; "
                             "pass --m/--k")
        return matches[0]

    def load_line(self, line_id: int, mode: str, k: int | None = None,
                  m: int | None = None):
        """Load one line's representation: an :class:`Sfa` for fullsfa, a
        :class:`RankedStrings` for map/kmap, a :class:`ChunkedSfa` for
        staccato."""
        if mode == "fullsfa":
            record = self._record(line_id)
            return parse_sfa(self._read_checked(record.path, record.checksum))
        if mode in ("map", "kmap"):
            kk = 1 if mode == "map" and k is None and 1 in self.manifest.kmaps \
                else self.resolve_kmap(k)
            table = self._kmap_table(kk)
            entries = table.get(line_id, ())
            if mode == "map":
                entries = entries[:1]
                return RankedStrings(entries=tuple(entries), k=1)
            return RankedStrings(entries=tuple(entries), k=kk)
        if mode == "staccato":
            mm, kk = self.resolve_staccato(m, k)
            return self._staccato_table(mm, kk)[line_id]
        raise StoreError(f"unknown mode {mode!r}")

    def _kmap_table(self, k: int):
        key = ("kmap", k)
        if key not in self._cache:
            rel, digest = self.manifest.kmaps[k]
            text = self._read_checked(rel, digest)
            lines = text.splitlines()
            if not lines or lines[0] != "# kmap v1":
                raise StoreError(f"{rel}: missing '# kmap v1' header")
            table: dict[int, list[RankedEntry]] = {}
            for raw in lines[1:]:
                if not raw:
                    continue
                lid, rank, string, logp = raw.split("\t")
                table.setdefault(int(lid), []).append(RankedEntry(
                    string=unescape_text(string), log_prob=float(logp),
                    path=()))
            self._cache[key] = {lid: tuple(entries)
                                for lid, entries in table.items()}
        return self._cache[key]

    def _staccato_table(self, m: int, k: int):
        key = ("staccato", m, k)
        if key not in self._cache:
            gp, gh, dp, dh = self.manifest.staccatos[(m, k)]
            gtext = self._read_checked(gp, gh)
            dtext = self._read_checked(dp, dh)
            glines = gtext.splitlines()
            dlines = dtext.splitlines()
            if not glines or glines[0] != "# staccato-graph v1":
                raise StoreError(f"{gp}: bad header")
            if not dlines or dlines[0] != "# staccato-data v1":
                raise StoreError(f"{dp}: bad header")
            meta: dict[int, tuple[int, int]] = {}
            edges: dict[int, dict[int, tuple[int, int, frozenset]]] = {}
            for raw in glines[1:]:
                if not raw:
                    continue
                kind, lid, *rest = raw.split("\t")
                lid = int(lid)
                if kind == "meta":
                    meta[lid] = (int(rest[0]), int(rest[1]))
                else:
                    eid, src, dst, nodes = rest
                    edges.setdefault(lid, {})[int(eid)] = (
                        int(src), int(dst),
                        frozenset(int(n) for n in nodes.split(",")))
            strings: dict[int, dict[int, list[tuple[str, float]]]] = {}
            for raw in dlines[1:]:
                if not raw:
                    continue
                lid, eid, rank, string, logp = raw.split("\t")
                strings.setdefault(int(lid), {}).setdefault(
                    int(eid), []).append(
                        (unescape_text(string), float(logp)))
            table: dict[int, ChunkedSfa] = {}
            for lid, (start, final) in meta.items():
                arcs = []
                chunks: dict[tuple[int, int], ChunkInfo] = {}
                for eid in sorted(edges.get(lid, {})):
                    src, dst, nodes = edges[lid][eid]
                    ranked = tuple(RankedEntry(string=s, log_prob=lp, path=())
                                   for s, lp in strings[lid][eid])
                    chunks[(src, dst)] = ChunkInfo(
                        entries=RankedStrings(entries=ranked, k=k),
                        nodes=nodes)
                    arcs.extend((src, dst, e.string, e.prob) for e in ranked)
                table[lid] = ChunkedSfa(graph=Sfa(start, final, arcs),
                                        chunks=chunks, m=m, k=k)
            self._cache[key] = table
        return self._cache[key]

    # -- truth and queries -----------------------------------------------------

    def save_truth(self, truth: "dict[str, set[int]]") -> None:
        rows = ["# truth v1"]
        for qid in sorted(truth):
            for line_id in sorted(truth[qid]):
                rows.append(f"{qid}\t{line_id}")
        with _Lock(self.root):
            _write_atomic(self.root / "truth.tsv", "\n".join(rows) + "\n")

    def load_truth(self, path=None) -> "dict[str, set[int]]":
        path = Path(path) if path else self.root / "truth.tsv"
        if not path.exists():
            raise StoreError(f"missing truth table {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != "# truth v1":
            raise StoreError(f"{path}: missing '# truth v1' header")
        truth: dict[str, set[int]] = {}
        for raw in lines[1:]:
            if not raw:
                continue
            qid, line_id = raw.split("\t")
            truth.setdefault(qid, set()).add(int(line_id))
        return truth

    # -- size accounting ---------------------------------------------------------

    def measure_size(self) -> SizeReport:
        measured: dict[str, int] = {}
        predicted: dict[str, int] = {}
        if self.manifest.lines:
            measured["fullsfa"] = sum(
                (self.root / r.path).stat().st_size
                for r in self.manifest.lines)
            predicted["fullsfa"] = sum(
                r.map_len * r.max_labels + _META_BYTES * r.map_len * r.max_labels
                for r in self.manifest.lines)
        for k, (rel, _) in self.manifest.kmaps.items():
            name = f"kmap_k{k}"
            measured[name] = (self.root / rel).stat().st_size
            predicted[name] = sum(r.map_len * k + _META_BYTES * k
                                  for r in self.manifest.lines)
        for (m, k), (gp, _, dp, _) in self.manifest.staccatos.items():
            name = f"staccato_m{m}_k{k}"
            measured[name] = ((self.root / gp).stat().st_size
                              + (self.root / dp).stat().st_size)
            predicted[name] = sum(r.map_len * k + _META_BYTES * m * k
                                  for r in self.manifest.lines)
        return SizeReport(measured=measured, predicted=predicted)


def _approximate_job(job):
    line_id, sfa, m, k = job
    return line_id, greedy_approximate(sfa, m, k)


def ingest(sfa_files, corpus_dir) -> Corpus:
    """Create (or replace) a corpus from sfa-v1 files, one line per file.

    Every file is parsed and validated before anything is written; an
    invalid file aborts the ingest naming the offender. Re-ingesting the
    same files reproduces the manifest byte for byte.
    """
    root = Path(corpus_dir)
    root.mkdir(parents=True, exist_ok=True)
    parsed: list[tuple[str, str, Sfa]] = []
    for path in sfa_files:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            sfa = parse_sfa(text)
        except Exception as err:
            raise StoreError(f"{path}: {err}") from err
        parsed.append((path.name, text, sfa))

    with _Lock(root):
        (root / "fullsfa").mkdir(exist_ok=True)
        records = []
        for line_id, (doc, text, sfa) in enumerate(parsed):
            rel = f"fullsfa/{line_id}.sfa"
            _write_atomic(root / rel, text)
            best = top_k(sfa, 1)
            records.append(LineRecord(
                line_id=line_id, doc=doc, lineno=line_id, path=rel,
                checksum=_checksum(text.encode("utf-8")),
                map_len=len(best.entries[0].string) if best.entries else 0,
                n_edges=len(sfa.edges),
                max_labels=sfa.max_labels_per_edge()))
        corpus_id = _checksum("\n".join(
            f"{r.doc}:{r.checksum}" for r in records).encode("utf-8"))
        manifest = CorpusManifest(corpus_id=corpus_id, lines=records)
        corpus = Corpus(root, manifest)
        corpus._save_manifest()
    return corpus


# module-level conveniences mirroring the operation names

def materialize(corpus: Corpus, mode: str, k: int, m: int | None = None,
                workers: int = 1) -> CorpusManifest:
    return corpus.materialize(mode, k=k, m=m, workers=workers)


def measure_size(corpus: Corpus) -> SizeReport:
    return corpus.measure_size()


def load_line(corpus: Corpus, line_id: int, mode: str, k: int | None = None,
              m: int | None = None):
    return corpus.load_line(line_id, mode, k=k, m=m)
