"""Corpus scoring, keep manifests, and corpus statistics.

score_corpus streams sharded JSONL through a trained classifier and splits
every document into a kept or rejected stream by thresholding the positive
class probability (kept means score >= threshold). Shards are independent
units of work: they can run in parallel, and a completed-shard ledger makes
interrupted runs restartable without rescoring finished shards. Unreadable
shards are reported and skipped so one bad file cannot sink a long run;
malformed records are skipped, counted and logged.

Keep manifests record the sorted kept ids under a corpus fingerprint, which
intersect() checks before combining runs, so manifests from different
corpora never silently intersect.
"""

from __future__ import annotations

import bisect
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .classifier import ClassifierModel, predict_tokens
from .documents import (
    MalformedRecord,
    corpus_fingerprint,
    decode_record,
    iter_shard_lines,
    shard_digest,
    shard_name,
)
from .errors import WebsiftError
from .ioutil import atomic_write_text, canonical_json
from .tokenizers import Tokenizer

log = logging.getLogger(__name__)

SCORE_BINS = 100
DEFAULT_TOKEN_BIN_EDGES = (0, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192)
MANIFEST_HEADER_PREFIX = "# corpus_fingerprint: "


class ShardUnreadable(WebsiftError):
    def __init__(self, shard: str, reason: str):
        super().__init__(f"shard {shard} unreadable: {reason}")
        self.shard = shard
        self.reason = reason


class CorpusMismatch(WebsiftError):
    def __init__(self, fingerprints: Sequence[str]):
        super().__init__(
            "keep manifests come from different corpora: "
            + ", ".join(sorted(set(fingerprints)))
        )
        self.fingerprints = list(fingerprints)


@dataclass(frozen=True)
class ScoredDocument:
    id: str
    score: float
    kept: bool


@dataclass
class BinCounts:
    """Histogram over integer values with explicit out-of-range buckets."""

    edges: tuple[int, ...]
    counts: list[int]
    underflow: int = 0
    overflow: int = 0

    @staticmethod
    def empty(edges: Sequence[int]) -> "BinCounts":
        edges = tuple(edges)
        if len(edges) < 2 or any(a >= b for a, b in zip(edges, edges[1:])):
            raise ValueError("bin edges must be strictly increasing, length >= 2")
        return BinCounts(edges=edges, counts=[0] * (len(edges) - 1))

    def add(self, value: int) -> None:
        if value < self.edges[0]:
            self.underflow += 1
        elif value >= self.edges[-1]:
            self.overflow += 1
        else:
            self.counts[bisect.bisect_right(self.edges, value) - 1] += 1

    def total(self) -> int:
        return sum(self.counts) + self.underflow + self.overflow

    def merge(self, other: "BinCounts") -> None:
        if self.edges != other.edges:
            raise ValueError("cannot merge histograms with different edges")
        self.counts = [a + b for a, b in zip(self.counts, other.counts)]
        self.underflow += other.underflow
        self.overflow += other.overflow

    def to_json_obj(self) -> dict:
        return {
            "edges": list(self.edges),
            "counts": list(self.counts),
            "underflow": self.underflow,
            "overflow": self.overflow,
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "BinCounts":
        return BinCounts(
            edges=tuple(obj["edges"]),
            counts=list(obj["counts"]),
            underflow=obj["underflow"],
            overflow=obj["overflow"],
        )


@dataclass
class FilterStats:
    """Aggregate counters for one scoring run.

    documents_total counts every input record, malformed ones included, so
    totals reconcile against raw line counts. Histogram mass covers exactly
    the scored documents (total minus malformed).
    """

    documents_total: int = 0
    documents_kept: int = 0
    records_malformed: int = 0
    tokens_total: int = 0
    tokens_kept: int = 0
    score_histogram: list[int] = field(default_factory=lambda: [0] * SCORE_BINS)
    token_length_histogram: BinCounts = field(
        default_factory=lambda: BinCounts.empty(DEFAULT_TOKEN_BIN_EDGES)
    )

    @property
    def documents_rejected(self) -> int:
        return self.documents_total - self.records_malformed - self.documents_kept

    def observe(self, score: float, n_tokens: int, kept: bool) -> None:
        self.documents_total += 1
        self.tokens_total += n_tokens
        self.score_histogram[min(int(score * SCORE_BINS), SCORE_BINS - 1)] += 1
        self.token_length_histogram.add(n_tokens)
        if kept:
            self.documents_kept += 1
            self.tokens_kept += n_tokens

    def observe_malformed(self) -> None:
        self.documents_total += 1
        self.records_malformed += 1

    def merge(self, other: "FilterStats") -> None:
        self.documents_total += other.documents_total
        self.documents_kept += other.documents_kept
        self.records_malformed += other.records_malformed
        self.tokens_total += other.tokens_total
        self.tokens_kept += other.tokens_kept
        self.score_histogram = [
            a + b for a, b in zip(self.score_histogram, other.score_histogram)
        ]
        self.token_length_histogram.merge(other.token_length_histogram)

    def to_json_obj(self) -> dict:
        return {
            "documents_total": self.documents_total,
            "documents_kept": self.documents_kept,
            "documents_rejected": self.documents_rejected,
            "records_malformed": self.records_malformed,
            "tokens_total": self.tokens_total,
            "tokens_kept": self.tokens_kept,
            "score_histogram": list(self.score_histogram),
            "token_length_histogram": self.token_length_histogram.to_json_obj(),
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "FilterStats":
        return FilterStats(
            documents_total=obj["documents_total"],
            documents_kept=obj["documents_kept"],
            records_malformed=obj["records_malformed"],
            tokens_total=obj["tokens_total"],
            tokens_kept=obj["tokens_kept"],
            score_histogram=list(obj["score_histogram"]),
            token_length_histogram=BinCounts.from_json_obj(obj["token_length_histogram"]),
        )


# ---------------------------------------------------------------------------
# scoring

def score_tokens(model: ClassifierModel, tokens: Sequence[str]) -> float:
    """Positive class probability for pre-tokenized text."""
    return float(predict_tokens(model, tokens)[1])


def score_documents(
    model: ClassifierModel,
    tokenizer: Tokenizer,
    docs: Iterable,
    threshold: float,
) -> list[ScoredDocument]:
    """Score an in-memory document sequence. kept means score >= threshold."""
    out = []
    for doc in docs:
        score = score_tokens(model, tokenizer.tokenize(doc.text))
        out.append(ScoredDocument(id=doc.id, score=score, kept=score >= threshold))
    return out


@dataclass
class _ShardResult:
    name: str
    digest: str
    stats: FilterStats
    zero_feature: int


@dataclass
class ScoreRun:
    stats: FilterStats
    corpus_fingerprint: str
    keep_manifest_path: str
    out_dir: str
    completed_shards: list[str]
    skipped_shards: list[str]            # completed in an earlier run, reused
    failed_shards: list[tuple[str, str]]

    @property
    def partial(self) -> bool:
        return bool(self.failed_shards)


def _output_paths(out_dir: str, name: str) -> tuple[str, str]:
    return (
        os.path.join(out_dir, "kept", name + ".scored.jsonl"),
        os.path.join(out_dir, "rejected", name + ".scored.jsonl"),
    )


def _score_shard(
    model: ClassifierModel,
    tokenizer: Tokenizer,
    threshold: float,
    path: str,
    out_dir: str,
    token_bin_edges: Sequence[int],
) -> _ShardResult:
    name = shard_name(path)
    digest = shard_digest(path)
    stats = FilterStats(
        score_histogram=[0] * SCORE_BINS,
        token_length_histogram=BinCounts.empty(token_bin_edges),
    )
    zero_feature = 0
    kept_path, rejected_path = _output_paths(out_dir, name)
    kept_tmp, rejected_tmp = kept_path + ".tmp", rejected_path + ".tmp"
    with open(kept_tmp, "w", encoding="utf-8") as kf, \
            open(rejected_tmp, "w", encoding="utf-8") as rf:
        for line_no, raw in iter_shard_lines(path):
            if not raw.strip():
                continue
            try:
                doc = decode_record(raw, name, line_no)
            except MalformedRecord as e:
                stats.observe_malformed()
                log.warning("skipping malformed record %s", e)
                continue
            tokens = tokenizer.tokenize(doc.text)
            if not tokens:
                zero_feature += 1
            score = score_tokens(model, tokens)
            kept = score >= threshold
            stats.observe(score, len(tokens), kept)
            obj = doc.to_json_obj()
            obj["score"] = score
            obj["kept"] = kept
            line = json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n"
            (kf if kept else rf).write(line)
    os.replace(kept_tmp, kept_path)
    os.replace(rejected_tmp, rejected_path)
    if zero_feature:
        log.info("shard %s: %d documents had no tokens, scored 0.5", name, zero_feature)
    return _ShardResult(name=name, digest=digest, stats=stats, zero_feature=zero_feature)


def _heal_ledger_tail(path: str) -> None:
    """Terminate a torn final line so later appends stay parseable."""
    try:
        with open(path, "rb+") as f:
            f.seek(0, os.SEEK_END)
            size = f.tell()
            if size:
                f.seek(size - 1)
                if f.read(1) != b"\n":
                    f.write(b"\n")
    except FileNotFoundError:
        pass


def _load_ledger(out_dir: str) -> dict[str, dict]:
    """Completed-shard records keyed by shard name; last entry wins."""
    path = os.path.join(out_dir, "ledger.jsonl")
    entries: dict[str, dict] = {}
    if not os.path.exists(path):
        return entries
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue  # torn tail from an interrupted run
            entries[obj["shard"]] = obj
    return entries


def score_corpus(
    model: ClassifierModel,
    shards: Sequence[str],
    threshold: float,
    tokenizer: Tokenizer,
    out_dir: str,
    workers: int = 1,
    resume: bool = False,
    token_bin_edges: Sequence[int] = DEFAULT_TOKEN_BIN_EDGES,
) -> ScoreRun:
    """Score a sharded corpus into kept/ and rejected/ under out_dir.

    With resume=True, shards recorded in the ledger with an unchanged content
    digest are reused instead of rescored. Every input document lands in
    exactly one output stream, in its shard's input order.
    """
    if not shards:
        raise ValueError("no shards to score")
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must be in [0, 1]")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    names = [shard_name(p) for p in shards]
    if len(set(names)) != len(names):
        raise ValueError("shard basenames must be unique within a corpus")

    os.makedirs(os.path.join(out_dir, "kept"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "rejected"), exist_ok=True)
    ledger_path = os.path.join(out_dir, "ledger.jsonl")
    if resume:
        _heal_ledger_tail(ledger_path)
    previous = _load_ledger(out_dir) if resume else {}
    if not resume and os.path.exists(ledger_path):
        os.remove(ledger_path)

    digests: dict[str, str] = {}
    failed: list[tuple[str, str]] = []
    pending: list[str] = []
    skipped: list[str] = []
    per_shard: dict[str, FilterStats] = {}

    for path in shards:
        name = shard_name(path)
        try:
            digests[name] = shard_digest(path)
        except OSError as e:
            failed.append((name, str(e)))
            log.error("%s", ShardUnreadable(name, str(e)))
            continue
        prior = previous.get(name)
        if prior is not None and prior.get("digest") == digests[name]:
            per_shard[name] = FilterStats.from_json_obj(prior["stats"])
            skipped.append(name)
        else:
            pending.append(path)

    ledger_lock = threading.Lock()

    def record(result: _ShardResult) -> None:
        entry = {
            "shard": result.name,
            "digest": result.digest,
            "stats": result.stats.to_json_obj(),
        }
        with ledger_lock, open(ledger_path, "a", encoding="utf-8") as f:
            f.write(canonical_json(entry) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def run_one(path: str) -> _ShardResult:
        return _score_shard(model, tokenizer, threshold, path, out_dir, token_bin_edges)

    if pending:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [(shard_name(p), pool.submit(run_one, p)) for p in pending]
            # Collect in submission order so the ledger is deterministic.
            for name, future in futures:
                try:
                    result = future.result()
                except (OSError, EOFError) as e:
                    failed.append((name, str(e)))
                    log.error("%s", ShardUnreadable(name, str(e)))
                    continue
                record(result)
                per_shard[name] = result.stats

    stats = FilterStats(
        score_histogram=[0] * SCORE_BINS,
        token_length_histogram=BinCounts.empty(token_bin_edges),
    )
    completed = [n for n in names if n in per_shard]
    for name in completed:
        stats.merge(per_shard[name])

    fingerprint = corpus_fingerprint(digests[n] for n in completed)
    manifest_path = os.path.join(out_dir, "keep_manifest.txt")
    kept_ids: list[str] = []
    for name in completed:
        kept_path, _ = _output_paths(out_dir, name)
        with open(kept_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    kept_ids.append(json.loads(line)["id"])
    kept_ids.sort()
    if len(set(kept_ids)) != len(kept_ids):
        log.warning("duplicate document ids in kept stream; manifest keeps duplicates")
    write_keep_manifest(manifest_path, fingerprint, kept_ids)

    return ScoreRun(
        stats=stats,
        corpus_fingerprint=fingerprint,
        keep_manifest_path=manifest_path,
        out_dir=out_dir,
        completed_shards=completed,
        skipped_shards=skipped,
        failed_shards=failed,
    )


# ---------------------------------------------------------------------------
# keep manifests

def write_keep_manifest(path: str, fingerprint: str, sorted_ids: Sequence[str]) -> None:
    lines = [MANIFEST_HEADER_PREFIX + fingerprint]
    lines.extend(sorted_ids)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_keep_manifest(path: str) -> tuple[str, list[str]]:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if not header.startswith(MANIFEST_HEADER_PREFIX):
            raise ValueError(f"{path}: missing corpus fingerprint header")
        fingerprint = header[len(MANIFEST_HEADER_PREFIX):]
        ids = [line.rstrip("\n") for line in f if line.strip()]
    return fingerprint, ids


def intersect_ids(id_sets: Sequence[set[str]]) -> list[str]:
    if len(id_sets) < 2:
        raise ValueError("intersect needs at least two keep manifests")
    common = set(id_sets[0])
    for s in id_sets[1:]:
        common &= s
    return sorted(common)


def intersect(manifest_paths: Sequence[str]) -> tuple[str, list[str]]:
    """Intersect keep manifests of the same corpus; sorted ids out."""
    if len(manifest_paths) < 2:
        raise ValueError("intersect needs at least two keep manifests")
    loaded = [read_keep_manifest(p) for p in manifest_paths]
    fingerprints = [fp for fp, _ in loaded]
    if len(set(fingerprints)) != 1:
        raise CorpusMismatch(fingerprints)
    ids = intersect_ids([set(ids) for _, ids in loaded])
    return fingerprints[0], ids


# ---------------------------------------------------------------------------
# token length statistics

@dataclass
class TokenLengthStats:
    histogram: BinCounts
    documents: int
    tokens_total: int
    mean: float
    p50: int
    p90: int
    p99: int
    records_malformed: int
    failed_shards: list[tuple[str, str]]

    @property
    def partial(self) -> bool:
        return bool(self.failed_shards)

    def to_json_obj(self) -> dict:
        return {
            "histogram": self.histogram.to_json_obj(),
            "documents": self.documents,
            "tokens_total": self.tokens_total,
            "mean": self.mean,
            "p50": self.p50,
            "p90": self.p90,
            "p99": self.p99,
            "records_malformed": self.records_malformed,
            "failed_shards": [list(t) for t in self.failed_shards],
        }


def _nearest_rank(sorted_values: list[int], q: float) -> int:
    """Classic nearest-rank quantile: smallest value covering fraction q."""
    if not sorted_values:
        return 0
    rank = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[rank - 1]


def token_length_histogram(
    shards: Sequence[str],
    tokenizer: Tokenizer,
    bin_edges: Sequence[int] = DEFAULT_TOKEN_BIN_EDGES,
) -> TokenLengthStats:
    """Token count distribution across a corpus.

    The mean is exact (integer accumulation); quantiles are nearest-rank over
    the exact per-document counts. Every readable document is counted in
    exactly one bucket, out-of-range lengths in underflow/overflow.
    """
    hist = BinCounts.empty(bin_edges)
    counts: list[int] = []
    tokens_total = 0
    malformed = 0
    failed: list[tuple[str, str]] = []
    for path in shards:
        name = shard_name(path)
        try:
            for line_no, raw in iter_shard_lines(path):
                if not raw.strip():
                    continue
                try:
                    doc = decode_record(raw, name, line_no)
                except MalformedRecord as e:
                    malformed += 1
                    log.warning("skipping malformed record %s", e)
                    continue
                n = tokenizer.token_count(doc.text)
                counts.append(n)
                tokens_total += n
                hist.add(n)
        except (OSError, EOFError) as e:
            failed.append((name, str(e)))
            log.error("%s", ShardUnreadable(name, str(e)))
    counts.sort()
    n_docs = len(counts)
    mean = tokens_total / n_docs if n_docs else 0.0
    return TokenLengthStats(
        histogram=hist,
        documents=n_docs,
        tokens_total=tokens_total,
        mean=mean,
        p50=_nearest_rank(counts, 0.50),
        p90=_nearest_rank(counts, 0.90),
        p99=_nearest_rank(counts, 0.99),
        records_malformed=malformed,
        failed_shards=failed,
    )
