"""Multi-round selection pipeline with a crash-safe journal.

A run lives in its own directory. Every state transition appends one
checksummed JSON line to journal.jsonl, and artifacts are written (and
fsynced) before the entry that references them, so the journal never points
at bytes that are not on disk. Re-running a step after a crash regenerates
identical artifacts because every stage is seeded and deterministic; resume
therefore converges to the same run regardless of where execution stopped.

Round flow: assemble a balanced training set from the seed pool, train a
classifier, score a fixed-size sample of the raw pool, emit an annealing
verification plan for the kept subset, then wait for benchmark results. An
improved verdict before the round limit folds the kept and rejected sample
documents back into the pool as fresh categories for the next round; an
improved verdict at the limit promotes the classifier; anything else rejects
the run.

Paths inside the config (pool, raw shards, default manifest) may be
relative; they resolve against the working directory, which keeps a run
directory plus its pool relocatable as a unit.
"""

from __future__ import annotations

import glob
import json
import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import seedpool
from .classifier import (
    ClassifierConfig,
    load_labeled_examples,
    model_fingerprint,
    save_model,
    train,
)
from .documents import Document, iter_documents
from .errors import WebsiftError
from .filtering import score_tokens
from .ioutil import atomic_write_text, canonical_json, sha256_file, sha256_text
from .seedpool import SeedPoolStore, assemble_training_set, write_training_set
from .tokenizers import TokenizerSpec, load_tokenizer
from .verify import (
    EvalScores,
    ManifestShard,
    MetricGrouping,
    TokenManifest,
    build_anneal_plan,
    eval_report,
    report_to_json_obj,
)

log = logging.getLogger(__name__)

AWAITING_TRAINING_SET = "awaiting_training_set"
AWAITING_CLASSIFIER = "awaiting_classifier"
AWAITING_VERIFICATION = "awaiting_verification"
VERDICT_READY = "verdict_ready"
PROMOTED = "promoted"
REJECTED = "rejected"

TERMINAL = (PROMOTED, REJECTED)

JOURNAL_NAME = "journal.jsonl"
LOCK_NAME = "lock"


class JournalUnreadable(WebsiftError):
    pass


class StateCorrupt(WebsiftError):
    pass


class RunLocked(WebsiftError):
    pass


class NotReady(WebsiftError):
    pass


class RoundFailed(WebsiftError):
    """A round step failed; the original error is chained as __cause__."""

    def __init__(self, round_no: int, cause: Exception):
        super().__init__(f"round {round_no}: {cause}")
        self.round = round_no


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class VerifySettings:
    default_manifest: str
    n_epoch: int = 3
    global_batch_size: int = 512
    sequence_length: int = 4096
    rounding_mode: str = "as_written_max"
    candidate_weight: float = 0.3
    strata: int = 100


@dataclass(frozen=True)
class PipelineConfig:
    pool_dir: str
    raw_shards: tuple[str, ...]      # paths or globs
    sample_size: int
    verify: VerifySettings
    max_rounds: int = 2
    target_training_set: int = 600_000
    balance: float = 0.5
    threshold: float = 0.5
    seed: int = 17
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must be in [0, 1]")

    def to_json_obj(self) -> dict:
        obj = asdict(self)
        obj["raw_shards"] = list(self.raw_shards)
        obj["classifier"]["labels"] = list(self.classifier.labels)
        return obj

    @staticmethod
    def from_json_obj(obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        obj["raw_shards"] = tuple(obj["raw_shards"])
        obj["classifier"] = ClassifierConfig.from_json_obj(obj["classifier"])
        obj["tokenizer"] = TokenizerSpec.from_json_obj(obj["tokenizer"])
        obj["verify"] = VerifySettings(**obj["verify"])
        return PipelineConfig(**obj)

    @staticmethod
    def from_file(path: str) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as f:
            return PipelineConfig.from_json_obj(json.load(f))


# ---------------------------------------------------------------------------
# run state

@dataclass
class RoundState:
    round: int
    pool_version: int
    training_set: Optional[dict] = None
    classifier: Optional[dict] = None
    report: Optional[dict] = None
    verdict: Optional[str] = None


@dataclass
class RunState:
    run_id: str
    config: PipelineConfig
    status: str
    round: int
    pool_version: int
    rounds: dict[int, RoundState]

    def current_round(self) -> RoundState:
        return self.rounds[self.round]


# ---------------------------------------------------------------------------
# journal

def _journal_path(run_dir: str) -> str:
    return os.path.join(run_dir, JOURNAL_NAME)


def _entry_line(seq: int, kind: str, round_no: int, data: dict) -> str:
    entry = {"seq": seq, "type": kind, "round": round_no, "data": data}
    return canonical_json({"entry": entry, "check": sha256_text(canonical_json(entry))})


def read_journal(run_dir: str) -> list[dict]:
    """Validated journal entries. A torn final line is dropped, anything
    else malformed is StateCorrupt."""
    path = _journal_path(run_dir)
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise JournalUnreadable(f"cannot read journal: {e}") from e
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    entries: list[dict] = []
    for i, raw in enumerate(lines):
        try:
            obj = json.loads(raw.decode("utf-8"))
            entry = obj["entry"]
            if sha256_text(canonical_json(entry)) != obj["check"]:
                raise ValueError("checksum mismatch")
            if entry["seq"] != i:
                raise ValueError(f"expected seq {i}, found {entry['seq']}")
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
            if i == len(lines) - 1:
                log.warning("dropping torn journal tail at line %d", i + 1)
                break
            raise StateCorrupt(f"journal entry {i} invalid: {e}") from e
        entries.append(entry)
    if not entries:
        raise JournalUnreadable("journal holds no valid entries")
    return entries


def _append_entry(run_dir: str, seq: int, kind: str, round_no: int, data: dict) -> None:
    with open(_journal_path(run_dir), "a", encoding="utf-8") as f:
        f.write(_entry_line(seq, kind, round_no, data) + "\n")
        f.flush()
        os.fsync(f.fileno())


def _heal_journal_tail(run_dir: str) -> None:
    """Rewrite the journal to its valid prefix, truncating a torn tail.

    Must run before any append: writing after an unterminated fragment would
    merge the fragment with the new entry into one unreadable line that is no
    longer the tail, turning a recoverable crash into permanent corruption.
    Only write paths heal; reads stay side-effect free.
    """
    try:
        entries = read_journal(run_dir)
    except (JournalUnreadable, StateCorrupt):
        return  # nothing salvageable, or real damage the read paths report
    text = "".join(
        _entry_line(e["seq"], e["type"], e["round"], e["data"]) + "\n" for e in entries
    )
    with open(_journal_path(run_dir), "rb") as f:
        if f.read() == text.encode("utf-8"):
            return
    log.warning("truncating torn journal tail in %s", run_dir)
    atomic_write_text(_journal_path(run_dir), text)


def _fold(entries: list[dict]) -> RunState:
    first = entries[0]
    if first["type"] != "init":
        raise StateCorrupt("journal does not start with an init entry")
    config = PipelineConfig.from_json_obj(first["data"]["config"])
    state = RunState(
        run_id=first["data"]["run_id"],
        config=config,
        status=AWAITING_TRAINING_SET,
        round=1,
        pool_version=first["data"]["pool_version"],
        rounds={1: RoundState(round=1, pool_version=first["data"]["pool_version"])},
    )
    for entry in entries[1:]:
        kind, round_no, data = entry["type"], entry["round"], entry["data"]
        rs = state.rounds.get(round_no)
        if rs is None or round_no != state.round:
            raise StateCorrupt(f"entry for round {round_no} while in round {state.round}")
        if kind == "training_set":
            _expect(state, AWAITING_TRAINING_SET, kind)
            rs.training_set = data
            state.status = AWAITING_CLASSIFIER
        elif kind == "classifier":
            _expect(state, AWAITING_CLASSIFIER, kind)
            rs.classifier = data
            state.status = AWAITING_VERIFICATION
        elif kind == "report":
            _expect(state, AWAITING_VERIFICATION, kind)
            rs.report = data
            state.status = VERDICT_READY
        elif kind == "advance":
            _expect(state, VERDICT_READY, kind)
            rs.verdict = "improved"
            state.pool_version = data["next_pool_version"]
            state.round += 1
            state.rounds[state.round] = RoundState(
                round=state.round, pool_version=state.pool_version
            )
            state.status = AWAITING_TRAINING_SET
        elif kind == "promoted":
            _expect(state, VERDICT_READY, kind)
            rs.verdict = "improved"
            state.status = PROMOTED
        elif kind == "rejected":
            _expect(state, VERDICT_READY, kind)
            rs.verdict = "not_improved"
            state.status = REJECTED
        else:
            raise StateCorrupt(f"unknown journal entry type {kind!r}")
    return state


def _expect(state: RunState, status: str, kind: str) -> None:
    if state.status != status:
        raise StateCorrupt(
            f"entry {kind!r} arrived in status {state.status!r}, expected {status!r}"
        )


# ---------------------------------------------------------------------------
# locking

class _RunLock:
    def __init__(self, run_dir: str):
        self.path = os.path.join(run_dir, LOCK_NAME)
        self.fd: Optional[int] = None

    def __enter__(self) -> "_RunLock":
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(
                f"run is locked by another writer (remove {self.path} if stale)"
            ) from None
        os.write(self.fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc) -> None:
        if self.fd is not None:
            os.close(self.fd)
            os.remove(self.path)


# ---------------------------------------------------------------------------
# artifact helpers

def _round_dir(run_dir: str, round_no: int) -> str:
    return os.path.join(run_dir, "rounds", str(round_no))


def _artifact(run_dir: str, round_no: int, name: str) -> tuple[str, str]:
    """(absolute path, journal-relative path)."""
    rel = os.path.join("rounds", str(round_no), name)
    return os.path.join(run_dir, rel), rel


def _verify_artifact(run_dir: str, rel_path: str, expected: str) -> None:
    path = os.path.join(run_dir, rel_path)
    if not os.path.exists(path):
        raise StateCorrupt(f"journaled artifact missing: {rel_path}")
    actual = sha256_file(path)
    if actual != expected:
        raise StateCorrupt(
            f"artifact fingerprint mismatch for {rel_path}: "
            f"journal says {expected[:12]}, file is {actual[:12]}"
        )


def _derived_seed(seed: int, round_no: int, purpose: str) -> int:
    digest = sha256_text(f"{seed}/{round_no}/{purpose}")
    return int(digest[:16], 16)


# ---------------------------------------------------------------------------
# public operations

def init_run(run_dir: str, config: PipelineConfig) -> RunState:
    os.makedirs(run_dir, exist_ok=True)
    if os.path.exists(_journal_path(run_dir)):
        try:
            read_journal(run_dir)
        except JournalUnreadable:
            # A crash while writing the very first entry leaves a journal
            # holding no state; discard it so the run can start over.
            log.warning("discarding journal with no valid entries in %s", run_dir)
            os.remove(_journal_path(run_dir))
        else:
            raise WebsiftError(f"run directory {run_dir} is already initialized")
    store = SeedPoolStore(config.pool_dir)
    pool_version = store.latest_version()
    if pool_version is None:
        raise WebsiftError(f"seed pool {config.pool_dir} has no manifests")
    run_id = sha256_text(canonical_json(config.to_json_obj()) + f"@{pool_version}")[:12]
    with _RunLock(run_dir):
        _append_entry(
            run_dir,
            0,
            "init",
            0,
            {
                "run_id": run_id,
                "config": config.to_json_obj(),
                "pool_version": pool_version,
            },
        )
    return resume(run_dir)


def resume(run_dir: str) -> RunState:
    """Rebuild state from the journal and verify every referenced artifact."""
    entries = read_journal(run_dir)
    state = _fold(entries)
    for rs in state.rounds.values():
        for block in (rs.training_set, rs.classifier, rs.report):
            if not block:
                continue
            for key, value in block.items():
                if key.endswith("_path"):
                    _verify_artifact(run_dir, value, block[key[:-5] + "_sha256"])
    return state


def run_status(run_dir: str) -> dict:
    """Lightweight view for the status subcommand; no artifact checks."""
    state = _fold(read_journal(run_dir))
    rs = state.current_round()
    return {
        "run_id": state.run_id,
        "status": state.status,
        "round": state.round,
        "max_rounds": state.config.max_rounds,
        "pool_version": state.pool_version,
        "artifacts": {
            "training_set": bool(rs.training_set),
            "classifier": bool(rs.classifier),
            "report": bool(rs.report),
        },
    }


def run_round(run_dir: str) -> RunState:
    """Advance until the run waits on verification or reaches a terminal state."""
    with _RunLock(run_dir):
        _heal_journal_tail(run_dir)
        state = resume(run_dir)
        if state.status == AWAITING_VERIFICATION:
            raise NotReady("awaiting verification results; ingest an eval report")
        if state.status in TERMINAL:
            raise NotReady(f"run is terminal ({state.status})")
        while True:
            try:
                if state.status == AWAITING_TRAINING_SET:
                    _do_training_set(run_dir, state)
                elif state.status == AWAITING_CLASSIFIER:
                    _do_classifier(run_dir, state)
                elif state.status == VERDICT_READY:
                    _do_verdict(run_dir, state)
            except (RoundFailed, StateCorrupt):
                raise
            except WebsiftError as e:
                raise RoundFailed(state.round, e) from e
            if state.status in TERMINAL or state.status == AWAITING_VERIFICATION:
                return state
            state = _fold(read_journal(run_dir))


def ingest_report(
    run_dir: str,
    baseline: EvalScores,
    candidate: EvalScores,
    grouping: Optional[MetricGrouping] = None,
    margin: float = 0.1,
) -> RunState:
    with _RunLock(run_dir):
        _heal_journal_tail(run_dir)
        state = resume(run_dir)
        if state.status != AWAITING_VERIFICATION:
            raise NotReady(f"cannot ingest a report in status {state.status!r}")
        report = eval_report(baseline, candidate, grouping=grouping, margin=margin)
        obj = report_to_json_obj(report)
        path, rel = _artifact(run_dir, state.round, "eval_report.json")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        atomic_write_text(path, canonical_json(obj) + "\n")
        entries = read_journal(run_dir)
        _append_entry(
            run_dir,
            len(entries),
            "report",
            state.round,
            {
                "report_path": rel,
                "report_sha256": sha256_file(path),
                "verdicts": report.verdicts,
                "improved": report.improved_everywhere,
            },
        )
    return resume(run_dir)


# ---------------------------------------------------------------------------
# round steps (called with the lock held)

def _do_training_set(run_dir: str, state: RunState) -> None:
    config = state.config
    store = SeedPoolStore(config.pool_dir)
    examples = assemble_training_set(
        store,
        target_size=config.target_training_set,
        balance=config.balance,
        seed=_derived_seed(config.seed, state.round, "assemble"),
        version=state.pool_version,
    )
    path, rel = _artifact(run_dir, state.round, "training_set")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    write_training_set(path, examples, fmt="jsonl")
    positives = sum(1 for ex in examples if ex.label == seedpool.POSITIVE)
    entries = read_journal(run_dir)
    _append_entry(
        run_dir,
        len(entries),
        "training_set",
        state.round,
        {
            "training_set_path": rel,
            "training_set_sha256": sha256_file(path),
            "examples": len(examples),
            "positives": positives,
            "negatives": len(examples) - positives,
            "pool_version": state.pool_version,
        },
    )
    state.status = AWAITING_CLASSIFIER


def _iter_raw_documents(config: PipelineConfig):
    paths: list[str] = []
    for pattern in config.raw_shards:
        expanded = sorted(glob.glob(pattern))
        paths.extend(expanded if expanded else [pattern])
    for path in paths:
        yield from iter_documents(path, strict=False)


def _reservoir_sample(config: PipelineConfig, round_no: int) -> list[Document]:
    rng = np.random.default_rng(_derived_seed(config.seed, round_no, "sample"))
    k = config.sample_size
    reservoir: list[tuple[int, Document]] = []
    for i, doc in enumerate(_iter_raw_documents(config)):
        if i < k:
            reservoir.append((i, doc))
        else:
            j = int(rng.integers(0, i + 1))
            if j < k:
                reservoir[j] = (i, doc)
    reservoir.sort(key=lambda pair: pair[0])
    return [doc for _, doc in reservoir]


def _do_classifier(run_dir: str, state: RunState) -> None:
    config = state.config
    tokenizer = load_tokenizer(config.tokenizer)
    examples = load_labeled_examples(
        os.path.join(run_dir, state.current_round().training_set["training_set_path"])
    )
    model = train(examples, config.classifier, tokenizer)
    model_path, model_rel = _artifact(run_dir, state.round, "model.ufwc")
    save_model(model, model_path)

    sample = _reservoir_sample(config, state.round)
    if not sample:
        raise WebsiftError("raw pool produced no sample documents")
    kept_tokens = 0
    kept = rejected = 0
    lines = []
    for doc in sample:
        tokens = tokenizer.tokenize(doc.text)
        score = score_tokens(model, tokens)
        is_kept = score >= config.threshold
        if is_kept:
            kept += 1
            kept_tokens += len(tokens)
        else:
            rejected += 1
        lines.append(
            canonical_json(
                {"id": doc.id, "text": doc.text, "score": score, "kept": is_kept}
            )
        )
    scores_path, scores_rel = _artifact(run_dir, state.round, "sample_scores")
    atomic_write_text(scores_path, "\n".join(lines) + "\n")
    if kept_tokens == 0:
        raise WebsiftError(
            "no sample document cleared the threshold; nothing to verify"
        )

    candidate = TokenManifest(
        name=f"{state.run_id}/round{state.round}/kept_sample",
        shards=(ManifestShard(id="kept_sample", tokens=kept_tokens),),
    )
    default = TokenManifest.from_file(config.verify.default_manifest)
    plan = build_anneal_plan(
        candidate,
        default,
        n_epoch=config.verify.n_epoch,
        global_batch_size=config.verify.global_batch_size,
        sequence_length=config.verify.sequence_length,
        rounding_mode=config.verify.rounding_mode,
        candidate_weight=config.verify.candidate_weight,
        seed=_derived_seed(config.seed, state.round, "mixture"),
        strata=config.verify.strata,
    )
    plan_path, plan_rel = _artifact(run_dir, state.round, "anneal_plan.json")
    atomic_write_text(plan_path, canonical_json(plan.to_json_obj()) + "\n")

    entries = read_journal(run_dir)
    _append_entry(
        run_dir,
        len(entries),
        "classifier",
        state.round,
        {
            "model_path": model_rel,
            "model_sha256": model_fingerprint(model_path),
            "sample_scores_path": scores_rel,
            "sample_scores_sha256": sha256_file(scores_path),
            "anneal_plan_path": plan_rel,
            "anneal_plan_sha256": sha256_file(plan_path),
            "sample_total": len(sample),
            "sample_kept": kept,
            "sample_rejected": rejected,
        },
    )
    state.status = AWAITING_VERIFICATION


def _do_verdict(run_dir: str, state: RunState) -> None:
    config = state.config
    rs = state.current_round()
    improved = rs.report["improved"]
    entries = read_journal(run_dir)
    if not improved:
        _append_entry(run_dir, len(entries), "rejected", state.round, {
            "verdicts": rs.report["verdicts"],
        })
        state.status = REJECTED
        return
    if state.round >= config.max_rounds:
        _append_entry(run_dir, len(entries), "promoted", state.round, {
            "classifier_round": state.round,
        })
        state.status = PROMOTED
        return

    # Improved with rounds to spare: fold the scored sample back into the
    # pool as inferred categories and start the next round from them.
    scores_path = os.path.join(run_dir, rs.classifier["sample_scores_path"])
    kept_docs: list[Document] = []
    rejected_docs: list[Document] = []
    with open(scores_path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            doc = Document(id=obj["id"], text=obj["text"])
            (kept_docs if obj["kept"] else rejected_docs).append(doc)

    store = SeedPoolStore(config.pool_dir)
    manifest = store.load_manifest(state.pool_version)
    new_categories = []
    for polarity, docs in ((seedpool.POSITIVE, kept_docs), (seedpool.NEGATIVE, rejected_docs)):
        if not docs:
            log.info("round %d produced no %s sample documents to fold", state.round, polarity)
            continue
        name = f"round{state.round}_{'kept' if polarity == seedpool.POSITIVE else 'rejected'}"
        digest = store.put_object(docs)
        new_categories.append(
            seedpool.SeedCategory(
                name=name,
                polarity=polarity,
                source=f"pipeline:{state.run_id}:round{state.round}",
                objects=(digest,),
                doc_count=len(docs),
            )
        )
    next_manifest = seedpool.SeedPoolManifest(
        version=manifest.version + 1,
        parent_version=manifest.version,
        categories=manifest.categories + tuple(new_categories),
    )
    store.commit(next_manifest)
    _append_entry(run_dir, len(entries), "advance", state.round, {
        "next_pool_version": next_manifest.version,
        "added_categories": [c.name for c in new_categories],
    })
    state.round += 1
    state.rounds[state.round] = RoundState(round=state.round, pool_version=next_manifest.version)
    state.pool_version = next_manifest.version
    state.status = AWAITING_TRAINING_SET
