"""Journaled multi-round runner: happy paths, crash recovery, corruption.

The recovery oracle is byte equality. A run that crashes at any journal
append and then resumes must finish with exactly the journal bytes of a
run that never crashed. Worlds are built with relative paths so two
directory trees with identical content produce identical run ids, journal
lines, and pool manifests, making that comparison meaningful.
"""

import dataclasses
import json
import logging
import os
import shutil

import numpy as np
import pytest

from websift import pipeline
from websift.classifier import ClassifierConfig
from websift.documents import Document, write_documents
from websift.errors import WebsiftError
from websift.ioutil import canonical_json, sha256_file, sha256_text
from websift.pipeline import (
    AWAITING_CLASSIFIER,
    AWAITING_TRAINING_SET,
    AWAITING_VERIFICATION,
    PROMOTED,
    REJECTED,
    TERMINAL,
    VERDICT_READY,
    JournalUnreadable,
    NotReady,
    PipelineConfig,
    RoundFailed,
    RunLocked,
    StateCorrupt,
    VerifySettings,
    ingest_report,
    init_run,
    read_journal,
    resume,
    run_round,
    run_status,
)
from websift.seedpool import InsufficientSeedData, SeedPoolStore
from websift.verify import (
    CHINESE_METRICS,
    ENGLISH_METRICS,
    EvalScores,
    ManifestShard,
    TokenManifest,
)

ALL_METRICS = ENGLISH_METRICS + CHINESE_METRICS

GOOD_WORDS = tuple(f"signal{i}" for i in range(24))
BAD_WORDS = tuple(f"static{i}" for i in range(24))

NOMINAL_KINDS = [
    "init",
    "training_set",
    "classifier",
    "report",
    "advance",
    "training_set",
    "classifier",
    "report",
    "promoted",
]


def make_text(rng, words):
    n = int(rng.integers(25, 36))
    return " ".join(words[int(rng.integers(0, len(words)))] for _ in range(n))


def build_world(root, **overrides):
    """Seed pool, raw shards, and a default manifest under one root.

    The returned config references everything by relative path, so callers
    must chdir into root before driving a run.
    """
    root = str(root)
    rng = np.random.default_rng(4242)

    store = SeedPoolStore(os.path.join(root, "pool")).init()
    curated = [Document(id=f"curated:{i}", text=make_text(rng, GOOD_WORDS)) for i in range(120)]
    crawl = [Document(id=f"crawl:{i}", text=make_text(rng, BAD_WORDS)) for i in range(120)]
    store.add_category("curated", "positive", "editorial", curated)
    store.add_category("crawl", "negative", "dragnet", crawl)

    raw_dir = os.path.join(root, "raw")
    os.makedirs(raw_dir)
    doc_no = 0
    for shard in range(2):
        docs = []
        for _ in range(100):
            words = GOOD_WORDS if doc_no % 2 == 0 else BAD_WORDS
            docs.append(Document(id=f"raw:{doc_no:05d}", text=make_text(rng, words)))
            doc_no += 1
        write_documents(os.path.join(raw_dir, f"shard{shard:03d}.jsonl"), docs)

    default = TokenManifest(
        name="web-default",
        shards=tuple(ManifestShard(id=f"dflt{i:03d}", tokens=2000) for i in range(40)),
    )
    with open(os.path.join(root, "default.json"), "w", encoding="utf-8") as f:
        json.dump(default.to_json_obj(), f)

    settings = dict(
        pool_dir="pool",
        raw_shards=("raw/*.jsonl",),
        sample_size=180,
        verify=VerifySettings(
            default_manifest="default.json",
            global_batch_size=1,
            sequence_length=2,
        ),
        max_rounds=2,
        target_training_set=120,
        balance=0.5,
        seed=29,
        classifier=ClassifierConfig(dim=16, word_ngrams=2, min_count=1, bucket=4096, seed=3),
    )
    settings.update(overrides)
    return PipelineConfig(**settings)


def improved_pair():
    base = EvalScores("baseline", {m: 50.0 for m in ALL_METRICS})
    cand = EvalScores("candidate", {m: 51.0 for m in ALL_METRICS})
    return base, cand


def drive(run_dir, config):
    """Push a run to a terminal state, feeding improving eval reports."""
    base, cand = improved_pair()
    while True:
        try:
            status = run_status(run_dir)["status"]
        except JournalUnreadable:
            init_run(run_dir, config)
            continue
        if status in TERMINAL:
            return status
        if status == AWAITING_VERIFICATION:
            ingest_report(run_dir, base, cand)
        else:
            run_round(run_dir)


def journal_bytes(run_dir):
    with open(os.path.join(run_dir, pipeline.JOURNAL_NAME), "rb") as f:
        return f.read()


@pytest.fixture(scope="module")
def control(tmp_path_factory):
    """A crash-free promoted run. Tests treat the returned tree as read-only."""
    root = str(tmp_path_factory.mktemp("control"))
    config = build_world(root)
    prev = os.getcwd()
    os.chdir(root)
    try:
        status = drive("run", config)
        assert status == PROMOTED
        journal = journal_bytes("run")
        entries = read_journal("run")
        store = SeedPoolStore("pool")
        with open(store._manifest_path(3), "rb") as f:
            pool_v3 = f.read()
    finally:
        os.chdir(prev)
    return {
        "root": root,
        "run_dir": os.path.join(root, "run"),
        "config": config,
        "journal": journal,
        "entries": entries,
        "pool_v3": pool_v3,
    }


# ---------------------------------------------------------------------------
# configuration

class TestPipelineConfig:
    def test_json_round_trip(self, tmp_path):
        config = build_world(tmp_path)
        obj = config.to_json_obj()
        json.dumps(obj)  # must be plain JSON data
        assert PipelineConfig.from_json_obj(obj) == config

    def test_from_file(self, tmp_path):
        config = build_world(tmp_path)
        path = tmp_path / "pipeline.json"
        path.write_text(json.dumps(config.to_json_obj()), encoding="utf-8")
        assert PipelineConfig.from_file(str(path)) == config

    def test_rejects_bad_values(self, tmp_path):
        config = build_world(tmp_path)
        with pytest.raises(ValueError):
            dataclasses.replace(config, max_rounds=0)
        with pytest.raises(ValueError):
            dataclasses.replace(config, sample_size=0)
        with pytest.raises(ValueError):
            dataclasses.replace(config, threshold=1.5)


# ---------------------------------------------------------------------------
# init and status

class TestInit:
    def test_first_entry_and_status(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        state = init_run("run", config)
        assert state.status == AWAITING_TRAINING_SET
        assert state.round == 1
        assert state.pool_version == 2  # one commit per seeded category
        assert len(state.run_id) == 12
        int(state.run_id, 16)

        entries = read_journal("run")
        assert [e["type"] for e in entries] == ["init"]
        assert entries[0]["data"]["config"] == config.to_json_obj()

        status = run_status("run")
        assert status["status"] == AWAITING_TRAINING_SET
        assert status["round"] == 1
        assert status["artifacts"] == {
            "training_set": False,
            "classifier": False,
            "report": False,
        }

    def test_refuses_initialized_run(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        init_run("run", config)
        with pytest.raises(WebsiftError, match="already initialized"):
            init_run("run", config)

    def test_refuses_empty_pool(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        SeedPoolStore("bare_pool").init()
        bare = dataclasses.replace(config, pool_dir="bare_pool")
        with pytest.raises(WebsiftError, match="no manifests"):
            init_run("run", bare)

    def test_run_id_tracks_config_and_pool(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        a = init_run("runA", config)
        b = init_run("runB", config)
        assert a.run_id == b.run_id
        c = init_run("runC", dataclasses.replace(config, seed=30))
        assert c.run_id != a.run_id


# ---------------------------------------------------------------------------
# the nominal two-round promoted run

class TestNominalRun:
    def test_journal_shape(self, control):
        entries = control["entries"]
        assert [e["type"] for e in entries] == NOMINAL_KINDS
        assert [e["round"] for e in entries] == [0, 1, 1, 1, 1, 2, 2, 2, 2]

    def test_journal_lines_self_describe(self, control):
        # independent re-check of the line format: each line carries its own
        # checksum over the canonical entry, and seq equals the line index
        lines = control["journal"].decode("utf-8").splitlines()
        assert len(lines) == len(NOMINAL_KINDS)
        for i, line in enumerate(lines):
            obj = json.loads(line)
            assert set(obj) == {"entry", "check"}
            assert obj["check"] == sha256_text(canonical_json(obj["entry"]))
            assert obj["entry"]["seq"] == i

    def test_pool_version_chain(self, control):
        entries = control["entries"]
        advance = next(e for e in entries if e["type"] == "advance")
        assert advance["data"]["next_pool_version"] == 3
        assert advance["data"]["added_categories"] == ["round1_kept", "round1_rejected"]

        round2_ts = entries[5]
        assert round2_ts["data"]["pool_version"] == 3

        store = SeedPoolStore(os.path.join(control["root"], "pool"))
        v3 = store.load_manifest(3)
        assert v3.parent_version == 2
        names = {c.name: c for c in v3.categories}
        assert set(names) == {"curated", "crawl", "round1_kept", "round1_rejected"}

        run_id = entries[0]["data"]["run_id"]
        kept = names["round1_kept"]
        assert kept.polarity == "positive"
        assert kept.source == f"pipeline:{run_id}:round1"
        round1_clf = entries[2]["data"]
        assert kept.doc_count == round1_clf["sample_kept"]
        assert names["round1_rejected"].doc_count == round1_clf["sample_rejected"]
        assert round1_clf["sample_kept"] + round1_clf["sample_rejected"] == 180

    def test_promoted_fingerprint_unique(self, control):
        entries = control["entries"]
        promoted = entries[-1]
        assert promoted["data"] == {"classifier_round": 2}
        fp1 = entries[2]["data"]["model_sha256"]
        fp2 = entries[6]["data"]["model_sha256"]
        assert fp1 != fp2  # round 2 trains on a different pool
        holders = [e for e in entries if fp2 in canonical_json(e)]
        assert len(holders) == 1

    def test_artifacts_match_journal(self, control):
        run_dir = control["run_dir"]
        for entry in control["entries"]:
            for key, rel in entry["data"].items():
                if not key.endswith("_path"):
                    continue
                path = os.path.join(run_dir, rel)
                assert os.path.exists(path), rel
                assert sha256_file(path) == entry["data"][key[:-5] + "_sha256"]

    def test_sample_scores_artifact(self, control):
        clf = control["entries"][2]["data"]
        path = os.path.join(control["run_dir"], clf["sample_scores_path"])
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                obj = json.loads(line)
                assert line.rstrip("\n") == canonical_json(obj)
                rows.append(obj)
        assert len(rows) == clf["sample_total"] == 180
        assert len({r["id"] for r in rows}) == len(rows)
        threshold = control["config"].threshold
        for r in rows:
            assert r["kept"] == (r["score"] >= threshold)
        assert sum(r["kept"] for r in rows) == clf["sample_kept"]

    def test_status_after_promotion(self, control):
        status = run_status(control["run_dir"])
        assert status == {
            "run_id": control["entries"][0]["data"]["run_id"],
            "status": PROMOTED,
            "round": 2,
            "max_rounds": 2,
            "pool_version": 3,
            "artifacts": {"training_set": True, "classifier": True, "report": True},
        }

    def test_fold_prefixes_walk_the_state_machine(self, control):
        entries = control["entries"]
        expect = {
            1: (AWAITING_TRAINING_SET, 1, 2),
            2: (AWAITING_CLASSIFIER, 1, 2),
            3: (AWAITING_VERIFICATION, 1, 2),
            4: (VERDICT_READY, 1, 2),
            5: (AWAITING_TRAINING_SET, 2, 3),
            8: (VERDICT_READY, 2, 3),
            9: (PROMOTED, 2, 3),
        }
        for n, (status, round_no, pool_version) in expect.items():
            state = pipeline._fold(entries[:n])
            assert state.status == status, n
            assert state.round == round_no, n
            assert state.pool_version == pool_version, n

    def test_resume_is_idempotent_and_readonly(self, control):
        before = journal_bytes(control["run_dir"])
        s1 = resume(control["run_dir"])
        s2 = resume(control["run_dir"])
        assert (s1.run_id, s1.status, s1.round, s1.pool_version) == (
            s2.run_id,
            s2.status,
            s2.round,
            s2.pool_version,
        )
        assert sorted(s1.rounds) == sorted(s2.rounds) == [1, 2]
        assert journal_bytes(control["run_dir"]) == before

    def test_terminal_run_refuses_more_work(self, control, monkeypatch):
        monkeypatch.chdir(control["root"])
        with pytest.raises(NotReady, match="terminal"):
            run_round("run")
        base, cand = improved_pair()
        with pytest.raises(NotReady):
            ingest_report("run", base, cand)


# ---------------------------------------------------------------------------
# verdicts

class TestVerdicts:
    def test_flat_report_rejects(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        init_run("run", config)
        run_round("run")
        flat = EvalScores("flat", {m: 50.0 for m in ALL_METRICS})
        state = ingest_report("run", flat, flat)
        assert state.status == VERDICT_READY
        state = run_round("run")
        assert state.status == REJECTED
        entries = read_journal("run")
        assert [e["type"] for e in entries] == [
            "init",
            "training_set",
            "classifier",
            "report",
            "rejected",
        ]
        verdicts = entries[-1]["data"]["verdicts"]
        assert set(verdicts) == {"English", "Chinese", "Overall"}
        assert set(verdicts.values()) == {"neutral"}
        assert SeedPoolStore("pool").latest_version() == 2  # nothing folded

    def test_single_round_configs_promote_without_folding(self, tmp_path, monkeypatch):
        config = build_world(tmp_path, max_rounds=1)
        monkeypatch.chdir(tmp_path)
        assert drive("run", config) == PROMOTED
        entries = read_journal("run")
        assert [e["type"] for e in entries] == [
            "init",
            "training_set",
            "classifier",
            "report",
            "promoted",
        ]
        assert entries[-1]["data"] == {"classifier_round": 1}
        assert SeedPoolStore("pool").latest_version() == 2

    def test_report_requires_waiting_run(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        init_run("run", config)
        base, cand = improved_pair()
        with pytest.raises(NotReady, match="ingest"):
            ingest_report("run", base, cand)

    def test_round_waits_for_report(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        init_run("run", config)
        run_round("run")
        with pytest.raises(NotReady, match="verification"):
            run_round("run")


# ---------------------------------------------------------------------------
# locking and failure wrapping

class TestLockingAndFailure:
    def test_lock_excludes_writers(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        init_run("run", config)
        lock = os.path.join("run", pipeline.LOCK_NAME)
        with open(lock, "w", encoding="utf-8"):
            pass
        with pytest.raises(RunLocked):
            run_round("run")
        base, cand = improved_pair()
        with pytest.raises(RunLocked):
            ingest_report("run", base, cand)
        os.makedirs("run2")
        with open(os.path.join("run2", pipeline.LOCK_NAME), "w", encoding="utf-8"):
            pass
        with pytest.raises(RunLocked):
            init_run("run2", config)

        os.remove(lock)
        state = run_round("run")
        assert state.status == AWAITING_VERIFICATION

    def test_round_failure_names_round_and_cause(self, tmp_path, monkeypatch):
        # quota of 300 positives against a 120 document category
        config = build_world(tmp_path, target_training_set=600)
        monkeypatch.chdir(tmp_path)
        init_run("run", config)
        with pytest.raises(RoundFailed) as err:
            run_round("run")
        assert err.value.round == 1
        assert isinstance(err.value.__cause__, InsufficientSeedData)
        assert [e["type"] for e in read_journal("run")] == ["init"]
        assert run_status("run")["status"] == AWAITING_TRAINING_SET


# ---------------------------------------------------------------------------
# corruption and healing

class TestCorruption:
    def test_tampered_artifact_detected(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        init_run("run", config)
        run_round("run")
        clf = read_journal("run")[2]["data"]
        model_path = os.path.join("run", clf["model_path"])
        with open(model_path, "rb") as f:
            original = f.read()
        with open(model_path, "wb") as f:
            f.write(b"not a model")
        with pytest.raises(StateCorrupt, match="model.ufwc"):
            resume("run")

        with open(model_path, "wb") as f:
            f.write(original)
        resume("run")  # healthy again

        os.remove(os.path.join("run", clf["sample_scores_path"]))
        with pytest.raises(StateCorrupt, match="missing"):
            resume("run")

    def test_midfile_damage_is_fatal(self, tmp_path, control):
        run_dir = str(tmp_path / "copy")
        shutil.copytree(control["run_dir"], run_dir)
        lines = journal_bytes(run_dir).splitlines(keepends=True)

        flipped = bytearray(lines[1])
        flipped[10] ^= 0x01
        damaged = b"".join([lines[0], bytes(flipped)] + lines[2:])
        with open(os.path.join(run_dir, pipeline.JOURNAL_NAME), "wb") as f:
            f.write(damaged)
        with pytest.raises(StateCorrupt):
            read_journal(run_dir)

    def test_reordered_entries_are_fatal(self, tmp_path, control):
        run_dir = str(tmp_path / "copy")
        shutil.copytree(control["run_dir"], run_dir)
        lines = journal_bytes(run_dir).splitlines(keepends=True)
        swapped = b"".join([lines[0], lines[2], lines[1]] + lines[3:])
        with open(os.path.join(run_dir, pipeline.JOURNAL_NAME), "wb") as f:
            f.write(swapped)
        with pytest.raises(StateCorrupt):
            read_journal(run_dir)

    def test_unknown_entry_type_is_fatal(self, tmp_path, control):
        run_dir = str(tmp_path / "copy")
        shutil.copytree(control["run_dir"], run_dir)
        rogue = pipeline._entry_line(len(NOMINAL_KINDS), "mystery", 2, {})
        with open(os.path.join(run_dir, pipeline.JOURNAL_NAME), "a", encoding="utf-8") as f:
            f.write(rogue + "\n")
        with pytest.raises(StateCorrupt, match="mystery"):
            run_status(run_dir)

    def test_missing_journal_is_unreadable(self, tmp_path):
        with pytest.raises(JournalUnreadable):
            read_journal(str(tmp_path / "nowhere"))

    def test_torn_tail_is_dropped_then_healed(self, tmp_path, monkeypatch, caplog):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        init_run("run", config)
        run_round("run")
        clean = journal_bytes("run")

        journal = os.path.join("run", pipeline.JOURNAL_NAME)
        with open(journal, "ab") as f:
            f.write(b'{"entry": {"seq": 3, "ty')

        with caplog.at_level(logging.WARNING, logger="websift.pipeline"):
            state = resume("run")  # read path: fragment ignored, not removed
        assert state.status == AWAITING_VERIFICATION
        assert any("torn" in r.message for r in caplog.records)
        assert journal_bytes("run") != clean

        base, cand = improved_pair()
        ingest_report("run", base, cand)  # write path: fragment truncated
        lines = journal_bytes("run").decode("utf-8").splitlines()
        assert len(lines) == 4
        for i, line in enumerate(lines):
            assert json.loads(line)["entry"]["seq"] == i
        assert journal_bytes("run").startswith(clean)

    def test_relocated_run_resumes(self, tmp_path, monkeypatch):
        old_root = tmp_path / "a"
        old_root.mkdir()
        config = build_world(old_root)
        monkeypatch.chdir(old_root)
        init_run("run", config)
        run_round("run")

        monkeypatch.chdir(tmp_path)
        shutil.move(str(old_root), str(tmp_path / "b"))
        monkeypatch.chdir(tmp_path / "b")
        assert resume("run").status == AWAITING_VERIFICATION
        base, cand = improved_pair()
        ingest_report("run", base, cand)
        state = run_round("run")
        assert state.round == 2
        assert state.status == AWAITING_VERIFICATION


# ---------------------------------------------------------------------------
# sampling

class TestReservoirSample:
    def test_deterministic_and_stream_ordered(self, tmp_path, monkeypatch):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        first = pipeline._reservoir_sample(config, 1)
        second = pipeline._reservoir_sample(config, 1)
        ids = [d.id for d in first]
        assert [d.id for d in second] == ids
        assert len(ids) == 180
        assert len(set(ids)) == 180
        assert ids == sorted(ids)  # raw ids are zero padded stream indexes

    def test_small_corpus_returns_everything(self, tmp_path, monkeypatch):
        config = build_world(tmp_path, sample_size=500)
        monkeypatch.chdir(tmp_path)
        sample = pipeline._reservoir_sample(config, 1)
        assert [d.id for d in sample] == [f"raw:{i:05d}" for i in range(200)]


# ---------------------------------------------------------------------------
# crash recovery

class Boom(RuntimeError):
    """Simulated crash between artifact writes and the journal append."""


def install_crash(monkeypatch, at, torn):
    real = pipeline._append_entry
    hits = {"seen": 0, "fired": False}

    def crashing(run_dir, seq, kind, round_no, data):
        if hits["seen"] == at and not hits["fired"]:
            hits["fired"] = True
            if torn:
                line = pipeline._entry_line(seq, kind, round_no, data)
                with open(pipeline._journal_path(run_dir), "a", encoding="utf-8") as f:
                    f.write(line[: len(line) // 2])
            raise Boom(f"crash at append {at}")
        hits["seen"] += 1
        return real(run_dir, seq, kind, round_no, data)

    monkeypatch.setattr(pipeline, "_append_entry", crashing)
    return hits


class TestCrashRecovery:
    @pytest.mark.parametrize("torn", [False, True], ids=["clean", "torn"])
    @pytest.mark.parametrize("at", range(len(NOMINAL_KINDS)))
    def test_recovery_converges_to_control(self, tmp_path, monkeypatch, control, at, torn):
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        hits = install_crash(monkeypatch, at, torn)

        with pytest.raises(Boom):
            drive("run", config)
        assert hits["fired"]
        assert not os.path.exists(os.path.join("run", pipeline.LOCK_NAME))

        assert drive("run", config) == PROMOTED
        assert journal_bytes("run") == control["journal"]

        store = SeedPoolStore("pool")
        with open(store._manifest_path(3), "rb") as f:
            assert f.read() == control["pool_v3"]

        # idempotent once terminal
        assert drive("run", config) == PROMOTED
        assert journal_bytes("run") == control["journal"]

    def test_crash_free_worlds_agree(self, tmp_path, monkeypatch, control):
        # same content at a different path gives identical journal bytes
        config = build_world(tmp_path)
        monkeypatch.chdir(tmp_path)
        assert drive("run", config) == PROMOTED
        assert journal_bytes("run") == control["journal"]
