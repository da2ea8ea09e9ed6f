#!/usr/bin/env python3
"""Measure corpus scoring throughput on synthetic 1-KB documents.

Trains a small model, writes a shard of --docs documents of roughly 1 KB
each, then times score_corpus end to end (read, tokenize, score, write).
Reports documents/sec per worker.
"""

import argparse
import json
import os
import random
import shutil
import sys
import tempfile
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from websift.classifier import ClassifierConfig, LabeledExample, train
from websift.filtering import score_corpus
from websift.tokenizers import TokenizerSpec, load_tokenizer


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--docs", type=int, default=100_000)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--doc-words", type=int, default=170, help="about 1 KB at 6-char words")
    parser.add_argument("--seed", type=int, default=9)
    args = parser.parse_args()

    tokenizer = load_tokenizer(TokenizerSpec())
    rng = random.Random(args.seed)
    words = [f"w{i:04d}" for i in range(2000)]
    labeled = [
        LabeledExample(
            label="positive" if i % 2 else "negative",
            text=" ".join(rng.choice(words) for _ in range(100)),
        )
        for i in range(200)
    ]
    model = train(labeled, ClassifierConfig(dim=16, bucket=50_000, min_count=1), tokenizer)

    workdir = tempfile.mkdtemp(prefix="websift-bench-")
    try:
        shard = os.path.join(workdir, "shard-000.jsonl")
        size = 0
        with open(shard, "w", encoding="utf-8") as f:
            for i in range(args.docs):
                body = " ".join(rng.choice(words) for _ in range(args.doc_words))
                line = json.dumps({"id": f"b{i}", "text": body})
                size += len(line) + 1
                f.write(line + "\n")
        print(f"shard: {args.docs} docs, {size / 1e6:.1f} MB")

        out_dir = os.path.join(workdir, "scored")
        t0 = time.time()
        run = score_corpus(model, [shard], 0.5, tokenizer, out_dir, workers=args.workers)
        elapsed = time.time() - t0
        rate = args.docs / elapsed / args.workers
        print(
            f"{elapsed:.1f}s with {args.workers} worker(s): "
            f"{rate:,.0f} docs/sec/worker, kept {run.stats.documents_kept}"
        )
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
