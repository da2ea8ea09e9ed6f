#!/usr/bin/env python3
"""Generate a synthetic sharded corpus for demos and benchmarks.

Documents are drawn from two disjoint word lists ("clean" and "noisy") so a
quality classifier trained on matching seed categories separates them. Use
--pool to also build a seed pool with one curated positive and one crawl
negative category.
"""

import argparse
import json
import os
import random
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from websift.documents import Document
from websift.seedpool import SeedPoolStore


def make_words(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i:04d}" for i in range(n)]


def make_doc(rng: random.Random, doc_id: str, words: list[str], length: tuple[int, int]) -> dict:
    body = " ".join(rng.choice(words) for _ in range(rng.randint(*length)))
    return {"id": doc_id, "text": body}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--docs", type=int, default=10_000, help="documents per shard")
    parser.add_argument("--shards", type=int, default=4)
    parser.add_argument("--vocab", type=int, default=1000, help="words per class")
    parser.add_argument("--min-len", type=int, default=50)
    parser.add_argument("--max-len", type=int, default=200)
    parser.add_argument("--clean-fraction", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=17)
    parser.add_argument("--pool", help="also build a seed pool at this path")
    parser.add_argument("--pool-docs", type=int, default=500, help="documents per seed category")
    args = parser.parse_args()

    rng = random.Random(args.seed)
    clean = make_words("clean", args.vocab)
    noisy = make_words("noisy", args.vocab)
    length = (args.min_len, args.max_len)

    os.makedirs(args.out_dir, exist_ok=True)
    total = 0
    for s in range(args.shards):
        path = os.path.join(args.out_dir, f"shard-{s:03d}.jsonl")
        with open(path, "w", encoding="utf-8") as f:
            for i in range(args.docs):
                words = clean if rng.random() < args.clean_fraction else noisy
                f.write(json.dumps(make_doc(rng, f"s{s:03d}d{i:06d}", words, length)) + "\n")
                total += 1
    print(f"wrote {total} documents across {args.shards} shards in {args.out_dir}")

    if args.pool:
        store = SeedPoolStore(args.pool).init()
        pos = [
            Document(id=f"seedpos{i:05d}", text=make_doc(rng, "", clean, length)["text"])
            for i in range(args.pool_docs)
        ]
        neg = [
            Document(id=f"seedneg{i:05d}", text=make_doc(rng, "", noisy, length)["text"])
            for i in range(args.pool_docs)
        ]
        store.add_category("curated", "positive", "synthetic-clean", pos)
        manifest = store.add_category("crawl", "negative", "synthetic-noisy", neg)
        print(f"seed pool at {args.pool}, version {manifest.version}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
