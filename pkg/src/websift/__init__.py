"""websift: quality filtering for web-scale text corpora.

The toolkit covers the full filtering loop: text normalization, tokenization,
a fast linear quality classifier trained from curated seed pools, corpus
scoring with restartable shard runs, annealing verification planning, and a
journaled multi-round selection pipeline tying the stages together.
"""

__version__ = "0.1.0"
