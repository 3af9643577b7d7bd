"""Desk-scale multilingual post-training toolkit.

Checkpoint I/O, merging kernels, reward-routed data generation, preference
curation, tabular DPO and pairwise judge evaluation, wired together by a
hash-ledgered pipeline.
"""

__version__ = "0.1.0"
