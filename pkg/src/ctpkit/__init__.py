"""Desk-scale continual pre-training toolkit.

Synthetic Markov corpora, a small next-token MLP, AdamW, multi-phase learning
rate schedules (cosine and infinite), compute-equivalent replay, and an
experiment harness that checks the expected trends.
"""

__version__ = "0.1.0"
