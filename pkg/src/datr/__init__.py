"""Dialogue-aware two-stage text-to-video retrieval.

Coarse retrieval with a trainable dual encoder over an exact cosine index,
followed by multi-turn query fusion and cross-encoder re-ranking of the
top candidates.
"""

__version__ = "0.1.0"
