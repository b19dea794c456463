"""Dual-path essay grading: a fast embedding classifier with a
confidence-gated LLM fallback and a human review queue."""

__version__ = "0.1.0"
