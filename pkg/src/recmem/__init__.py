"""Audit LLM memorization of MovieLens-1M and compare LLM recommenders against classical baselines."""

__version__ = "0.1.0"
