"""Orchestration of the factorization pipeline."""
