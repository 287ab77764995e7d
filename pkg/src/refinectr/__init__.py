"""Masked generative CTR modeling with iterative inference-time refinement."""
