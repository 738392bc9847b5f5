"""Desk-scale latent visual reasoning lab.

A miniature multimodal decoder transformer, a synthetic grid-task corpus with
a three-stage curation pipeline, staged distillation fine-tuning, and
latent-aware policy optimization, all on a from-scratch float64 autodiff
engine so every gradient can be checked against finite differences.
"""

__version__ = "0.1.0"
