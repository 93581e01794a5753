"""Desk-scale visual localization pipeline: synthetic worlds, simulated
domain-shift variants, geometric-consistency curation, contrastive embedding
training, match-kernel retrieval, and pose-estimation evaluation."""

__version__ = "0.1.0"
