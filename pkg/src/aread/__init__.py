"""Multi-domain CTR prediction with hierarchical experts, per-domain expert
masks found by lottery-ticket pruning, and popularity-based augmentation of
minor domains."""

__version__ = "0.1.0"
