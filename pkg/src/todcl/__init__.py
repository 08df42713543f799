"""Task-oriented dialog modeling with context-state contrastive objectives."""

__version__ = "0.1.0"
