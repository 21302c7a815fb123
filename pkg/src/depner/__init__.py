"""Joint dependency parsing and named-entity recognition with hierarchical
multi-task training over a shared subword-contextual embedding layer."""

__version__ = "0.1.0"
