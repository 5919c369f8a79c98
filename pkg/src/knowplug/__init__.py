"""Cross-domain knowledge extraction and plugging for CTR models, with a
versioned knowledge-cache service."""

__version__ = "0.1.0"
