"""Cross-model graph/relational join middleware with a learned plan selector."""

__version__ = "0.1.0"
