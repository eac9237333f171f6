"""Vocabulary-scale pseudo-labeling and self-training over precomputed embeddings."""

__version__ = "0.1.0"


class VocalignError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(VocalignError):
    """A file does not conform to its documented on-disk format."""


class ValidationError(VocalignError):
    """An operation was called with inputs violating its preconditions."""
