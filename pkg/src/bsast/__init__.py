"""Query-conditioned extraction of dry sources from first-order ambisonics mixtures."""

__version__ = "0.1.0"
