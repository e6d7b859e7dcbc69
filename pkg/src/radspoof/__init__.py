"""Anti-spoofing for speech audio with retrieval-augmented classification."""

__version__ = "0.1.0"

from . import corpus, encoder, metrics, model, nn, pipeline, radf, vecstore  # noqa: F401
