"""Causal patching, key-head discovery and head rescaling for vision-language models."""

from vseam.utils import StageError, ValidationError, VSeamError, VSeamWarning

__all__ = ["StageError", "VSeamError", "VSeamWarning", "ValidationError"]
