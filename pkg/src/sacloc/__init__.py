"""Structured attention composition for two-modality temporal action localization.

Submodules are imported lazily by callers; nothing heavy happens at import.
"""

__version__ = "0.1.0"
