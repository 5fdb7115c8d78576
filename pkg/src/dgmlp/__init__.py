"""Gated MLPs under input drift: gate variants, scoped online adaptation, snapshot serving."""

__version__ = "0.1.0"
