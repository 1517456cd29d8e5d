"""marl: multi-scale footprint representation learning for building-stock
archetypes and energy estimation."""

__version__ = "0.1.0"
