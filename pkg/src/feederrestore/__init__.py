"""Two-stage restoration planning for unbalanced multi-feeder distribution networks."""
__version__ = "0.1.0"
