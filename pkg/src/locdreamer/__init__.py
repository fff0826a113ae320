"""LocDreamer: world-model based target tracking with learned anchor scheduling."""

__version__ = "0.1.0"
