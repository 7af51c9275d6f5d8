"""Control stack and desk-scale simulator for tendon-driven musculoskeletal robots."""

__version__ = "0.1.0"
